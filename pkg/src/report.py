"""
Experiment report types and the files they are written to.

Output layout under the report directory::

    summary.csv            one row per controller configuration
    comparison.csv         rows relative to the never-stop baseline (when present)
    outcomes.csv           one row per (controller, sample)
    loss_<id>.csv          iteration,loss per executed iteration
    reconstructed/<id>.pgm|ppm
    original/<id>.pgm|ppm
    snapshots/<id>_<iteration>.pgm|ppm
    report.json            provenance and summary rows
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel

from src.attack import AttackResult
from src.datasets import write_image, write_loss_curve
from src.metrics import SampleOutcome, SummaryRow

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = [
    "dataset", "controller", "threshold", "patience", "asr", "mse_avg", "ssim_avg",
    "recon_time_s", "iter_max", "iter_min", "iter_avg", "iter_sd",
]
COMPARISON_COLUMNS = [
    "controller", "threshold", "patience", "asr", "asr_delta",
    "recon_time_s", "time_reduction", "iter_avg_ratio",
]
OUTCOME_COLUMNS = [
    "id", "controller", "sample_index", "dataset_index", "label", "inferred_label",
    "success", "mse", "ssim", "iterations", "seconds", "cause", "error",
]
BASELINE_LABEL = "never"


class ReportRow(SummaryRow):
    """A SummaryRow tagged with the configuration it summarizes."""

    dataset: str
    controller: str
    threshold: Optional[float] = None
    patience: Optional[int] = None


class ComparisonRow(BaseModel):
    controller: str
    threshold: Optional[float] = None
    patience: Optional[int] = None
    asr: float
    asr_delta: float
    recon_time_s: float
    time_reduction: float
    iter_avg_ratio: float


class Provenance(BaseModel):
    code_version: str
    dataset: str
    base_seed: int
    model_seed: int
    selection_seed: int
    sample_indices: List[int]
    controllers: List[str]
    jobs: int
    started_at: str
    wall_clock_s: float
    config: Dict[str, Any]


@dataclass
class SampleRecord:
    """Everything known about one (controller, sample) attack."""

    record_id: str
    controller_index: int
    controller: str
    sample_index: int
    dataset_index: int
    label: int
    original: np.ndarray
    outcome: SampleOutcome
    result: Optional[AttackResult] = None
    error: Optional[str] = None

    @property
    def inferred_label(self) -> Optional[int]:
        return self.result.label if self.result is not None else None


@dataclass
class ExperimentReport:
    rows: List[ReportRow]
    records: List[SampleRecord]
    provenance: Provenance
    artifacts: List[Path] = field(default_factory=list)

    @property
    def outcomes(self) -> List[SampleOutcome]:
        return [record.outcome for record in self.records]

    def records_for(self, controller: str) -> List[SampleRecord]:
        return [record for record in self.records if record.controller == controller]


def _ratio(numerator: float, denominator: float) -> float:
    if denominator == 0 or math.isnan(denominator) or math.isnan(numerator):
        return float("nan")
    return numerator / denominator


def compare_to_baseline(rows: Sequence[ReportRow], baseline_label: str = BASELINE_LABEL) -> List[ComparisonRow]:
    """Each non-baseline row relative to the first row labelled ``baseline_label``.

    Returns an empty list when no baseline row exists.
    """
    baseline = next((row for row in rows if row.controller == baseline_label), None)
    if baseline is None:
        return []
    comparisons = []
    for row in rows:
        if row is baseline:
            continue
        comparisons.append(
            ComparisonRow(
                controller=row.controller,
                threshold=row.threshold,
                patience=row.patience,
                asr=row.asr,
                asr_delta=row.asr - baseline.asr,
                recon_time_s=row.recon_time_s,
                time_reduction=1.0 - _ratio(row.recon_time_s, baseline.recon_time_s),
                iter_avg_ratio=_ratio(row.iter_avg, baseline.iter_avg),
            )
        )
    return comparisons


def _frame(models: Sequence[BaseModel], columns: List[str]) -> pd.DataFrame:
    frame = pd.DataFrame([model.model_dump() for model in models], columns=columns)
    if "patience" in frame:
        frame["patience"] = frame["patience"].astype("Int64")
    return frame


def _image_suffix(image: np.ndarray) -> str:
    return ".ppm" if image.ndim == 3 and image.shape[2] == 3 else ".pgm"


def write_summary(rows: Sequence[ReportRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    _frame(rows, SUMMARY_COLUMNS).to_csv(path, index=False)
    return path


def read_summary(path: Union[str, Path]) -> List[ReportRow]:
    """Parse a summary.csv back into rows; blank threshold/patience become None."""
    frame = pd.read_csv(path)
    rows = []
    for record in frame.to_dict(orient="records"):
        for key in ("threshold", "patience"):
            if pd.isna(record[key]):
                record[key] = None
        if record["patience"] is not None:
            record["patience"] = int(record["patience"])
        rows.append(ReportRow(**record))
    return rows


def write_outcomes(records: Sequence[SampleRecord], path: Union[str, Path]) -> Path:
    path = Path(path)
    frame = pd.DataFrame(
        [
            {
                "id": record.record_id,
                "controller": record.controller,
                "sample_index": record.sample_index,
                "dataset_index": record.dataset_index,
                "label": record.label,
                "inferred_label": record.inferred_label,
                "success": record.outcome.success,
                "mse": record.outcome.mse,
                "ssim": record.outcome.ssim,
                "iterations": record.outcome.iterations,
                "seconds": record.outcome.seconds,
                "cause": record.outcome.cause,
                "error": record.error or "",
            }
            for record in records
        ],
        columns=OUTCOME_COLUMNS,
    )
    frame["inferred_label"] = frame["inferred_label"].astype("Int64")
    frame.to_csv(path, index=False)
    return path


def save_report_json(report: ExperimentReport, path: Union[str, Path]) -> Path:
    """Saves provenance and summary rows to a JSON file."""
    path = Path(path)
    payload = {
        "provenance": report.provenance.model_dump(mode="json"),
        "rows": [row.model_dump(mode="json") for row in report.rows],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, ensure_ascii=False)
    return path


def load_report_json(path: Union[str, Path]) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def emit_report(report: ExperimentReport, output_dir: Union[str, Path]) -> List[Path]:
    """Write every report artifact under ``output_dir``; returns the paths written."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    written = [write_summary(report.rows, output_dir / "summary.csv")]

    comparisons = compare_to_baseline(report.rows)
    if comparisons:
        comparison_path = output_dir / "comparison.csv"
        _frame(comparisons, COMPARISON_COLUMNS).to_csv(comparison_path, index=False)
        written.append(comparison_path)

    written.append(write_outcomes(report.records, output_dir / "outcomes.csv"))

    for record in report.records:
        suffix = _image_suffix(record.original)
        written.append(write_image(record.original, output_dir / "original" / f"{record.record_id}{suffix}"))
        if record.result is None:
            continue
        written.append(write_loss_curve(record.result.loss_history, output_dir / f"loss_{record.record_id}.csv"))
        written.append(
            write_image(record.result.x, output_dir / "reconstructed" / f"{record.record_id}{suffix}")
        )
        for iteration, snapshot in sorted(record.result.snapshots.items()):
            written.append(
                write_image(snapshot, output_dir / "snapshots" / f"{record.record_id}_{iteration}{suffix}")
            )

    written.append(save_report_json(report, output_dir / "report.json"))
    report.artifacts = written
    logger.info(f"Wrote {len(written)} report file(s) to {output_dir}")
    return written
