import math

import numpy as np
import pandas as pd
import pytest

from src.attack import AttackResult
from src.metrics import SampleOutcome
from src.report import (
    SUMMARY_COLUMNS,
    ExperimentReport,
    Provenance,
    ReportRow,
    SampleRecord,
    compare_to_baseline,
    emit_report,
    load_report_json,
    read_summary,
)


def row(controller, asr, time_s, iter_avg, threshold=None, patience=None):
    return ReportRow(
        dataset="synthetic",
        controller=controller,
        threshold=threshold,
        patience=patience,
        asr=asr,
        mse_avg=0.0123456789,
        ssim_avg=0.95,
        recon_time_s=time_s,
        iter_max=iter_avg + 5,
        iter_min=iter_avg - 5,
        iter_avg=iter_avg,
        iter_sd=2.5,
    )


def record(controller, controller_index, sample_index, channels=1, iterations=3, snapshots=None):
    image = np.full((8, 8, channels), 0.25)
    record_id = f"{controller}_s{sample_index:03d}"
    result = AttackResult(
        x=image + 0.01,
        label=1,
        iterations=iterations,
        loss_history=[1.0 / (k + 1) for k in range(iterations)],
        duration_s=0.5,
        cause="exhausted",
        snapshots=snapshots or {},
    )
    outcome = SampleOutcome(
        sample_id=record_id, success=True, mse=1e-4, ssim=0.99, iterations=iterations, seconds=0.5, cause="exhausted"
    )
    return SampleRecord(
        record_id=record_id,
        controller_index=controller_index,
        controller=controller,
        sample_index=sample_index,
        dataset_index=10 + sample_index,
        label=1,
        original=image,
        outcome=outcome,
        result=result,
    )


@pytest.fixture
def report():
    rows = [row("never", 1.0, 40.0, 300.0), row("hybrid-T1e-05-P15", 0.9, 10.0, 75.0, 1e-5, 15)]
    records = [
        record("never", 0, 0, iterations=4, snapshots={2: np.zeros((8, 8, 1))}),
        record("hybrid-T1e-05-P15", 1, 0, iterations=2),
    ]
    failed = SampleOutcome(sample_id="hybrid-T1e-05-P15_s001", success=False, iterations=0, seconds=0.0, cause="error")
    records.append(
        SampleRecord(
            record_id="hybrid-T1e-05-P15_s001",
            controller_index=1,
            controller="hybrid-T1e-05-P15",
            sample_index=1,
            dataset_index=11,
            label=2,
            original=np.zeros((8, 8, 1)),
            outcome=failed,
            error="output-layer gradient is identically zero",
        )
    )
    provenance = Provenance(
        code_version="0.1.0",
        dataset="synthetic",
        base_seed=0,
        model_seed=0,
        selection_seed=0,
        sample_indices=[10, 11],
        controllers=["never", "hybrid-T1e-05-P15"],
        jobs=1,
        started_at="2026-01-01T00:00:00+00:00",
        wall_clock_s=50.0,
        config={"dataset": {"name": "synthetic"}},
    )
    return ExperimentReport(rows=rows, records=records, provenance=provenance)


class TestCompareToBaseline:
    def test_relative_numbers(self, report):
        (comparison,) = compare_to_baseline(report.rows)
        assert comparison.controller == "hybrid-T1e-05-P15"
        assert comparison.asr_delta == pytest.approx(-0.1)
        assert comparison.time_reduction == pytest.approx(0.75)
        assert comparison.iter_avg_ratio == pytest.approx(0.25)

    def test_without_baseline(self, report):
        assert compare_to_baseline(report.rows[1:]) == []

    def test_nan_baseline(self):
        rows = [row("never", 0.0, 0.0, float("nan")), row("plateau-P3", 0.5, 1.0, 10.0, patience=3)]
        (comparison,) = compare_to_baseline(rows)
        assert math.isnan(comparison.iter_avg_ratio)
        assert math.isnan(comparison.time_reduction)


class TestEmitReport:
    def test_summary_round_trip(self, report, tmp_path):
        emit_report(report, tmp_path)
        lines = (tmp_path / "summary.csv").read_text().splitlines()
        assert lines[0] == ",".join(SUMMARY_COLUMNS)
        assert len(lines) == 3
        assert lines[1].startswith("synthetic,never,,,")
        restored = read_summary(tmp_path / "summary.csv")
        assert restored[0].threshold is None and restored[0].patience is None
        assert restored[1].patience == 15
        for original, parsed in zip(report.rows, restored):
            for key, value in original.model_dump().items():
                if isinstance(value, float):
                    assert getattr(parsed, key) == pytest.approx(value, rel=1e-12)
                else:
                    assert getattr(parsed, key) == value

    def test_per_sample_files(self, report, tmp_path):
        written = emit_report(report, tmp_path)
        assert report.artifacts == written
        assert len((tmp_path / "loss_never_s000.csv").read_text().splitlines()) == 4
        assert (tmp_path / "reconstructed" / "never_s000.pgm").exists()
        assert (tmp_path / "original" / "hybrid-T1e-05-P15_s001.pgm").exists()
        assert not (tmp_path / "reconstructed" / "hybrid-T1e-05-P15_s001.pgm").exists()
        assert (tmp_path / "snapshots" / "never_s000_2.pgm").exists()

    def test_outcomes_table(self, report, tmp_path):
        emit_report(report, tmp_path)
        outcomes = pd.read_csv(tmp_path / "outcomes.csv", keep_default_na=False)
        assert list(outcomes["id"]) == [r.record_id for r in report.records]
        assert outcomes["error"].iloc[2] == "output-layer gradient is identically zero"
        assert outcomes["inferred_label"].iloc[2] == ""
        assert int(outcomes["inferred_label"].iloc[0]) == 1

    def test_comparison_file(self, report, tmp_path):
        emit_report(report, tmp_path)
        comparison = pd.read_csv(tmp_path / "comparison.csv")
        assert list(comparison["controller"]) == ["hybrid-T1e-05-P15"]

    def test_json_provenance(self, report, tmp_path):
        emit_report(report, tmp_path)
        payload = load_report_json(tmp_path / "report.json")
        assert payload["provenance"]["sample_indices"] == [10, 11]
        assert [r["controller"] for r in payload["rows"]] == ["never", "hybrid-T1e-05-P15"]

    def test_color_images_use_ppm(self, report, tmp_path):
        report.records = [record("never", 0, 0, channels=3)]
        emit_report(report, tmp_path)
        assert (tmp_path / "original" / "never_s000.ppm").read_bytes().startswith(b"P6 8 8 255\n")
