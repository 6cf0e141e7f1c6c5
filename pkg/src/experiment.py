"""
Experiment runner: dataset -> model -> captured gradients -> attacks -> scores.

Every controller configuration attacks the same samples with the same model
and dummy seeds, so their loss trajectories agree up to their stop points.
"""

import logging
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from src import __version__
from src.attack import AttackConfig, AttackResult, run_attack
from src.autodiff import GradientSet
from src.config import ControllerSweep, DatasetConfig, ExperimentConfig, settings
from src.datasets import Dataset, load_cifar10, load_mnist, synth_dataset
from src.errors import AttackAborted, LeakageLabError
from src.fedsim import capture_target_gradient
from src.metrics import SampleOutcome, attack_success, mse, ssim, summarize
from src.models import Model, init_uniform
from src.report import ExperimentReport, Provenance, ReportRow, SampleRecord, emit_report
from src.stopping import ControllerKind, ControllerSpec, suggest_thresholds
from src.utils import clamp_unit, largest_odd_window, record_id

logger = logging.getLogger(__name__)

MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
CIFAR10_FILES = tuple(f"data_batch_{index}.bin" for index in range(1, 6))


def _resolve(path: str, root: str) -> Path:
    candidate = Path(path)
    if not candidate.is_absolute() and root:
        candidate = Path(root) / candidate
    if not candidate.exists() and candidate.with_name(candidate.name + ".gz").exists():
        return candidate.with_name(candidate.name + ".gz")
    return candidate


def load_dataset(config: DatasetConfig) -> Dataset:
    """Materialize the dataset an experiment document names."""
    if config.name == "synthetic":
        return synth_dataset(config.shape, config.classes, config.pool_size, config.seed)
    if config.name == "mnist":
        images = _resolve(config.images or MNIST_FILES[0], settings.MNIST_DIR)
        labels = _resolve(config.labels or MNIST_FILES[1], settings.MNIST_DIR)
        return load_mnist(images, labels)
    batches = config.batches or list(CIFAR10_FILES)
    return load_cifar10([_resolve(batch, settings.CIFAR10_DIR) for batch in batches])


@dataclass(frozen=True)
class AttackTask:
    controller_index: int
    controller: str
    sample_index: int
    dataset_index: int
    image: np.ndarray
    label: int
    target: GradientSet
    config: AttackConfig
    window_size: int

    @property
    def record_id(self) -> str:
        return record_id(self.controller, self.sample_index)


def _score(task: AttackTask, result: Optional[AttackResult], seconds: float, cause: str) -> SampleOutcome:
    if result is None:
        return SampleOutcome(
            sample_id=task.record_id, success=False, iterations=0, seconds=seconds, cause=cause
        )
    reconstruction = clamp_unit(result.x)
    quality = min(1.0, max(-1.0, ssim(reconstruction, task.image, window_size=task.window_size)))
    return SampleOutcome(
        sample_id=task.record_id,
        success=attack_success(quality),
        mse=mse(reconstruction, task.image),
        ssim=quality,
        iterations=result.iterations,
        seconds=seconds,
        cause=cause,
    )


def execute_task(model: Model, task: AttackTask) -> SampleRecord:
    """Run and score one attack. Failures are recorded, not raised."""
    started = time.perf_counter()
    result: Optional[AttackResult] = None
    error: Optional[str] = None
    try:
        result = run_attack(model, task.target, task.config)
    except AttackAborted as exc:
        result = exc.result
        error = str(exc)
    except LeakageLabError as exc:
        error = str(exc)

    if error:
        logger.error(f"Sample {task.record_id} failed: {error}")
    seconds = result.duration_s if result is not None else time.perf_counter() - started
    cause = "error" if error else result.cause
    outcome = _score(task, result, seconds, cause)
    if not error:
        logger.info(
            f"Sample {task.record_id}: I={outcome.iterations} cause={cause} "
            f"ssim={outcome.ssim:.4f} time={seconds:.2f}s"
        )
    return SampleRecord(
        record_id=task.record_id,
        controller_index=task.controller_index,
        controller=task.controller,
        sample_index=task.sample_index,
        dataset_index=task.dataset_index,
        label=task.label,
        original=task.image,
        outcome=outcome,
        result=result,
        error=error,
    )


def _failed_record(task: AttackTask, exc: BaseException) -> SampleRecord:
    logger.error(f"Sample {task.record_id} crashed in a worker: {exc}")
    return SampleRecord(
        record_id=task.record_id,
        controller_index=task.controller_index,
        controller=task.controller,
        sample_index=task.sample_index,
        dataset_index=task.dataset_index,
        label=task.label,
        original=task.image,
        outcome=SampleOutcome(sample_id=task.record_id, success=False, iterations=0, seconds=0.0, cause="error"),
        error=str(exc),
    )


def execute_tasks(model: Model, tasks: List[AttackTask], jobs: int) -> List[SampleRecord]:
    """Run tasks inline (jobs == 1) or on a process pool, merged by (controller, sample)."""
    if jobs <= 1 or len(tasks) <= 1:
        records = [execute_task(model, task) for task in tasks]
    else:
        records = []
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(execute_task, model, task): task for task in tasks}
            for future in as_completed(futures):
                try:
                    records.append(future.result())
                except Exception as exc:
                    records.append(_failed_record(futures[future], exc))
    return sorted(records, key=lambda record: (record.controller_index, record.sample_index))


def build_tasks(
    config: ExperimentConfig,
    dataset: Dataset,
    model: Model,
    indices: List[int],
    controllers: List[ControllerSpec],
) -> List[AttackTask]:
    height, width = dataset.image_shape[:2]
    window = largest_odd_window(height, width)
    captured: List[Tuple[np.ndarray, int, GradientSet]] = []
    for dataset_index in indices:
        image, label = dataset.sample(dataset_index)
        captured.append((image, label, capture_target_gradient(model, image, label, f"client-{dataset_index}")))

    tasks = []
    for controller_index, controller in enumerate(controllers):
        for sample_index, (dataset_index, (image, label, target)) in enumerate(zip(indices, captured)):
            tasks.append(
                AttackTask(
                    controller_index=controller_index,
                    controller=controller.label,
                    sample_index=sample_index,
                    dataset_index=dataset_index,
                    image=image,
                    label=label,
                    target=target,
                    config=config.attack.to_attack_config(config.base_seed + sample_index, controller),
                    window_size=window,
                )
            )
    return tasks


def run_experiment(config: ExperimentConfig, output_dir: Optional[Union[str, Path]] = None) -> ExperimentReport:
    """Attack ``config.run.samples`` samples under every controller configuration.

    Dataset errors are fatal; per-sample failures are recorded in the report.
    When ``output_dir`` is given the report files are written there.
    """
    started = time.perf_counter()
    started_at = datetime.now(timezone.utc).isoformat()
    dataset = load_dataset(config.dataset)
    indices = dataset.select(config.run.samples, config.selection_seed)
    spec = config.build_model_spec(dataset.image_shape, dataset.class_count)
    model = init_uniform(spec, config.init_seed, config.model.init_low, config.model.init_high)
    controllers = config.controller_specs()
    logger.info(
        f"Experiment on {dataset.name}: {len(indices)} sample(s) x {len(controllers)} controller(s), "
        f"{spec.architecture} with {model.parameter_count} weights"
    )

    tasks = build_tasks(config, dataset, model, indices, controllers)
    records = execute_tasks(model, tasks, config.jobs)

    rows = []
    for controller_index, controller in enumerate(controllers):
        outcomes = [record.outcome for record in records if record.controller_index == controller_index]
        summary = summarize(outcomes)
        rows.append(
            ReportRow(
                dataset=dataset.name,
                controller=controller.label,
                threshold=controller.threshold,
                patience=controller.patience,
                **summary.model_dump(),
            )
        )

    provenance = Provenance(
        code_version=__version__,
        dataset=dataset.name,
        base_seed=config.base_seed,
        model_seed=config.init_seed,
        selection_seed=config.selection_seed,
        sample_indices=indices,
        controllers=[controller.label for controller in controllers],
        jobs=config.jobs,
        started_at=started_at,
        wall_clock_s=time.perf_counter() - started,
        config=config.model_dump(mode="json"),
    )
    report = ExperimentReport(rows=rows, records=records, provenance=provenance)
    if output_dir is not None:
        emit_report(report, output_dir)
    return report


def calibrate(config: ExperimentConfig, count: int = 4) -> Tuple[List[float], ExperimentReport]:
    """Pilot the document's samples without early stopping and suggest thresholds."""
    pilot = config.with_controllers(ControllerSweep(kinds=[ControllerKind.NEVER]))
    report = run_experiment(pilot)
    finished = [record for record in report.records if record.result is not None]
    thresholds = suggest_thresholds(
        [record.result.loss_history for record in finished],
        [record.outcome.success for record in finished],
        count,
    )
    return thresholds, report
