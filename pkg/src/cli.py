"""
Command-line entry point.

    python -m src.cli run experiment.toml --out runs/mnist --jobs 4
    python -m src.cli validate experiment.toml
    python -m src.cli demo
    python -m src.cli calibrate experiment.toml --count 4
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from src.config import ExperimentConfig, load_config, parse_config, settings
from src.errors import ConfigError, LeakageLabError
from src.experiment import calibrate, run_experiment
from src.report import ExperimentReport, compare_to_baseline

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_CONFIG = 2

DEMO_CONFIG = """
dataset = "synthetic"

[run]
samples = 4

[controllers]
kinds = ["never", "hybrid"]
thresholds = [1e-5]
patiences = [15]
"""


def configure_logging(verbose: bool = False) -> None:
    level = logging.DEBUG if verbose or settings.DEBUG_MODE else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s - %(levelname)s - %(message)s", force=True)


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--out", type=Path, default=None, help="Directory for report files")
    shared.add_argument("--seed", type=int, default=None, help="Base seed for model, selection and dummies")
    shared.add_argument("--jobs", type=int, default=None, help="Worker processes (1 runs inline)")
    shared.add_argument("--verbose", action="store_true", help="Log every attack iteration")

    parser = argparse.ArgumentParser(
        prog="leaklab",
        description="Gradient leakage attacks with early-stopping controllers",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", parents=[shared], help="Run an experiment document")
    run.add_argument("config", type=Path)

    validate = commands.add_parser("validate", parents=[shared], help="Check an experiment document")
    validate.add_argument("config", type=Path)

    commands.add_parser("demo", parents=[shared], help="Synthetic end-to-end run")

    calibrate_cmd = commands.add_parser(
        "calibrate", parents=[shared], help="Suggest thresholds from never-stop pilot runs"
    )
    calibrate_cmd.add_argument("config", type=Path)
    calibrate_cmd.add_argument("--count", type=int, default=4, help="Number of decades to suggest")
    return parser


def _load(args: argparse.Namespace) -> ExperimentConfig:
    config = parse_config(DEMO_CONFIG) if args.command == "demo" else load_config(args.config)
    output_dir = args.out
    if output_dir is None and args.command == "demo":
        output_dir = Path(settings.EXPERIMENT_OUTPUT_DIR) / "demo"
    if args.jobs is not None and args.jobs < 1:
        raise ConfigError([(None, "--jobs", "must be at least 1")])
    if args.seed is not None and args.seed < 0:
        raise ConfigError([(None, "--seed", "must be non-negative")])
    return config.with_overrides(output_dir=output_dir, seed=args.seed, jobs=args.jobs)


def print_report(report: ExperimentReport) -> None:
    print(f"\n📊 Results ({report.provenance.dataset}, {len(report.provenance.sample_indices)} samples)")
    for row in report.rows:
        print(
            f"   • {row.controller}: ASR={row.asr:.2f} SSIM={row.ssim_avg:.4f} "
            f"iter avg={row.iter_avg:.1f} (min {row.iter_min:g}, max {row.iter_max:g}) "
            f"time={row.recon_time_s:.2f}s"
        )
    for comparison in compare_to_baseline(report.rows):
        print(
            f"   ⏱️  {comparison.controller} vs never: time -{comparison.time_reduction:.0%}, "
            f"ASR {comparison.asr_delta:+.2f}"
        )
    failures = [record for record in report.records if record.error]
    if failures:
        print(f"   ⚠️ {len(failures)} sample(s) failed; see outcomes.csv")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        config = _load(args)
        if args.command == "validate":
            labels = ", ".join(spec.label for spec in config.controller_specs())
            print(f"✅ {args.config} is valid: dataset={config.dataset.name}, controllers=[{labels}]")
            return EXIT_OK

        if args.command == "calibrate":
            print(f"🧪 Calibrating thresholds on {config.run.samples} pilot sample(s)...")
            thresholds, _ = calibrate(config, args.count)
            print("✅ Suggested thresholds: " + ", ".join(f"{t:g}" for t in thresholds))
            return EXIT_OK

        print(f"🚀 Running {config.dataset.name} experiment -> {config.output_dir}")
        report = run_experiment(config, config.output_dir)
        print_report(report)
        print(f"✅ Report written to {config.output_dir}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LeakageLabError, OSError) as exc:
        logger.debug("Fatal error", exc_info=True)
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
