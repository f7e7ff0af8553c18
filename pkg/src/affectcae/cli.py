#!/usr/bin/env python3
"""
affect-cae Command Line Interface
=================================
Stage-by-stage runs of the continuous affect pipeline and its experiment sweeps.

Entry point:
- affectcae-cli: pretrain, train-cae, encode, train-svr, postprocess,
  evaluate, run, sweep, synth-data

Exit codes: 0 success, 1 config error, 2 missing prerequisite,
3 runtime failure, 130 interrupted.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

from .config import RunConfig, load_config
from .errors import AffectError, ConfigError, MissingArtifactError
from .pipeline import Pipeline, output_lock, run_sweep

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_MISSING = 2
EXIT_FAILURE = 3
EXIT_INTERRUPTED = 130


def setup_logging(verbose: bool = False):
    """Setup logging configuration"""
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s [%(levelname)s] %(name)s: %(message)s")


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Continuous affect recognition: CNN pre-training, CAE features, SVR")
    parser.add_argument("--config", help="INI config file (defaults for every missing key)")
    parser.add_argument("--seed", type=int, help="Override run.seed")
    parser.add_argument("--out", default="runs/default", help="Output directory")
    parser.add_argument("--jobs", type=int, help="Parallel workers for grid search and sweeps")
    parser.add_argument("--verbose", "-v", action="store_true", help="Verbose logging")

    subparsers = parser.add_subparsers(dest="command", help="Pipeline stages")

    subparsers.add_parser("pretrain", help="Train the 7-class CNN on FER-style images")

    cae_parser = subparsers.add_parser("train-cae", help="Transfer, freeze and train the convolutional autoencoder")
    cae_parser.add_argument("--no-transfer", action="store_true", help="Start from seeded init (ablation)")
    cae_parser.add_argument("--freeze", type=int, choices=range(4), help="Freeze the first N conv blocks")
    cae_parser.add_argument("--encoder-size", type=int, help="Bottleneck size d")

    subparsers.add_parser("encode", help="Extract encoder features per subject")

    svr_parser = subparsers.add_parser("train-svr", help="Grid-search one SVR per dimension")
    svr_parser.add_argument("--delay", type=int, help="Delay compensation in frames")

    subparsers.add_parser("postprocess", help="Fit the post-processing chain per dimension")
    subparsers.add_parser("evaluate", help="Score raw and post-processed predictions")

    run_parser = subparsers.add_parser("run", help="Run every stage from --from onwards")
    run_parser.add_argument(
        "--from",
        dest="first_stage",
        default="pretrain",
        choices=["pretrain", "train-cae", "encode", "train-svr", "postprocess", "evaluate"],
        help="First stage to run",
    )

    sweep_parser = subparsers.add_parser("sweep", help="Freeze, encoder-size or delay experiment sweep")
    sweep_parser.add_argument("--kind", choices=["freeze", "encoder-size", "delay"], help="Sweep dimension")
    sweep_parser.add_argument("--values", type=_int_list, help="Comma-separated sweep values")

    synth_parser = subparsers.add_parser("synth-data", help="Write synthetic data in the on-disk layouts")
    synth_parser.add_argument("--target", help="Destination directory (default <out>/synth)")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file plus command-line overrides, validated."""
    config = load_config(args.config)
    overrides: Dict[str, Dict[str, object]] = {}

    def put(section: str, key: str, value: object):
        if value is not None:
            overrides.setdefault(section, {})[key] = value

    put("run", "seed", args.seed)
    put("run", "jobs", args.jobs)
    put("cae", "freeze", getattr(args, "freeze", None))
    put("cae", "encoder_size", getattr(args, "encoder_size", None))
    if getattr(args, "no_transfer", False):
        put("cae", "transfer", False)
    put("svr", "delay", getattr(args, "delay", None))
    kind = getattr(args, "kind", None)
    put("sweep", "kind", kind)
    values = getattr(args, "values", None)
    if values is not None:
        sweep_kind = kind or config.sweep.kind
        field = {"freeze": "freeze", "encoder-size": "encoder_sizes", "delay": "delays"}[sweep_kind]
        put("sweep", field, values)
    return config.with_overrides(**overrides) if overrides else config


def _attach_run_log(out_dir: Path) -> logging.Handler:
    handler = logging.FileHandler(out_dir / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s [%(levelname)s] %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    return handler


def execute(config: RunConfig, out_dir: Path, action: Callable[[Pipeline], None]) -> int:
    """Run ``action`` under the output lock with run.log attached; map failures to exit codes."""
    handler = None
    try:
        with output_lock(out_dir):
            handler = _attach_run_log(out_dir)
            pipeline = Pipeline(config, out_dir)
            pipeline.write_config()
            action(pipeline)
        return EXIT_OK
    except ConfigError as e:
        print(f"❌ Config error: {e}")
        return EXIT_CONFIG
    except MissingArtifactError as e:
        print(f"❌ Missing prerequisite: {e}")
        return EXIT_MISSING
    except FileNotFoundError as e:
        print(f"❌ Missing file: {e}")
        return EXIT_MISSING
    except KeyboardInterrupt:
        print("\nInterrupted")
        return EXIT_INTERRUPTED
    except AffectError as e:
        print(f"❌ {type(e).__name__}: {e}")
        return EXIT_FAILURE
    except Exception as e:
        logger.exception("Unexpected failure")
        print(f"❌ Error: {e}")
        return EXIT_FAILURE
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()


# ── Commands ───────────────────────────────────────────────────


def cmd_pretrain(config: RunConfig, out_dir: Path) -> int:
    def action(pipeline: Pipeline):
        scores = pipeline.pretrain()
        print("✅ Pre-training complete")
        for partition, value in scores.items():
            print(f"   {partition:<6} accuracy {value:.3f}")

    return execute(config, out_dir, action)


def cmd_train_cae(config: RunConfig, out_dir: Path) -> int:
    def action(pipeline: Pipeline):
        result = pipeline.train_cae()
        final = result.history[-1]
        print(f"✅ CAE trained: {len(result.history)} epoch(s), final MSE {final:.6f}")

    return execute(config, out_dir, action)


def cmd_encode(config: RunConfig, out_dir: Path) -> int:
    def action(pipeline: Pipeline):
        subjects = pipeline.encode()
        print(f"✅ Encoded {len(subjects)} subject(s)")

    return execute(config, out_dir, action)


def cmd_train_svr(config: RunConfig, out_dir: Path) -> int:
    def action(pipeline: Pipeline):
        for dimension, value in pipeline.train_svr().items():
            print(f"✅ {dimension}: best dev CCC {value:.4f}")

    return execute(config, out_dir, action)


def cmd_postprocess(config: RunConfig, out_dir: Path) -> int:
    def action(pipeline: Pipeline):
        for dimension, chain in pipeline.postprocess().items():
            steps = ", ".join(step.name for step in chain.steps) or "none"
            print(f"✅ {dimension}: steps [{steps}], dev CCC {chain.raw_dev_ccc:.4f} -> {chain.dev_ccc:.4f}")

    return execute(config, out_dir, action)


def _print_scores(reports) -> None:
    print(f"{'dimension':<10} {'partition':<10} {'stage':<14} {'CCC':>8} {'Pearson':>8} {'RMSE':>8}")
    for r in reports:
        print(f"{r.dimension:<10} {r.partition:<10} {r.stage:<14} {r.ccc:>8.4f} {r.pearson:>8.4f} {r.rmse:>8.4f}")


def cmd_evaluate(config: RunConfig, out_dir: Path) -> int:
    def action(pipeline: Pipeline):
        _print_scores(pipeline.evaluate())

    return execute(config, out_dir, action)


def cmd_run(config: RunConfig, out_dir: Path, first_stage: str = "pretrain") -> int:
    def action(pipeline: Pipeline):
        _print_scores(pipeline.run_from(first_stage))

    return execute(config, out_dir, action)


def cmd_sweep(config: RunConfig, out_dir: Path) -> int:
    def action(pipeline: Pipeline):
        cells = run_sweep(config, out_dir)
        failed = [c for c in cells if c.error]
        print(f"✅ Sweep {config.sweep.kind}: {len(cells) - len(failed)}/{len(cells)} cell(s) completed")
        for cell in failed:
            print(f"❌ {cell.kind}={cell.value}: {cell.error}")
        print(f"   Table: {out_dir / 'sweep' / (config.sweep.kind + '.csv')}")

    return execute(config, out_dir, action)


def cmd_synth_data(config: RunConfig, out_dir: Path, target: Optional[str] = None) -> int:
    def action(pipeline: Pipeline):
        written = pipeline.synth_data(Path(target) if target else None)
        print(f"✅ Synthetic data written to {written}")

    return execute(config, out_dir, action)


def cli_main(argv: Optional[List[str]] = None) -> int:
    """Entry point for affectcae-cli command"""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)

    if not args.command:
        parser.print_help()
        return EXIT_CONFIG

    try:
        config = resolve_config(args)
    except ConfigError as e:
        print(f"❌ Config error: {e}")
        return EXIT_CONFIG

    out_dir = Path(args.out)
    commands: Dict[str, Callable[[], int]] = {
        "pretrain": lambda: cmd_pretrain(config, out_dir),
        "train-cae": lambda: cmd_train_cae(config, out_dir),
        "encode": lambda: cmd_encode(config, out_dir),
        "train-svr": lambda: cmd_train_svr(config, out_dir),
        "postprocess": lambda: cmd_postprocess(config, out_dir),
        "evaluate": lambda: cmd_evaluate(config, out_dir),
        "run": lambda: cmd_run(config, out_dir, args.first_stage),
        "sweep": lambda: cmd_sweep(config, out_dir),
        "synth-data": lambda: cmd_synth_data(config, out_dir, args.target),
    }
    return commands[args.command]()


if __name__ == "__main__":
    sys.exit(cli_main())
