"""Command-line entry point: one verb per pipeline stage plus run-all and aggregate."""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from .errors import DecompositionError
from .harness import (
    PRESETS,
    STAGES,
    ExperimentConfig,
    SelectionMode,
    aggregate_experiment,
    aggregate_runs,
    export_csv,
    load_experiment_config,
    run_pipeline,
    run_stage,
)

logger = logging.getLogger(__name__)

LOG_LEVELS = (logging.WARNING, logging.INFO, logging.DEBUG)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="option-decomposition",
        description="Learn options by decomposing small ReLU policies and transfer them.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment file")
    common.add_argument("--preset", choices=sorted(PRESETS), help="named experiment preset")
    common.add_argument("--seed", type=int, action="append", help="seed (repeatable)")
    common.add_argument("--mode", choices=[m.value for m in SelectionMode], help="selection mode")
    common.add_argument("--out", type=Path, help="output directory (or file for aggregate)")
    common.add_argument(
        "-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG"
    )

    verbs = parser.add_subparsers(dest="verb", required=True)
    for stage in STAGES:
        verbs.add_parser(stage, parents=[common], help=f"run the {stage} stage")
    verbs.add_parser("run-all", parents=[common], help="run every stage for every seed")
    aggregate = verbs.add_parser(
        "aggregate", parents=[common], help="summarize learning curves into CSV"
    )
    aggregate.add_argument(
        "curves", nargs="*", type=Path, help="curve files (default: the experiment's targets)"
    )
    return parser


def _experiment(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_experiment_config(args.config, args.preset)
    out = None if args.verb == "aggregate" and args.curves else args.out
    return cfg.with_overrides(seeds=args.seed, mode=args.mode, output_dir=out)


def run(args: argparse.Namespace) -> List[Path]:
    """Execute a parsed command; returns the paths it wrote (where meaningful)."""
    if args.verb == "aggregate":
        if args.curves:
            target = args.out or Path("summary.csv")
            return [export_csv(aggregate_runs(args.curves), target)]
        return aggregate_experiment(_experiment(args))

    cfg = _experiment(args)
    if args.verb == "run-all":
        return [paths.root for paths in run_pipeline(cfg)]
    for seed in cfg.seeds:
        run_stage(cfg, args.verb, seed)
    return [cfg.output_dir]


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=LOG_LEVELS[min(args.verbose, len(LOG_LEVELS) - 1)],
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        written = run(args)
    except DecompositionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
