"""Command-line entry point: ``pnreid <subcommand> --run-dir DIR [--config F] [--seed N]``."""
from __future__ import annotations

import argparse
import logging
import sys

from .checkpoint import CheckpointError
from .config import ConfigValidationError, load_config
from .pipeline import Pipeline, PipelineError, RunDir

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2

SUBCOMMANDS = ("synth-data", "cluster-poses", "train-gan", "gen-normalized", "train-reid", "eval",
               "report", "run-all")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--run-dir", default="run", help="run directory (default: ./run)")
    common.add_argument("--config", help="JSON or TOML pipeline config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--force", action="store_true", help="rerun stages that are up to date")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="pnreid", description="Pose-normalized person re-identification pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "synth-data": "generate the stickperson dataset",
        "cluster-poses": "cluster training poses and pick canonical poses",
        "train-gan": "train the pose-conditioned generator",
        "gen-normalized": "synthesize canonical-pose images of the training set",
        "train-reid": "train backbones A (originals) and B (normalized)",
        "eval": "fused-feature retrieval evaluation",
        "report": "render figures and a summary table",
        "run-all": "every stage in order, then the report",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "eval":
            p.add_argument("--models-from", help="evaluate models of another run directory (no training)")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ConfigValidationError, PipelineError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # runtime failure in a stage
        logging.getLogger("pnreid").debug("stage failed", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _dispatch(args) -> int:
    import torch

    from .report import build_report

    torch.use_deterministic_algorithms(True)
    cfg = load_config(args.config, args.seed)
    run = RunDir(args.run_dir)
    if args.command == "report":
        if not run.root.is_dir():
            raise PipelineError(f"run directory not found: {run.root}")
        print(build_report(run.root))
        return EXIT_OK
    with run.locked():
        run.lock_config(cfg, force=args.force)
        pipe = Pipeline(cfg, run, force=args.force)
        if args.command == "run-all":
            entry = pipe.run_all()
            build_report(run.root)
        elif args.command == "eval":
            entry = pipe.eval(models_from=args.models_from)
        else:
            entry = getattr(pipe, args.command.replace("-", "_"))()
    print(f"{entry['stage']}: {entry['status']} ({', '.join(entry['outputs']) or 'no outputs'})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
