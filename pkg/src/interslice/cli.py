"""Command-line entry point: one subcommand per pipeline stage plus `run`.

Exit status is 0 on success; on a stage failure the stage name is printed to
stderr and the exit status is 1. Kernel backend selection honours the
INTERSLICE_BACKEND environment variable (numpy or numba).
"""

import argparse
import sys

from . import __version__
from .pipeline import ExperimentConfig, STAGE_ORDER, run_pipeline


def _add_common(parser):
    parser.add_argument("--config", required=True, help="experiment config JSON")
    parser.add_argument("--output", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--setting", type=int, action="append", default=None,
                        choices=[1, 2, 3, 4], help="restrict to one or more settings")
    parser.add_argument("--resume", action="store_true",
                        help="continue a previously failed run")


def build_parser():
    parser = argparse.ArgumentParser(prog="interslice",
                                     description="inter-slice augmentation toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute the full pipeline")
    _add_common(run_p)
    run_p.add_argument("--stage", default=None, choices=STAGE_ORDER,
                       help="stop after this stage family")

    stage_commands = {
        "phantom": "phantom",
        "split": "split",
        "sparsify": "sparsify",
        "train-gen": "train-gen",
        "fill": "fill",
        "train-deblur": "train-deblur",
        "train-seg": "train-seg",
        "eval": "eval",
        "report": "eval",
    }
    for command, stage in stage_commands.items():
        p = sub.add_parser(command, help=f"run the pipeline up to {stage}")
        _add_common(p)
        p.set_defaults(stage=stage)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = ExperimentConfig.from_json(args.config)
        if args.seed is not None:
            config.seed = args.seed
        stage = getattr(args, "stage", None)
        manifest = run_pipeline(config, args.output, resume=args.resume,
                                stop_after=stage, settings=args.setting)
    except Exception as err:
        failed = _failed_stage_name(err)
        print(f"error{failed}: {err}", file=sys.stderr)
        return 1
    if args.command == "report":
        summary = f"{args.output}/eval/summary.txt"
        try:
            sys.stdout.write(open(summary).read())
        except OSError:
            print(f"no summary at {summary}", file=sys.stderr)
            return 1
    done = sum(1 for s in manifest.stages.values() if s["status"] == "done")
    cached = sum(1 for s in manifest.stages.values() if s["status"] == "cached")
    print(f"ok: {done} stage(s) executed, {cached} cached -> {args.output}")
    return 0


def _failed_stage_name(err):
    stage = getattr(err, "stage_name", None)
    return f" in stage {stage}" if stage else ""


if __name__ == "__main__":
    raise SystemExit(main())
