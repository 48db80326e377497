"""Command-line entry point: one subcommand per pipeline stage plus ``run-all``."""

from __future__ import annotations

import argparse
import logging
import sys

from bsn.pipeline import STAGES, StageError, load_config, run_pipeline, run_stage

log = logging.getLogger("bsn")

HELP = {
    "synth": "generate the synthetic dataset under WORKDIR/data",
    "train-tem": "train the boundary/actionness network",
    "infer-tem": "write probability sequences for every video",
    "propose": "generate candidate proposals and their BSP features",
    "train-pem": "train the proposal confidence regressor",
    "score": "score proposals and fuse with boundary probabilities",
    "nms": "suppress redundant proposals",
    "eval": "compute AR@AN, AUC and recall-vs-tIoU reports",
    "run-all": "run every stage in order",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", "-w", default="work", help="working directory (default: ./work)")
    common.add_argument("--config", "-c", help="INI config file with per-stage sections")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value; may be repeated")
    common.add_argument("--verbose", "-v", action="store_true")

    parser = argparse.ArgumentParser(prog="bsn", description="Boundary-sensitive temporal proposal pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "run-all"):
        p = sub.add_parser(name, parents=[common], help=HELP[name])
        if name == "run-all":
            p.add_argument("--no-synth", action="store_true",
                           help="use an existing dataset instead of generating one")
    return parser


def _summary(reports: dict) -> None:
    for split, rep in reports.items():
        ar = ", ".join(f"AR@{k}={v:.4f}" for k, v in rep["ar_at_an"].items())
        auc = f", AUC={rep['auc']:.2f}" if "auc" in rep else ""
        print(f"{split}: {ar}{auc}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = "config"
    try:
        cfg = load_config(args.config, args.overrides)
        if args.command == "run-all":
            stage = "run-all"
            reports = run_pipeline(args.workdir, cfg, synth=False if args.no_synth else None)
        else:
            stage = args.command
            reports = run_stage(args.command, args.workdir, cfg)
        if isinstance(reports, dict):
            _summary(reports)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, FloatingPointError) as exc:
        print(f"error: [{stage}] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
