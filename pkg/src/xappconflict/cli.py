"""Command-line entry point: ``xappconflict <stage> [--config F] [--out D] [--seed N]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from xappconflict import pipeline
from xappconflict.config import PipelineConfig, load_config
from xappconflict.errors import ConfigError, DataError, EstimationError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_ESTIMATION = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xappconflict", description="Detect and quantify xApp conflicts on a simulated RAN.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON pipeline configuration (defaults are used if omitted)")
    common.add_argument("--out", type=Path, help="output directory (overrides io.out)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "generate the RAN dataset",
        "train": "fit one boosted-tree model per KPI",
        "explain": "exact Shapley importance per (RCP, KPI)",
        "graph": "build the causal DAG and classify conflicts",
        "estimate": "estimate ATE and CATE for every conflict pair",
        "report": "render report.md from earlier outputs",
    }
    for name in pipeline.STAGES:
        sub.add_parser(name, parents=[common], help=helps[name])
    p = sub.add_parser("pipeline", parents=[common], help="run all stages in order")
    p.add_argument("--stage", action="append", choices=pipeline.STAGES, help="run only these stages (repeatable)")
    return parser


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {args.seed}")
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = cfg.with_out(args.out)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        out = Path(cfg.io.out)
        if args.command == "pipeline":
            pipeline.cmd_pipeline(cfg, out, tuple(args.stage) if args.stage else pipeline.STAGES)
        else:
            pipeline.run_stage(args.command, cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EstimationError as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
