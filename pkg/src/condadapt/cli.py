"""Command-line driver for the full pipeline."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .errors import CondAdaptError
from .pipeline import Paths, PipelineConfig


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="condadapt",
        description="Self-supervised condition adaptation pipeline",
    )
    parser.add_argument("--config", type=Path, default=None, help="pipeline config JSON (defaults used if omitted)")
    parser.add_argument("--out", type=Path, required=True, help="output directory for all artifacts")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="render every condition/split dataset")
    sub.add_parser("train-tasks", help="train and freeze the task networks")
    sub.add_parser("pseudo-gt", help="compute approximated ground truth on the reference splits")
    p = sub.add_parser("train-gan", help="train the translation pair for each initial condition")
    p.add_argument("--condition", type=int, default=None, help="train only this condition id")
    sub.add_parser("train-adapters", help="pretrain the identity seed, then per-condition adapters")
    sub.add_parser("train-classifier", help="train the condition classifier, centroids and threshold")
    sub.add_parser("build-memory", help="populate the parameter memory with offline records")
    sub.add_parser("evaluate", help="raw vs adapted tables, confusion matrix, PR curves")
    sub.add_parser("online-run", help="stream the held-out condition and adapt online")
    sub.add_parser("report", help="aggregate all stage outputs into one report")
    sub.add_parser("run-all", help="run every stage in order")
    p = sub.add_parser("write-config", help="write the default config JSON to the given path")
    p.add_argument("path", type=Path)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    cfg = PipelineConfig.from_json(args.config) if args.config else PipelineConfig()
    paths = Paths(args.out)
    paths.out.mkdir(parents=True, exist_ok=True)

    try:
        if args.command == "write-config":
            cfg.to_json(args.path)
            print(f"wrote {args.path}")
            return 0
        if args.command == "run-all":
            report = pipeline.run_all(cfg, paths.out)
            summary = report.get("evaluate") or {}
            print(json.dumps(summary.get("means_over_initial_conditions", {}), indent=2, sort_keys=True))
            return 0
        if args.command == "train-gan":
            info = pipeline.stage_train_gan(cfg, paths, only_condition=args.condition)
        else:
            info = pipeline.STAGES[args.command](cfg, paths)
        print(json.dumps(_summarize(info), indent=2, sort_keys=True))
        return 0
    except CondAdaptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _summarize(info: dict, max_len: int = 40) -> dict:
    """Trim long lists out of stage info for console output."""
    if not isinstance(info, dict):
        return info
    out = {}
    for k, v in info.items():
        if isinstance(v, dict):
            out[k] = _summarize(v, max_len)
        elif isinstance(v, list) and len(v) > max_len:
            out[k] = f"[{len(v)} entries]"
        else:
            out[k] = v
    return out


if __name__ == "__main__":
    sys.exit(main())
