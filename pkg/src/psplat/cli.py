"""Command-line entry point: ``psplat <stage> --config cfg.json [...]``.

Exit codes: 0 ok, 1 pipeline or evaluation error, 2 missing artifact or input,
3 malformed file, 4 bad parameter or configuration, 5 stale artifact,
6 metric gate failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .errors import ConfigError, PsplatError
from .formats import read_json, validate_file
from .pipeline import CHAIN, STAGES, PipelineConfig, run_chain, run_stage

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    level = os.environ.get("PSPLAT_LOG", "error").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psplat", description="Open-vocabulary 3D panoptic segmentation pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="pipeline configuration JSON")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--threads", type=int, help="cap on worker and BLAS threads")
    common.add_argument("--deterministic", action="store_true", help="bit-reproducible run; omits wall time")

    for name in STAGES + ("run",):
        help_ = "run fuse through eval in order" if name == "run" else f"run the {name} stage"
        p = sub.add_parser(name, parents=[common], help=help_)
        if name in ("supersegment", "run"):
            p.add_argument("--no-language", action="store_true", help="normal-only graph cuts (ablation)")
        if name in ("eval", "run"):
            for metric in ("miou", "macc", "prq-thing", "prq-stuff"):
                p.add_argument(f"--min-{metric}", type=float, metavar="X", help=f"fail with exit 6 if {metric} < X")
        if name in ("distill", "run"):
            p.add_argument("--distill-config", metavar="JSON", help="distillation settings overriding the config")
        if name == "export":
            p.add_argument("--color-by", choices=("instance", "class", "confidence"))

    v = sub.add_parser("validate", help="check a file against its declared format")
    v.add_argument("path")
    v.add_argument("--json", action="store_true", help="print the report as JSON")
    return parser


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config)
    overrides = {"seed": args.seed, "threads": args.threads}
    if args.deterministic:
        overrides["deterministic"] = True
    if getattr(args, "distill_config", None):
        extra = read_json(args.distill_config)
        if not isinstance(extra, dict):
            raise ConfigError("--distill-config must hold a JSON object")
        cfg = PipelineConfig.from_dict(_merge_distill(cfg.data, extra), cfg.base_dir, cfg.source)
    if getattr(args, "no_language", False):
        overrides["supersegment.use_language"] = False
    # gates go through the config so their range is validated like any other bound
    for metric in ("miou", "macc", "prq_thing", "prq_stuff"):
        overrides[f"eval.min_{metric}"] = getattr(args, f"min_{metric}", None)
    return cfg.override(**overrides)


def _merge_distill(data: dict, extra: dict) -> dict:
    out = dict(data)
    out["distill"] = {**data["distill"], **extra}
    return out


def _validate(args) -> int:
    report = validate_file(args.path)
    if args.json:
        print(json.dumps(report, indent=2))
    else:
        print(f"{report['path']}: {report['format']}")
        for item in report["violations"]:
            print(f"  - {item}")
        if not report["violations"]:
            print("  ok")
    return 0 if not report["violations"] else 3


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            return _validate(args)
        cfg = _config(args)
        if args.command == "run":
            reports = run_chain(cfg, CHAIN)
            print(json.dumps(reports["eval"]["counts"], sort_keys=True))
        else:
            options = {}
            if args.command == "export" and args.color_by:
                options["color_by"] = args.color_by
            report = run_stage(args.command, cfg, **options)
            print(json.dumps({"stage": report["stage"], "counts": report["counts"]}, sort_keys=True))
        return 0
    except PsplatError as exc:
        print(f"psplat: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
