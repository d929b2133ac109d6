"""Command line entry point: ``gradiend <verb> [--config PATH] [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import io as gio
from .pipeline import STAGES, RunConfig, run_pipeline

VERBS = {stage: stage for stage in STAGES}
VERBS["run"] = "report"


def _config(args) -> RunConfig:
    raw = gio.read_json(args.config) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["out"] = args.out
    return RunConfig.from_dict(raw)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gradiend", description="Train and apply a gradient feature encoder-decoder "
                                "on a synthetic toy language model.")
    p.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        sp = sub.add_parser(verb, help="run the full pipeline" if verb == "run"
                            else f"run the pipeline up to the {verb} stage")
        sp.add_argument("--config", help="JSON config file (sections: corpus, model, gradiend, sweep, metrics, io)")
        sp.add_argument("--seed", type=int, help="global seed (unsigned 64-bit)")
        sp.add_argument("--out", help="output directory")
    sub.add_parser("show-config", help="print the fully materialized default config")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s")
    if args.verb == "show-config":
        print(json.dumps(RunConfig().to_dict(), indent=2, sort_keys=True))
        return 0
    try:
        cfg = _config(args)
        manifest = run_pipeline(cfg, until=VERBS[args.verb])
    except (ValueError, gio.IntegrityError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"{args.verb}: completed {', '.join(manifest['completed'])} -> {cfg.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
