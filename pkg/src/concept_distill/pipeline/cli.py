"""``distill`` command line.

Exit codes: 0 success, 2 finished but some records are flagged, 1 error.
"""

import argparse
import logging
import os
import sys
from dataclasses import replace

import torch

from ..errors import DistillError
from .config import PipelineConfig, load_config
from .manifest import DatasetManifest
from .stages import STAGES, Pipeline, flagged, ingest
from .toyset import make_toy_dataset

EXIT_OK, EXIT_ERROR, EXIT_FLAGGED = 0, 1, 2


def _common(p):
    p.add_argument("--config", help="INI config file (default: toy preset)")
    p.add_argument("--manifest", help="manifest.jsonl to read and update")
    p.add_argument("--seed", type=int, help="override [run] seed")
    p.add_argument("--workers", type=int, help="worker threads per stage")
    p.add_argument("--stage-force", action="append", default=[], metavar="STAGE",
                   help="recompute STAGE even if cached (repeatable, or 'all')")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="distill", description="Self-supervised foreground segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build a manifest from an image folder")
    _common(p)
    p.add_argument("source")
    p.add_argument("--out", required=True, help="folder for the manifest (and resized copies)")
    p.add_argument("--word", required=True, help="object word used in the foreground prompt")
    p.add_argument("--layout", choices=("flat", "cub-style", "bbox-style"), default="flat")
    p.add_argument("--size", type=int, help="resize images to SIZE x SIZE")
    p.add_argument("--test-fraction", type=float, default=0.0)

    p = sub.add_parser("toyset", help="render the synthetic shapes dataset")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--word", action="append", help="object word(s), default blob")
    p.add_argument("--test-fraction", type=float, default=0.3)

    for stage in STAGES + ("run-all",):
        p = sub.add_parser(stage, help=f"run the {stage} stage" if stage != "run-all" else "run every stage")
        _common(p)

    p = sub.add_parser("config", help="print the default configuration as INI")
    p.add_argument("--full-scale", action="store_true", help="full-scale defaults instead of the toy preset")
    return parser


def _config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.run = replace(cfg.run, seed=args.seed)
    if args.workers is not None:
        cfg.run = replace(cfg.run, workers=args.workers)
    return cfg


def _pipeline(args):
    if not args.manifest:
        raise ValueError("--manifest is required")
    cfg = _config(args)
    force = STAGES if "all" in args.stage_force else tuple(args.stage_force)
    torch.set_num_threads(max(1, cfg.run.workers))
    return Pipeline(DatasetManifest.load(args.manifest), cfg, force=force)


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "config":
        cfg = PipelineConfig() if args.full_scale else PipelineConfig.toy()
        sys.stdout.write(cfg.to_ini())
        return EXIT_OK
    if args.command == "ingest":
        m = ingest(args.source, args.out, args.word, args.layout, args.size, args.test_fraction,
                   seed=args.seed or 0)
        print(f"{len(m)} records -> {os.path.join(m.root, 'manifest.jsonl')}")
        return EXIT_OK
    if args.command == "toyset":
        m = make_toy_dataset(args.out, args.count, seed=args.seed or 0, words=tuple(args.word or ("blob",)),
                             test_fraction=args.test_fraction)
        print(f"{len(m)} records -> {os.path.join(m.root, 'manifest.jsonl')}")
        return EXIT_OK
    pipe = _pipeline(args)
    if args.command == "run-all":
        pipe.run_all()
    else:
        pipe.run(args.command)
    bad = flagged(pipe.manifest)
    if bad:
        print(f"{len(bad)} flagged records: {', '.join(bad[:10])}{' ...' if len(bad) > 10 else ''}",
              file=sys.stderr)
        return EXIT_FLAGGED
    return EXIT_OK


def main(argv=None):
    try:
        return run(argv)
    except (DistillError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
