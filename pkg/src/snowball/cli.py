"""Command-line entry point: ``snowball {mask,classify,attack,report}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import harness, imaging
from .errors import SnowballError
from .mask import MaskParams, generate_mask, write_mask

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="snowball", description="Black-box snowball patch placement attack toolkit.")
    parser.add_argument("--seed", type=int, default=None,
                        help="recorded in outputs for provenance; the pipeline itself is deterministic")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("mask", help="derive the perturbable mask of a sign image")
    p.add_argument("image")
    p.add_argument("--out", help="output PNG (default: <image>_mask.png)")
    p.add_argument("--blur-kernel", type=int, default=5)
    p.add_argument("--blur-sigma", type=float, default=1.4)
    p.add_argument("--canny-low", type=float, default=50)
    p.add_argument("--canny-high", type=float, default=150)
    p.add_argument("--close-radius", type=int, default=2)

    p = sub.add_parser("classify", help="print the oracle verdict for an image")
    p.add_argument("image")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--weights", help="SNWB weights file for the built-in CNN")
    src.add_argument("--endpoint", help="remote classifier URL")
    src.add_argument("--stub", help="stub rule: quadrant, mean-threshold, fixed")
    p.add_argument("--classes", help="class-name list, one per line")
    p.add_argument("--timeout", type=float, default=10.0)

    p = sub.add_parser("attack", help="run an experiment manifest and write its report")
    p.add_argument("manifest")
    p.add_argument("--output-dir", help="override the manifest output directory")
    p.add_argument("--workers", type=int, help="concurrent sign/fraction groups")
    p.add_argument("--no-resume", action="store_true", help="recompute cells that already have results")

    p = sub.add_parser("report", help="rebuild tables from a results directory")
    p.add_argument("results_dir")
    p.add_argument("--out", help="where to write tables (default: the results directory)")
    return parser


def _classifier_spec(args) -> dict:
    if args.weights:
        return {"kind": "builtin", "weights": args.weights, "classes": args.classes}
    if args.stub:
        return {"kind": "stub", "rule": args.stub}
    if args.endpoint or os.environ.get(harness.ENDPOINT_ENV):
        return {"kind": "remote", "endpoint": args.endpoint, "timeout": args.timeout}
    raise UsageError("classify needs --weights, --endpoint, --stub, or $" + harness.ENDPOINT_ENV)


def _cmd_mask(args) -> int:
    params = MaskParams(args.blur_kernel, args.blur_sigma, args.canny_low, args.canny_high, args.close_radius)
    mask = generate_mask(imaging.as_rgb(imaging.read_png(args.image)), params)
    image = Path(args.image)
    out = Path(args.out) if args.out else image.with_name(f"{image.stem}_mask.png")
    write_mask(mask, out)
    print(json.dumps({"mask": str(out), "area": mask.valid_area(), "seed": args.seed or 0}))
    return EXIT_OK


def _cmd_classify(args) -> int:
    oracle = harness.build_oracle(_classifier_spec(args), Path.cwd())
    verdict = oracle.classify(imaging.as_rgb(imaging.read_png(args.image)))
    print(json.dumps({**verdict.to_json(), "confidence_percent": harness.format_confidence(verdict.confidence),
                      "seed": args.seed or 0}))
    return EXIT_OK


def _cmd_attack(args) -> int:
    manifest = harness.load_manifest(args.manifest)
    overrides = {} if args.seed is None else {"seed": args.seed}
    if args.output_dir:
        overrides["output_dir"] = Path(args.output_dir)
    if args.workers:
        overrides["workers"] = args.workers
    manifest = dataclasses.replace(manifest, **overrides)
    results = harness.run_experiment(manifest, resume=not args.no_resume)
    paths = harness.emit_tables(results)
    errored = sum(1 for c in results.cells.values() if not c.ok)
    print(json.dumps({"cells": len(results.cells), "errored": errored, "tables": [str(p) for p in paths]}))
    return EXIT_OK


def _cmd_report(args) -> int:
    results = harness.load_results(args.results_dir)
    paths = harness.emit_tables(results, args.out)
    for path in paths:
        print(path)
    return EXIT_OK


COMMANDS = {"mask": _cmd_mask, "classify": _cmd_classify, "attack": _cmd_attack, "report": _cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.error("a command is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (SnowballError, OSError, ValueError, KeyError) as exc:
        print(f"snowball: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
