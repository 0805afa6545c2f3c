"""Command line entry point: ``ufc <command> [--config PATH] [--set k=v ...] [--out DIR]``.

Exit codes: 0 success, 1 usage or configuration error, 2 stage failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline

COMMANDS = pipeline.STAGES + ("matrix", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ufc", description="Cluster-guided contrastive pretraining for segmentation.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON config file; defaults apply to missing keys")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a dotted config key, e.g. --set vae.beta=0.001")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = list(args.overrides)
        if args.out:
            overrides.append(f"output_dir={args.out}")
        cfg = pipeline.load_config(args.config, overrides)
    except (UsageError, pipeline.ConfigError) as exc:
        print(f"ufc: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        if args.command == "matrix":
            pipeline.run_matrix(cfg)
            print(pipeline.report(cfg["output_dir"]))
        elif args.command == "report":
            print(pipeline.report(cfg["output_dir"]))
        else:
            out = pipeline.run_stage(args.command, cfg)
            print(f"{args.command}: wrote {out}")
    except pipeline.ConfigError as exc:
        print(f"ufc: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # stage failure
        print(f"ufc: {args.command} failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
