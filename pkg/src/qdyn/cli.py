"""Command line entry point: qdyn <command> --config <path> [options]."""

import argparse
import json
import sys

from .errors import AuditFailure, ConfigError, QdynError
from .harness import COMMANDS, ResultBundle, RunConfig, emit, run


def build_parser():
    p = argparse.ArgumentParser(
        prog="qdyn",
        description="Tube-coordinate quantum dynamics laboratory",
    )
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--overwrite", action="store_true",
                   help="allow overwriting existing artifacts")
    p.add_argument("--seed", type=int, default=None,
                   help="override run.seed from the config")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print(f"error: config is not valid JSON ({args.config}:{exc.lineno})",
              file=sys.stderr)
        return 1
    if not isinstance(raw, dict):
        print("error: config must be a JSON object", file=sys.stderr)
        return 1
    if args.seed is not None:
        raw.setdefault("run", {})["seed"] = args.seed
    raw["command"] = args.command
    try:
        bundle = run(raw)
        paths = emit(bundle, args.out, overwrite=args.overwrite)
    except AuditFailure as exc:
        print(f"audit failure: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, QdynError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for p in paths:
        print(p)
    print(f"{bundle.command}: {'pass' if bundle.passed else 'FAIL'} "
          f"({bundle.wall_time:.2f} s)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
