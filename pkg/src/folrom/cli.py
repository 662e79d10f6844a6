"""Command line driver.

Exit codes: 0 success, 1 numerical failure, 2 input error. Failures print
a one-line diagnostic naming the stage to stderr; files written by earlier
stages stay in the output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .normalform import compare_backbones, read_backbone
from .pipeline import PRESETS, STAGES, ConfigError, StageError, load_config, run_pipeline, run_stage


def _parser():
    p = argparse.ArgumentParser(prog="folrom", description="Invariant-foliation reduced order models from data.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "run"):
        s = sub.add_parser(name, help="full pipeline" if name == "run" else f"run the {name} stage")
        s.add_argument("--config", required=True,
                       help=f"JSON config file or preset name ({', '.join(sorted(PRESETS))})")
        s.add_argument("--seed", type=int, default=None, help="override the config seed")
        s.add_argument("--out", default=None, help="override the output directory")
    c = sub.add_parser("compare", help="max deviation between two backbone CSV files")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--by", choices=("rho", "amplitude"), default="amplitude")
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        if args.command == "compare":
            res = run_stage("compare", lambda: compare_backbones(read_backbone(args.a), read_backbone(args.b),
                                                                 by=args.by))
            print(json.dumps(res))
            return 0
        try:
            cfg = load_config(args.config, args.out, args.seed)
        except (ConfigError, OSError) as e:
            raise StageError("config", str(e), 2) from e
        stages = STAGES if args.command == "run" else (args.command,)
        run_pipeline(cfg, stages)
        print(f"folrom: {args.command} finished, results in {cfg.out_dir}")
        return 0
    except StageError as e:
        print(f"folrom: error in {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
