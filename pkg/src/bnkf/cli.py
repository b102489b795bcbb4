"""``bnkf`` command line: generate, train, eval and timing over one run directory.

Exit codes: 0 success, 1 a property check failed under ``--check``, 2 usage error
(bad flags or config, refused overwrite, missing inputs, lock held).
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import config as cfgmod
from . import pipeline
from .evalkit import METHODS
from .simkit import NOISE_TIERS_DEG

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2

COMMANDS = {
    "generate": (pipeline.generate, "simulate trajectories, measurements and fold-tagged datasets"),
    "train": (pipeline.train_models, "train per-fold joint and per-axis BNN models"),
    "eval": (pipeline.evaluate, "benchmark all methods and write the report CSVs"),
    "timing": (pipeline.timing, "time every method on one trajectory"),
}


def _csv_list(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def _methods(text: str) -> list[str]:
    lookup = {m.lower(): m for m in METHODS}
    out = []
    for p in _csv_list(text):
        if p.lower() not in lookup:
            raise argparse.ArgumentTypeError(f"unknown method {p!r}; choose from {', '.join(METHODS)}")
        out.append(lookup[p.lower()])
    return out


def _tiers(text: str) -> list[str]:
    parts = list(NOISE_TIERS_DEG) if text == "all" else _csv_list(text)
    bad = [p for p in parts if p not in NOISE_TIERS_DEG]
    if bad or not parts:
        raise argparse.ArgumentTypeError(f"unknown tier(s) {bad}; choose from low, medium, high, all")
    return parts


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file or a previous run's manifest.json")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", default="bnkf-run", help="run directory (default: %(default)s)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--methods", type=_methods,
                        help="comma-separated subset of EKF,UKF,BNN,BNKF,BNKFe")
    common.add_argument("--tier", type=_tiers, help="low, medium, high, a comma list, or all")
    common.add_argument("--check", action="store_true",
                        help="exit 1 if any property check fails")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="bnkf", description=__doc__.splitlines()[0].replace("``", ""),
        epilog="exit codes: 0 ok, 1 check failed (--check), 2 usage error")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text, description=help_text)
    return parser


def resolve_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.methods:
        cfg.methods = args.methods
    if args.tier:
        cfg.tiers = args.tier
    return cfg.validate()


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        failed = COMMANDS[args.command][0](cfg, args.out, args.force)
    except (cfgmod.ConfigError, pipeline.RunError, FileNotFoundError) as exc:
        print(f"bnkf {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for name in failed:
        print(f"check failed: {name}", file=sys.stderr)
    return EXIT_CHECK if (args.check and failed) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
