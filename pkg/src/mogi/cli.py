"""Command-line entry point: ``mogi VERB [--config PATH] [overrides]``.

Exit status is 0 on success, 2 for an invalid config or usage, and 1 when a
replication fails.
"""

import argparse
import logging
import sys

from .harness import MODES, STUDIES, ConfigError, ExperimentConfig, ExperimentError, apply_seed_override, run

log = logging.getLogger("mogi")


def _u64(text):
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return value


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mogi", description="Simulate, estimate, forecast and backtest overnight GARCH-Ito volatility models.")
    parser.add_argument("verb", choices=MODES, help="what to run")
    parser.add_argument("--config", metavar="PATH", help="JSON experiment config")
    parser.add_argument("--study", choices=STUDIES, help="low-dimensional or factor study")
    parser.add_argument("--seed", type=_u64, help="base seed (overrides config and $MOGI_SEED)")
    parser.add_argument("--reps", type=int, help="number of replications per (n, m) setting")
    parser.add_argument("--out", metavar="DIR", help="output directory")
    parser.add_argument("--threads", type=int, help="worker processes for replications")
    parser.add_argument("--data", metavar="PATH", help="panel directory or realized-series CSV for estimate")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    return parser


def config_from_args(args):
    config = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    config = apply_seed_override(config)
    config.mode = args.verb
    overrides = dict(study=args.study, seed=args.seed, reps=args.reps, out=args.out,
                     threads=args.threads, data_path=args.data)
    for name, value in overrides.items():
        if value is not None:
            setattr(config, name, value)
    return config


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        out = run(config_from_args(args))
    except ConfigError as exc:
        print(f"mogi {args.verb}: {exc}", file=sys.stderr)
        return 2
    except ExperimentError as exc:
        print(f"mogi {args.verb}: {exc}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
