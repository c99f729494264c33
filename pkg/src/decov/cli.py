"""Command-line entry point: ``decov run|report|gridsearch|verify``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from . import config as config_mod
from .datasets import DataError
from .experiments import NoRunsError, emit_report, run_experiment, run_gridsearch
from .gradcheck import verify
from .trainer import ConfigError, DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("decov")


def _load(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(args.config)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.out is not None:
        cfg.output_dir = args.out
    if args.data_dir is not None:
        cfg.data = dataclasses.replace(cfg.data, data_dir=args.data_dir)
    cfg.validate()
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    run_experiment(cfg)
    for exp, path in emit_report(cfg.output_dir).items():
        print(f"{exp}: {path}")
    return EXIT_OK


def cmd_report(args) -> int:
    for exp, path in emit_report(args.dir).items():
        print(f"{exp}: {path}")
    return EXIT_OK


def cmd_gridsearch(args) -> int:
    cfg = _load(args)
    best, rows = run_gridsearch(cfg)
    print(f"{len(rows)} points; selected {best}")
    return EXIT_OK


def cmd_verify(args) -> int:
    failed = 0
    for r in verify(instances=args.instances, seed=args.seed or 0):
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status}  {r.name:<32} rel err {r.error:.2e} (tol {r.tolerance:.0e})")
    return EXIT_OK if not failed else EXIT_DIVERGED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="decov", description="DeCov regularisation experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress per epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    def overrides(p):
        p.add_argument("--seed", type=int, default=None, help="run only this seed")
        p.add_argument("--out", default=None, help="output directory (overrides output_dir)")
        p.add_argument("--data-dir", default=None, help="dataset directory (overrides data.data_dir)")

    p = sub.add_parser("run", help="train every cell and seed of an experiment config")
    p.add_argument("config")
    overrides(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="merge finished runs into report/<experiment>.csv")
    p.add_argument("dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gridsearch", help="validation grid over the config's grid section")
    p.add_argument("config")
    overrides(p)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("verify", help="finite-difference checks of every gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=100, help="random DeCov batches to check")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, NoRunsError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"numerical divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
