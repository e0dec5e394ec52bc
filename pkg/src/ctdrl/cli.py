"""``ctdrl`` command line: convergence experiments and return simulation."""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .envlib import load_env
from .experiments import EXPERIMENTS, ConfigError, ExperimentConfig, run_experiment
from .sdesim import SimConfig, mc_returns

log = logging.getLogger("ctdrl")


def _parse_state(text: str) -> np.ndarray:
    return np.array([float(t) for t in text.split(",")])


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctdrl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        e = sub.add_parser(name, help=f"run the {name} experiment")
        e.add_argument("--config", required=True, help="experiment config (JSON)")
        e.add_argument("--out", help="output directory (defaults to the config's out_dir)")
        if name == "shjb-decay":
            e.add_argument("--imputation", choices=["quantile"], default=None)
    s = sub.add_parser("simulate", help="Monte Carlo return samples from one start state")
    s.add_argument("--env", required=True, help="environment config (JSON)")
    s.add_argument("--x0", required=True, type=_parse_state, help="start state, comma separated")
    s.add_argument("--dt", required=True, type=float)
    s.add_argument("--horizon", required=True, type=float)
    s.add_argument("--paths", required=True, type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="CSV file, one return per line")
    return p


def _simulate(args) -> int:
    env, _ = load_env(args.env)
    cfg = SimConfig(args.dt, args.horizon, args.paths, args.seed)
    samples = mc_returns(env, args.x0[None, :], cfg)[0]
    with open(args.out, "w") as fh:
        fh.write("return\n")
        fh.writelines(f"{v!r}\n" for v in samples.tolist())
    log.info("wrote %d returns to %s", samples.size, args.out)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "simulate":
        return _simulate(args)
    try:
        cfg = ExperimentConfig.load(args.config, experiment=args.command)
        if getattr(args, "imputation", None):
            cfg.imputation = args.imputation
    except (ValueError, KeyError, TypeError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = args.out or cfg.out_dir
    if out is None:
        print("config error: no output directory (--out or out_dir)", file=sys.stderr)
        return 2
    try:
        report = run_experiment(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    report.write(out)
    for name, ok in report.verdicts.items():
        print(f"{'PASS' if ok else 'FAIL'}  {cfg.experiment}: {name}")
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
