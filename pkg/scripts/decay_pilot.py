"""Decay curves of the median weak loss across seeds and ridge strengths.

Used to pick the default ridge: the curve should fall monotonically for
every seed, not just the one in the shipped config.

    python scripts/decay_pilot.py --seeds 0 1 2 3 --ridges 1e-8 1e-6
"""

import argparse
from dataclasses import replace
from pathlib import Path

from ctdrl.experiments import ExperimentConfig, decay_verdicts, run_shjb_decay

ROOT = Path(__file__).resolve().parent.parent


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description="SHJB decay pilot")
    p.add_argument("--config", type=Path, default=ROOT / "configs" / "shjb_decay_ou.json")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    p.add_argument("--ridges", type=float, nargs="+", default=[1e-8])
    p.add_argument("--paths", type=int, help="override paths per anchor state")
    args = p.parse_args(argv)

    base = ExperimentConfig.load(args.config, "shjb-decay")
    print("N_list:", base.N_list)
    for ridge in args.ridges:
        for seed in args.seeds:
            cfg = replace(base, seed=seed, ridge=ridge)
            if args.paths:
                cfg = replace(cfg, sim=dict(cfg.sim, n_paths=args.paths))
            rep = run_shjb_decay(cfg)
            losses = [r["median_weak_loss"] for r in rep.rows]
            v = decay_verdicts(losses)
            curve = " ".join(f"{x:.2e}" for x in losses)
            print(f"ridge={ridge:.0e} seed={seed}  {curve}  monotone={v['nonincreasing_steps']} final<initial={v['final_below_initial']}")


if __name__ == "__main__":
    main()
