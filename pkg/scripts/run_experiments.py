"""Run every experiment config in ``configs/`` and write reports under ``results/``.

    python scripts/run_experiments.py [--configs configs] [--out results] [--only shjb_decay_ou]
"""

import argparse
import json
import sys
import time
from pathlib import Path

from ctdrl.experiments import ExperimentConfig, run_experiment

ROOT = Path(__file__).resolve().parent.parent


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--configs", type=Path, default=ROOT / "configs")
    p.add_argument("--out", type=Path, default=ROOT / "results")
    p.add_argument("--only", nargs="*", help="config stems to run")
    args = p.parse_args(argv)

    ok = True
    for path in sorted(args.configs.glob("*.json")):
        if args.only and path.stem not in args.only:
            continue
        if "experiment" not in json.loads(path.read_text()):
            continue  # environment files
        cfg = ExperimentConfig.load(path)
        t0 = time.perf_counter()
        report = run_experiment(cfg)
        report.write(args.out / path.stem)
        ok &= report.passed
        status = "PASS" if report.passed else "FAIL"
        print(f"{status}  {path.stem:<28} {time.perf_counter() - t0:6.1f}s  {report.verdicts}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
