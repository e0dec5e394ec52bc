"""Convergence experiments and their file reports.

Each runner returns an :class:`ExperimentReport` whose verdicts are derived
only from the recorded metric rows, so ``metrics.csv`` alone suffices to
recompute them.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import stats

from . import __version__
from .envlib import AnalyticBaseline, EnvSpec, ReturnInterval, env_from_config, probe_states, return_bounds
from .fitlearn import StatFn, anchor_states, fit_quantiles_from_samples
from .hjbcore import hjb_residual, mean_of_imputation, shjb_pointwise, shjb_weak
from .imputation import (
    QuantileImputation,
    StepCDF,
    TestFunctionFamily,
    default_bandwidth,
    kolmogorov_distance,
    quantile_impute,
    weak_distance,
)
from .sdesim import SimConfig, mc_returns

EXPERIMENTS = ("quantile-bound", "weak-norm", "shjb-decay", "hjb-consistency")
KOLMOGOROV_SLACK = 1e-9
# losses this small count as an exactly represented distribution
EXACT_LOSS = 1e-6
BASELINE_HJB_TOL = 1e-8


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str
    N_list: list
    env: Optional[dict] = None
    fixture: Optional[dict] = None
    sim: dict = field(default_factory=lambda: {"dt": 0.002, "n_paths": 10_000})
    seed: int = 0
    out_dir: Optional[str] = None
    n_anchors: int = 41
    n_features: int = 25
    ridge: float = 1e-8
    n_probes: int = 9
    imputation: str = "quantile"

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        ns = [int(n) for n in self.N_list]
        if not ns or any(n < 1 for n in ns) or any(b <= a for a, b in zip(ns, ns[1:])):
            raise ConfigError("N_list must be nonempty, positive and strictly increasing")
        self.N_list = ns
        if self.imputation != "quantile":
            raise ConfigError("only the quantile imputation strategy is supported for experiments")

    @classmethod
    def from_dict(cls, obj: dict, experiment: Optional[str] = None) -> "ExperimentConfig":
        obj = dict(obj)
        if experiment is not None:
            obj["experiment"] = experiment
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path: str | Path, experiment: Optional[str] = None) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh), experiment)

    def canonical(self) -> dict:
        d = asdict(self)
        d.pop("out_dir")
        return d

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.canonical(), sort_keys=True).encode()).hexdigest()

    def sim_config(self, env: EnvSpec) -> SimConfig:
        sim = dict(self.sim)
        try:
            dt, n_paths = float(sim["dt"]), int(sim["n_paths"])
            if sim.get("horizon") is not None:
                out = SimConfig(dt, float(sim["horizon"]), n_paths, self.seed, sim.get("tail_tol"))
            else:
                out = SimConfig.for_env(env, dt, n_paths, self.seed, sim.get("tail_frac", 1e-4))
            out.check(env)
            return out
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"bad sim settings: {exc}") from exc


@dataclass
class ExperimentReport:
    experiment: str
    columns: list
    rows: list
    verdicts: dict
    provenance: dict
    summary: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.verdicts.values())

    def metrics_csv(self) -> str:
        lines = [",".join(self.columns)]
        for row in self.rows:
            lines.append(",".join(_fmt(row[c]) for c in self.columns))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        obj = {
            "experiment": self.experiment,
            "passed": self.passed,
            "verdicts": self.verdicts,
            "summary": self.summary,
            "provenance": self.provenance,
        }
        return json.dumps(obj, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json())
        (out / "metrics.csv").write_text(self.metrics_csv())
        (out / "plot_metrics.py").write_text(_plot_script(self))
        return out


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


_PLOT_AXES = {
    "quantile-bound": ("N", ["distance", "bound"]),
    "weak-norm": ("N", ["weak_distance", "bound"]),
    "shjb-decay": ("N", ["median_weak_loss"]),
    "hjb-consistency": ("x", ["abs_error", "bound"]),
}


def _plot_script(report: ExperimentReport) -> str:
    xcol, ycols = _PLOT_AXES[report.experiment]
    logx = "plt.xscale('log', base=2)\n" if xcol == "N" else ""
    return f'''"""Plot {report.experiment} metrics: python plot_metrics.py [metrics.csv]"""
import csv
import sys

import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else "metrics.csv"
with open(path) as fh:
    rows = list(csv.DictReader(fh))
xs = [float(r["{xcol}"]) for r in rows]
for col in {ycols!r}:
    plt.plot(xs, [float(r[col]) for r in rows], marker="o", label=col)
{logx}plt.yscale("log")
plt.xlabel("{xcol}")
plt.title("{report.experiment}")
plt.legend()
plt.savefig("{report.experiment}.png", dpi=120)
'''


def _provenance(cfg: ExperimentConfig) -> dict:
    return {"seed": cfg.seed, "config_hash": cfg.config_hash(), "version": __version__}


# --- reference distributions -------------------------------------------------


@dataclass
class Reference:
    label: str
    cdf: object
    quantile: object
    interval: ReturnInterval


def uniform_reference(lo: float = 0.0, hi: float = 1.0) -> Reference:
    def cdf(z):
        return np.clip((np.asarray(z, dtype=float) - lo) / (hi - lo), 0.0, 1.0)

    return Reference("uniform", cdf, lambda tau: lo + np.asarray(tau) * (hi - lo), ReturnInterval(lo, hi))


def truncnorm_reference(mu: float = 0.0, sigma: float = 1.0, lo: float = -2.0, hi: float = 2.0) -> Reference:
    dist = stats.truncnorm((lo - mu) / sigma, (hi - mu) / sigma, loc=mu, scale=sigma)
    return Reference("truncnorm", dist.cdf, dist.ppf, ReturnInterval(lo, hi))


def env_references(env: EnvSpec, baseline: AnalyticBaseline, n_probes: int) -> list[Reference]:
    if baseline.return_cdf is None or baseline.return_quantile is None:
        raise ConfigError("environment has no analytic return distribution")
    iv = return_bounds(env)
    refs = []
    for x in probe_states(env, n_probes):
        label = f"x={x[0]:.6g}"
        if baseline.return_std == 0.0:
            v = float(baseline.value(x))
            refs.append(Reference(label, StepCDF([v], [1.0]), lambda tau, v=v: np.full(np.shape(tau), v), iv))
        else:
            refs.append(
                Reference(
                    label,
                    lambda z, x=x: baseline.return_cdf(x, z),
                    lambda tau, x=x: baseline.return_quantile(x, tau),
                    iv,
                )
            )
    return refs


def references_for(cfg: ExperimentConfig) -> list[Reference]:
    if cfg.fixture is not None:
        fx = dict(cfg.fixture)
        kind = fx.pop("kind", None)
        if kind == "uniform":
            return [uniform_reference(**fx)]
        if kind == "truncnorm":
            return [truncnorm_reference(**fx)]
        raise ConfigError(f"unknown fixture kind {kind!r}")
    if cfg.env is None:
        raise ConfigError("config needs a fixture or an env")
    return env_references(*_env(cfg), cfg.n_probes)


def midpoint_levels(n: int) -> np.ndarray:
    return (2 * np.arange(1, n + 1) - 1) / (2 * n)


# --- experiments -------------------------------------------------------------


def run_quantile_bound(cfg: ExperimentConfig, grid_points: int = 20_001) -> ExperimentReport:
    refs = references_for(cfg)
    rows = []
    for n in cfg.N_list:
        dist = 0.0
        for ref in refs:
            iv = ref.interval.nondegenerate()
            grid = np.linspace(iv.v_min, iv.v_max, grid_points)
            q = np.sort(np.asarray(ref.quantile(midpoint_levels(n)), dtype=float))
            dist = max(dist, kolmogorov_distance(ref.cdf, quantile_impute(q), grid))
        bound = 1.0 / (2 * n)
        rows.append({"N": n, "distance": dist, "bound": bound, "pass": dist <= bound + KOLMOGOROV_SLACK})
    verdicts = {"kolmogorov_within_half_over_N": all(r["pass"] for r in rows)}
    return ExperimentReport(
        "quantile-bound", ["N", "distance", "bound", "pass"], rows, verdicts, _provenance(cfg),
        {"references": [r.label for r in refs]},
    )


def run_weak_norm(cfg: ExperimentConfig) -> ExperimentReport:
    refs = references_for(cfg)
    fams = [TestFunctionFamily.default(ref.interval) for ref in refs]
    mass = max(f.mass_bound() for f in fams)
    rows = []
    for n in cfg.N_list:
        d = 0.0
        for ref, fam in zip(refs, fams):
            q = np.sort(np.asarray(ref.quantile(midpoint_levels(n)), dtype=float))
            d = max(d, weak_distance(ref.cdf, quantile_impute(q), fam))
        bound = mass / (2 * n)
        rows.append({"N": n, "weak_distance": d, "M": mass, "bound": bound, "pass": d <= bound})
    vals = [r["weak_distance"] for r in rows]
    verdicts = {
        "within_M_over_2N": all(r["pass"] for r in rows),
        "nonincreasing_in_N": all(b <= a for a, b in zip(vals, vals[1:])),
    }
    return ExperimentReport(
        "weak-norm", ["N", "weak_distance", "M", "bound", "pass"], rows, verdicts, _provenance(cfg),
        {"M": mass, "family_size": len(fams[0]), "references": [r.label for r in refs]},
    )


def _env(cfg: ExperimentConfig) -> tuple[EnvSpec, AnalyticBaseline]:
    try:
        return env_from_config(cfg.env)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad env: {exc}") from exc


def _need_env(cfg: ExperimentConfig) -> tuple[EnvSpec, AnalyticBaseline]:
    if cfg.env is None:
        raise ConfigError(f"{cfg.experiment} needs an env")
    return _env(cfg)


def _simulate_anchors(cfg: ExperimentConfig, env: EnvSpec):
    anchors = anchor_states(env, cfg.n_anchors)
    return anchors, mc_returns(env, anchors, cfg.sim_config(env))


def decay_verdicts(losses) -> dict:
    """Ordinal decay checks on a loss curve over increasing N."""
    losses = list(losses)
    steps = sum(b <= a for a, b in zip(losses, losses[1:]))
    exact = all(v <= EXACT_LOSS for v in losses)
    return {
        "final_below_initial": exact or losses[-1] < losses[0],
        "nonincreasing_steps": exact or steps >= len(losses) - 2,
    }


def run_shjb_decay(cfg: ExperimentConfig) -> ExperimentReport:
    env, _ = _need_env(cfg)
    iv = return_bounds(env)
    fam = TestFunctionFamily.default(iv)
    probes = probe_states(env, cfg.n_probes)
    anchors, samples = _simulate_anchors(cfg, env)
    z_diag = np.linspace(fam.lo, fam.hi, 401)
    rows = []
    for n in cfg.N_list:
        sf, rep = fit_quantiles_from_samples(StatFn.rbf_grid(env, n, cfg.n_features), anchors, samples, n, cfg.ridge)
        h = default_bandwidth(iv, n)
        imp = QuantileImputation(h)
        losses = [shjb_weak(env, sf, imp, x, fam) for x in probes]
        diff = max(float(np.max(np.abs(shjb_pointwise(env, sf, imp, x, z_diag).diffusion_term))) for x in probes)
        rows.append(
            {
                "N": n,
                "bandwidth": h,
                "median_weak_loss": float(np.median(losses)),
                "max_weak_loss": float(np.max(losses)),
                "fit_kolmogorov": rep.max_kolmogorov,
                "max_abs_diffusion": diff,
            }
        )
    verdicts = decay_verdicts([r["median_weak_loss"] for r in rows])
    cols = ["N", "bandwidth", "median_weak_loss", "max_weak_loss", "fit_kolmogorov", "max_abs_diffusion"]
    return ExperimentReport("shjb-decay", cols, rows, verdicts, _provenance(cfg), {"imputation": cfg.imputation})


def run_hjb_consistency(cfg: ExperimentConfig) -> ExperimentReport:
    env, baseline = _need_env(cfg)
    if baseline.value is None:
        raise ConfigError("environment has no analytic value function")
    iv = return_bounds(env)
    sim = cfg.sim_config(env)
    n = cfg.N_list[-1]
    anchors, samples = _simulate_anchors(cfg, env)
    sf, _ = fit_quantiles_from_samples(StatFn.rbf_grid(env, n, cfg.n_features), anchors, samples, n, cfg.ridge)
    se = float(np.max(samples.std(axis=1, ddof=1))) / math.sqrt(samples.shape[1]) if samples.shape[1] > 1 else 0.0
    # Monte Carlo slack: three standard errors, the left-Riemann bias bound and the truncated tail
    slack = 3.0 * se + env.r_abs_max * sim.dt + sim.tail_bound(env)
    bound = iv.width / (2 * n) + slack
    rows = []
    for x in probe_states(env, cfg.n_probes):
        mean = mean_of_imputation(sf.predict(x[None, :])[0])
        value = float(baseline.value(x))
        res = float(hjb_residual(env, baseline.value, baseline.value_grad, baseline.value_hess, x))
        err = abs(mean - value)
        rows.append(
            {"x": float(x[0]), "imputation_mean": mean, "value": value, "abs_error": err, "bound": bound,
             "hjb_residual": res, "pass": err <= bound}
        )
    verdicts = {
        "mean_within_bound": all(r["pass"] for r in rows),
        "baseline_hjb_residual": all(abs(r["hjb_residual"]) <= BASELINE_HJB_TOL for r in rows),
    }
    cols = ["x", "imputation_mean", "value", "abs_error", "bound", "hjb_residual", "pass"]
    return ExperimentReport("hjb-consistency", cols, rows, verdicts, _provenance(cfg), {"N": n, "mc_slack": slack})


RUNNERS = {
    "quantile-bound": run_quantile_bound,
    "weak-norm": run_weak_norm,
    "shjb-decay": run_shjb_decay,
    "hjb-consistency": run_hjb_consistency,
}


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    return RUNNERS[cfg.experiment](cfg)
