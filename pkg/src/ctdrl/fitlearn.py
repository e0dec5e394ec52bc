"""Smooth statistics functions over states: fitting and loss minimisation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .envlib import EnvSpec
from .hjbcore import shjb_weak
from .imputation import QuantileImputation, StepCDF, TestFunctionFamily, kolmogorov_distance, quantile_impute
from .sdesim import SimConfig, mc_returns, sorted_quantiles

Array = np.ndarray

MAX_CONDITION = 1e12


class FitError(RuntimeError):
    pass


# --- isotonic projection -----------------------------------------------------


def pav_blocks(y) -> list[tuple[int, int]]:
    """Pool-adjacent-violators blocks ``[start, stop)`` of the isotonic fit to ``y``."""
    y = np.asarray(y, dtype=float)
    sums: list[float] = []
    counts: list[int] = []
    for v in y:
        sums.append(float(v))
        counts.append(1)
        while len(sums) > 1 and sums[-2] / counts[-2] > sums[-1] / counts[-1]:
            s, c = sums.pop(), counts.pop()
            sums[-1] += s
            counts[-1] += c
    blocks, start = [], 0
    for c in counts:
        blocks.append((start, start + c))
        start += c
    return blocks


def _pool(a: Array, blocks) -> Array:
    out = np.array(a, dtype=float, copy=True)
    for lo, hi in blocks:
        if hi - lo > 1:
            out[lo:hi] = a[lo:hi].mean(axis=0)
    return out


def isotonic_project(s) -> Array:
    """Nearest nondecreasing vector in squared distance."""
    s = np.asarray(s, dtype=float)
    return _pool(s, pav_blocks(s))


# --- statistics functions ----------------------------------------------------


@dataclass(frozen=True)
class StatFn:
    """``s_k(x) = sum_j W[k, j] exp(-|x - c_j|^2 / (2 l^2)) + b_k``.

    With ``monotone`` set, evaluation projects ``s(x)`` onto nondecreasing
    vectors; the Jacobian and Hessians are pooled over the same blocks, which
    is the derivative of the projection wherever the pooling is locally
    constant.
    """

    centers: Array
    lengthscale: float
    weights: Array
    offsets: Array
    monotone: bool = True

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float)
        c = c[:, None] if c.ndim == 1 else c
        w = np.atleast_2d(np.asarray(self.weights, dtype=float))
        b = np.atleast_1d(np.asarray(self.offsets, dtype=float))
        if w.shape != (b.size, c.shape[0]):
            raise ValueError(f"weights must have shape ({b.size}, {c.shape[0]})")
        if self.lengthscale <= 0:
            raise ValueError("lengthscale must be positive")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "offsets", b)

    @classmethod
    def rbf_grid(cls, env: EnvSpec, n_stats: int, n_features: int = 25, monotone: bool = True) -> "StatFn":
        """Zero-weight expansion on a uniform 1-D grid with lengthscale twice the spacing."""
        if env.dim != 1:
            raise ValueError("grid bases are built for 1-D states")
        centers = np.linspace(env.state_lo[0], env.state_hi[0], n_features)
        spacing = centers[1] - centers[0] if n_features > 1 else env.state_hi[0] - env.state_lo[0]
        return cls(centers[:, None], 2.0 * spacing, np.zeros((n_stats, n_features)), np.zeros(n_stats), monotone)

    @property
    def n_stats(self) -> int:
        return self.offsets.size

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def features(self, xs) -> Array:
        """Basis values at states ``(S, d)``, shape ``(S, J)``."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        diff = xs[:, None, :] - self.centers[None, :, :]
        return np.exp(-0.5 * np.sum(diff * diff, axis=-1) / self.lengthscale**2)

    def predict(self, xs) -> Array:
        """Statistics at states ``(S, d)``, shape ``(S, N)``, projected if ``monotone``."""
        raw = self.features(xs) @ self.weights.T + self.offsets
        if self.monotone:
            raw = np.array([isotonic_project(row) for row in raw])
        return raw

    def evaluate(self, x) -> tuple[Array, Array, Array]:
        """``(s, J_x s, Hess_x s_k)`` at a single state, shapes ``(N,)``, ``(N, d)``, ``(N, d, d)``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        ell2 = self.lengthscale**2
        diff = x[None, :] - self.centers  # (J, d)
        phi = np.exp(-0.5 * np.sum(diff * diff, axis=-1) / ell2)
        dphi = -diff / ell2 * phi[:, None]
        d2phi = (diff[:, :, None] * diff[:, None, :] / ell2**2 - np.eye(self.dim) / ell2) * phi[:, None, None]
        s = self.weights @ phi + self.offsets
        jac = self.weights @ dphi
        hess = np.einsum("kj,jab->kab", self.weights, d2phi)
        if self.monotone:
            blocks = pav_blocks(s)
            if len(blocks) < s.size:
                s, jac, hess = _pool(s, blocks), _pool(jac, blocks), _pool(hess, blocks)
        return s, jac, hess

    # flat parameter vector (weights then offsets) for coefficient-space descent
    def params(self) -> Array:
        return np.concatenate([self.weights.ravel(), self.offsets])

    def with_params(self, theta) -> "StatFn":
        nw = self.weights.size
        theta = np.asarray(theta, dtype=float)
        return replace(self, weights=theta[:nw].reshape(self.weights.shape), offsets=theta[nw:])

    def to_json(self) -> str:
        return json.dumps(
            {
                "centers": self.centers.tolist(),
                "lengthscale": self.lengthscale,
                "weights": self.weights.tolist(),
                "offsets": self.offsets.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str, monotone: bool = True) -> "StatFn":
        obj = json.loads(text)
        return cls(np.asarray(obj["centers"]), float(obj["lengthscale"]), np.asarray(obj["weights"]), np.asarray(obj["offsets"]), monotone)


@dataclass(frozen=True)
class AffineStatFn:
    """``s(x) = A x + b``; exact fixtures such as Gaussian stats of the OU return."""

    slope: Array
    intercept: Array

    def evaluate(self, x):
        a = np.atleast_2d(np.asarray(self.slope, dtype=float))
        b = np.atleast_1d(np.asarray(self.intercept, dtype=float))
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return a @ x + b, a, np.zeros(a.shape + (a.shape[1],))


# --- fitting ---------------------------------------------------------------


@dataclass
class FitReport:
    quantile_residuals: Array
    max_kolmogorov: float
    condition: float
    iterations: int = 0
    weak_loss: Optional[float] = None


def fit_quantile_targets(sf0: StatFn, states, targets, ridge: float = 1e-6) -> tuple[StatFn, float]:
    """Ridge least squares of the basis expansion onto ``targets`` ``(S, N)``.

    Offsets absorb the target means and are not penalised. Returns the fitted
    function and the condition number of the regularised normal matrix.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    targets = np.asarray(targets, dtype=float)
    phi = sf0.features(states)
    if states.shape[0] < phi.shape[1]:
        raise FitError(f"need at least {phi.shape[1]} anchor states, got {states.shape[0]}")
    phi_mean, t_mean = phi.mean(axis=0), targets.mean(axis=0)
    pc, tc = phi - phi_mean, targets - t_mean
    gram = pc.T @ pc + ridge * np.eye(phi.shape[1])
    cond = float(np.linalg.cond(gram))
    if not cond <= MAX_CONDITION:
        raise FitError(f"normal equations are ill-conditioned (condition {cond:.3g})")
    w = np.linalg.solve(gram, pc.T @ tc).T
    return replace(sf0, weights=w, offsets=t_mean - w @ phi_mean), cond


def anchor_states(env: EnvSpec, n: int) -> Array:
    return np.linspace(env.state_lo[0], env.state_hi[0], n)[:, None]


def fit_quantiles_from_samples(
    sf0: StatFn, states, samples, n_stats: int, ridge: float = 1e-6
) -> tuple[StatFn, FitReport]:
    """Fit midpoint quantiles of sorted return ``samples`` ``(S, n)`` observed at ``states``."""
    targets = sorted_quantiles(samples, n_stats)
    base = replace(sf0, weights=np.zeros((n_stats, sf0.weights.shape[1])), offsets=np.zeros(n_stats))
    sf, cond = fit_quantile_targets(base, states, targets, ridge)
    pred = sf.predict(states)
    n = samples.shape[1]
    ks = max(
        kolmogorov_distance(quantile_impute(p), StepCDF(row, np.full(n, 1.0 / n)), row)
        for p, row in zip(pred, samples)
    )
    return sf, FitReport(targets - pred, float(ks), cond)


def fit_quantiles_mc(
    env: EnvSpec,
    states,
    n_stats: int,
    sim: SimConfig,
    ridge: float = 1e-6,
    n_features: int = 25,
) -> tuple[StatFn, FitReport]:
    """Simulate returns from every anchor state and fit their midpoint quantiles."""
    if n_stats < 1:
        raise ValueError("need at least one statistic")
    states = np.atleast_2d(np.asarray(states, dtype=float))
    samples = mc_returns(env, states, sim)
    return fit_quantiles_from_samples(StatFn.rbf_grid(env, n_stats, n_features), states, samples, n_stats, ridge)


# --- descent on the weak loss ------------------------------------------------


@dataclass
class DescentOptions:
    step: float
    iters: int
    probe_states: Array
    bandwidth: float
    fd_step: float = 1e-6


@dataclass
class DescentTrace:
    loss: list = field(default_factory=list)
    best: list = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "loss", "best"])
            for i, (a, b) in enumerate(zip(self.loss, self.best)):
                w.writerow([i, repr(a), repr(b)])


class NonFiniteLoss(FloatingPointError):
    def __init__(self, iteration: int, params: Array):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration
        self.params = params


def mean_weak_loss(env: EnvSpec, sf, fam: TestFunctionFamily, probes, bandwidth: float) -> float:
    imp = QuantileImputation(bandwidth)
    return float(np.mean([shjb_weak(env, sf, imp, x, fam) for x in np.atleast_2d(probes)]))


def minimize_shjb(env: EnvSpec, sf0: StatFn, fam: TestFunctionFamily, opt: DescentOptions) -> tuple[StatFn, DescentTrace]:
    """Fixed-step gradient descent on the probe-averaged weak loss.

    Gradients are central finite differences in coefficient space. Returns
    the best iterate seen and the per-iteration trace.
    """
    if opt.step < 0:
        raise ValueError("step must be nonnegative")

    def loss_at(theta):
        return mean_weak_loss(env, sf0.with_params(theta), fam, opt.probe_states, opt.bandwidth)

    theta = sf0.params()
    best_theta, best = theta.copy(), math.inf
    trace = DescentTrace()
    for it in range(opt.iters + 1):
        f = loss_at(theta)
        if not math.isfinite(f):
            raise NonFiniteLoss(it, theta)
        if f < best:
            best, best_theta = f, theta.copy()
        trace.loss.append(f)
        trace.best.append(best)
        if it == opt.iters or opt.step == 0:
            continue
        grad = np.empty_like(theta)
        for p in range(theta.size):
            e = np.zeros_like(theta)
            e[p] = opt.fd_step
            grad[p] = (loss_at(theta + e) - loss_at(theta - e)) / (2 * opt.fd_step)
        theta = theta - opt.step * grad
    return sf0.with_params(best_theta), trace
