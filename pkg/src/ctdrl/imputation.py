"""Imputation strategies: maps from finite statistics to return distributions.

Three strategies are provided. The quantile strategy places ``N`` equal atoms
at the statistics; its CDF is a step function, so derivatives in ``z`` and in
the statistics are taken on a Gaussian-mollified version of it. The
categorical and Gaussian strategies are the other two textbook examples.

CDFs are plain callables ``z -> F(z)``. Step CDFs additionally expose
``atoms`` and ``left(z)`` so distances can look at both one-sided limits.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

from .envlib import ReturnInterval
from .quadrature import REFINE_TOL, breakpoints, integrate

Array = np.ndarray

STAT_KINDS = ("quantile", "categorical_probs", "gaussian_params")
_SQRT_2PI = math.sqrt(2.0 * math.pi)


def normal_pdf(u):
    return np.exp(-0.5 * np.square(u)) / _SQRT_2PI


@dataclass(frozen=True)
class StatVec:
    values: Array
    kind: str = "quantile"

    def __post_init__(self):
        if self.kind not in STAT_KINDS:
            raise ValueError(f"unknown statistics kind {self.kind!r}")
        v = np.atleast_1d(np.asarray(self.values, dtype=float))
        if v.ndim != 1 or v.size == 0:
            raise ValueError("statistics must be a nonempty vector")
        if self.kind == "quantile" and np.any(np.diff(v) < 0):
            raise ValueError("quantile statistics must be nondecreasing")
        if self.kind == "categorical_probs":
            if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-12:
                raise ValueError("categorical probabilities must lie in the simplex")
        if self.kind == "gaussian_params" and (v.size != 2 or v[1] < 0):
            raise ValueError("gaussian statistics are (mean, variance >= 0)")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size

    def check_inside(self, interval: ReturnInterval, slack: float = 0.0) -> None:
        if self.kind != "quantile":
            return
        if self.values[0] < interval.v_min - slack or self.values[-1] > interval.v_max + slack:
            raise ValueError("quantile statistics fall outside the return interval")

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "values": self.values.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "StatVec":
        obj = json.loads(text)
        return cls(np.asarray(obj["values"], dtype=float), obj["kind"])


class StepCDF:
    """Right-continuous CDF of a finite discrete measure."""

    def __init__(self, locations, masses):
        loc = np.atleast_1d(np.asarray(locations, dtype=float))
        mass = np.atleast_1d(np.asarray(masses, dtype=float))
        if loc.shape != mass.shape:
            raise ValueError("locations and masses must match")
        order = np.argsort(loc, kind="stable")
        self.locations = loc[order]
        self.masses = mass[order]
        self._cum = np.concatenate([[0.0], np.cumsum(self.masses)])

    @property
    def atoms(self) -> Array:
        return np.unique(self.locations)

    def __call__(self, z):
        return self._cum[np.searchsorted(self.locations, z, side="right")]

    def left(self, z):
        return self._cum[np.searchsorted(self.locations, z, side="left")]

    def mean(self) -> float:
        return float(self.locations @ self.masses)


class GaussianCDF:
    def __init__(self, mu: float, sigma2: float):
        self.mu = float(mu)
        self.sigma = math.sqrt(sigma2)

    def __call__(self, z):
        return special.ndtr((np.asarray(z, dtype=float) - self.mu) / self.sigma)


def quantile_cdf_exact(s, z):
    """``(1/N) #{i : z >= s_i}``."""
    s = np.asarray(s.values if isinstance(s, StatVec) else s, dtype=float)
    return np.searchsorted(np.sort(s), z, side="right") / s.size


def quantile_impute(s) -> StepCDF:
    s = np.asarray(s.values if isinstance(s, StatVec) else s, dtype=float)
    return StepCDF(s, np.full(s.size, 1.0 / s.size))


def categorical_impute(p, support) -> StepCDF:
    p = p if isinstance(p, StatVec) else StatVec(p, "categorical_probs")
    if p.kind != "categorical_probs":
        raise ValueError("expected categorical probabilities")
    support = np.asarray(support, dtype=float)
    if support.shape != p.values.shape:
        raise ValueError("support and probabilities must have equal length")
    if np.any(np.diff(support) < 0):
        raise ValueError("support must be sorted")
    return StepCDF(support, p.values)


def gaussian_impute(mu: float, sigma2: float):
    if sigma2 < 0:
        raise ValueError("variance must be nonnegative")
    if sigma2 == 0:
        return StepCDF([mu], [1.0])
    return GaussianCDF(mu, sigma2)


# --- mollified quantile imputation -------------------------------------------


def default_bandwidth(interval: ReturnInterval, n_stats: int) -> float:
    """``0.5 * width / N``; deterministic returns get ``1e-3 * max(|v|, 1)``."""
    h = 0.5 * interval.width / n_stats
    if h > 0:
        return h
    return 1e-3 * max(abs(interval.v_min), 1.0)


def mollified_cdf(s, z, h: float):
    """``(1/N) sum_i Normal_cdf((z - s_i) / h)``."""
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    s = np.asarray(s, dtype=float)
    u = (np.asarray(z, dtype=float)[..., None] - s) / h
    return special.ndtr(u).mean(axis=-1)


def mollified_grads(s, z, h: float):
    """Derivatives of :func:`mollified_cdf` in ``z`` and in each statistic.

    Returns ``(dz, ds, ds2_diag)`` with shapes ``z.shape``, ``z.shape + (N,)``
    and ``z.shape + (N,)``. Mixed second derivatives in the statistics are
    identically zero since each atom depends on one statistic.
    """
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    s = np.asarray(s, dtype=float)
    n = s.size
    u = (np.asarray(z, dtype=float)[..., None] - s) / h
    k = normal_pdf(u)
    ds = -k / (n * h)
    ds2 = -u * k / (n * h * h)
    return -ds.sum(axis=-1), ds, ds2


@dataclass(frozen=True)
class QuantileImputation:
    """Mollified quantile strategy; statistics are the atom locations."""

    bandwidth: float

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")

    def cdf(self, s, z):
        return mollified_cdf(s, z, self.bandwidth)

    def grads(self, s, z):
        return mollified_grads(s, z, self.bandwidth)

    def exact(self, s) -> StepCDF:
        return quantile_impute(s)

    def refine_points(self, s) -> Array:
        """z-locations around which the integrands vary fastest."""
        offsets = self.bandwidth * np.array([-8, -4, -2, -1, 0, 1, 2, 4, 8], dtype=float)
        return (np.asarray(s, dtype=float)[:, None] + offsets).ravel()


@dataclass(frozen=True)
class GaussianImputation:
    """Gaussian strategy with statistics ``(mean, variance)``; smooth, full Hessian."""

    @staticmethod
    def _params(s) -> tuple[float, float]:
        s = np.asarray(s, dtype=float)
        if s.shape != (2,):
            raise ValueError(f"Gaussian statistics are (mean, variance), got shape {s.shape}")
        if s[1] <= 0:
            raise ValueError("variance must be positive")
        return float(s[0]), float(s[1])

    def cdf(self, s, z):
        mu, var = self._params(s)
        return special.ndtr((np.asarray(z, dtype=float) - mu) / math.sqrt(var))

    def grads(self, s, z):
        mu, var = self._params(s)
        sd = math.sqrt(var)
        u = (np.asarray(z, dtype=float) - mu) / sd
        k = normal_pdf(u)
        dz = k / sd
        ds = np.stack([-k / sd, -u * k / (2 * var)], axis=-1)
        d_mm = -u * k / var
        d_mv = k * (1 - u * u) / (2 * var * sd)
        d_vv = u * k * (3 - u * u) / (4 * var * var)
        ds2 = np.stack([np.stack([d_mm, d_mv], -1), np.stack([d_mv, d_vv], -1)], -2)
        return dz, ds, ds2

    def exact(self, s):
        return gaussian_impute(s[0], s[1])

    def refine_points(self, s) -> Array:
        sd = math.sqrt(float(s[1]))
        return float(s[0]) + sd * np.array([-8, -4, -2, -1, 0, 1, 2, 4, 8], dtype=float)


# --- test functions and distances -------------------------------------------


@dataclass(frozen=True)
class TestFunctionFamily:
    """Gaussian bumps ``exp(-(z - c)^2 / (2 w^2))`` on a return window ``[lo, hi]``.

    A finite stand-in for the unit ball of rapidly decaying smooth functions;
    weak norms measured against it lower-bound the true dual norm.
    """

    __test__ = False  # not a pytest class

    centers: Array
    widths: Array
    lo: float
    hi: float

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.centers, dtype=float))
        w = np.broadcast_to(np.asarray(self.widths, dtype=float), c.shape).copy()
        if np.any(w <= 0):
            raise ValueError("widths must be positive")
        if not self.lo < self.hi:
            raise ValueError("empty window")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "widths", w)

    @classmethod
    def default(cls, interval: ReturnInterval, n: int = 17) -> "TestFunctionFamily":
        iv = interval.nondegenerate()
        return cls(np.linspace(iv.v_min, iv.v_max, n), np.full(n, iv.width / 8), iv.v_min, iv.v_max)

    def __len__(self):
        return self.centers.size

    def __call__(self, z) -> Array:
        """Member values, shape ``(len(self),) + z.shape``."""
        z = np.asarray(z, dtype=float)
        c = self.centers.reshape((-1,) + (1,) * z.ndim)
        w = self.widths.reshape((-1,) + (1,) * z.ndim)
        return np.exp(-0.5 * np.square((z - c) / w))

    def breakpoints(self, extra=(), n_panels: int = 32) -> Array:
        return breakpoints(self.lo, self.hi, n_panels, extra)

    def integrals(self) -> Array:
        """``int_lo^hi phi_j(z) dz`` for every member, by quadrature."""
        return integrate(self, self.breakpoints())

    def mass_bound(self) -> float:
        """``M = max_j int phi_j``: the constant in the ``M / (2N)`` weak bound."""
        return float(np.max(self.integrals()))


def _atoms(F) -> Array:
    return np.asarray(getattr(F, "atoms", ()), dtype=float)


def _left(F, z):
    fn = getattr(F, "left", None)
    return F(z) if fn is None else fn(z)


def kolmogorov_distance(F1, F2, grid) -> float:
    """``max |F1 - F2|`` over ``grid`` and both one-sided limits at every step of either CDF."""
    grid = np.asarray(grid, dtype=float)
    atoms = np.concatenate([_atoms(F1), _atoms(F2)])
    pts = np.unique(np.concatenate([grid, atoms]))
    d = np.max(np.abs(F1(pts) - F2(pts)))
    if atoms.size:
        d = max(d, np.max(np.abs(_left(F1, atoms) - _left(F2, atoms))))
    return float(d)


def weak_pairings(F1, F2, fam: TestFunctionFamily, strict: bool = False, tol: float = REFINE_TOL) -> Array:
    """``int (F1 - F2) phi_j dz`` over the family window, one entry per member."""
    breaks = fam.breakpoints(np.concatenate([_atoms(F1), _atoms(F2)]))
    return integrate(lambda z: (F1(z) - F2(z)) * fam(z), breaks, tol=tol, strict=strict)


def weak_distance(F1, F2, fam: TestFunctionFamily, strict: bool = False) -> float:
    """``max_j |int (F1 - F2) phi_j dz|``."""
    return float(np.max(np.abs(weak_pairings(F1, F2, fam, strict=strict))))


def write_cdf_csv(path: str | Path, z, values) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["z", "F"])
        for zi, fi in zip(np.asarray(z, dtype=float), np.asarray(values, dtype=float)):
            w.writerow([repr(float(zi)), repr(float(fi))])


def read_cdf_csv(path: str | Path) -> tuple[Array, Array]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1]
