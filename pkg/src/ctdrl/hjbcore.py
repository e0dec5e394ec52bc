"""Residuals of the HJB, distributional HJB and statistical HJB equations.

The statistical residual is the distributional HJB operator applied to the
composite CDF ``(x, z) -> Phi(s(x), z)`` and expanded by the chain rule:

    drift      = grad_s Phi . J_x s . mu(x)
    advection  = -(r(x) + z log gamma) dPhi/dz
    diffusion  = 1/2 Tr(sigma^T (K_space + K_stat) sigma)

with ``K_space = sum_k dPhi/ds_k Hess_x s_k`` and
``K_stat = J_x s^T Hess_s Phi J_x s``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .envlib import EnvSpec
from .imputation import TestFunctionFamily
from .quadrature import REFINE_TOL, integrate

Array = np.ndarray


def _trace_form(sig: Array, mat: Array) -> Array:
    """``Tr(sig^T M sig)`` for ``sig`` of shape ``(d, m)`` and ``M`` of shape ``(..., d, d)``."""
    return np.einsum("im,...ij,jm->...", sig, mat, sig)


def hjb_residual(env: EnvSpec, value, grad, hess, x) -> Array:
    """``<grad V, mu> + log(gamma) V + r + 1/2 Tr(sigma^T Hess V sigma)`` at states ``x``.

    ``value``, ``grad`` and ``hess`` are callables on ``(..., d)`` arrays.
    """
    x = np.asarray(x, dtype=float)
    sig = env.diffusion(x)
    diff = 0.5 * np.einsum("...im,...ij,...jm->...", sig, hess(x), sig)
    drift = np.einsum("...i,...i->...", grad(x), env.drift(x))
    return drift + env.log_discount * value(x) + env.reward(x) + diff


@dataclass(frozen=True)
class GridCDF:
    x_grid: Array
    z_grid: Array
    values: Array

    def __post_init__(self):
        x = np.asarray(self.x_grid, dtype=float)
        z = np.asarray(self.z_grid, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if v.shape != (x.size, z.size):
            raise ValueError("values must have shape (len(x_grid), len(z_grid))")
        if np.any(np.diff(v, axis=1) < -1e-12):
            raise ValueError("grid CDF must be nondecreasing in z")
        for g in (x, z):
            step = np.diff(g)
            if g.size < 3 or np.any(step <= 0) or np.ptp(step) > 1e-9 * step.mean():
                raise ValueError("grids must be uniform, increasing, with at least 3 points")
        object.__setattr__(self, "x_grid", x)
        object.__setattr__(self, "z_grid", z)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, f, x_grid, z_grid) -> "GridCDF":
        """Tabulate ``f(x, z)`` where ``x`` has shape ``(nx, 1, 1)`` and ``z`` shape ``(1, nz)``."""
        x_grid = np.asarray(x_grid, dtype=float)
        z_grid = np.asarray(z_grid, dtype=float)
        vals = f(x_grid[:, None, None], z_grid[None, :])
        return cls(x_grid, z_grid, np.broadcast_to(vals, (x_grid.size, z_grid.size)))


def dhjb_residual_interior(env: EnvSpec, F: GridCDF) -> Array:
    """Central-difference DHJB residual at every interior node, shape ``(nx-2, nz-2)``."""
    if env.dim != 1:
        raise ValueError("grid residuals are implemented for 1-D states")
    v = F.values
    hx = F.x_grid[1] - F.x_grid[0]
    hz = F.z_grid[1] - F.z_grid[0]
    c = v[1:-1, 1:-1]
    f_x = (v[2:, 1:-1] - v[:-2, 1:-1]) / (2 * hx)
    f_xx = (v[2:, 1:-1] - 2 * c + v[:-2, 1:-1]) / hx**2
    f_z = (v[1:-1, 2:] - v[1:-1, :-2]) / (2 * hz)
    xs = F.x_grid[1:-1, None]
    z = F.z_grid[None, 1:-1]
    mu = env.drift(xs)[:, :1]
    sig = env.diffusion(xs)[:, 0, :]
    sig2 = np.sum(sig * sig, axis=-1, keepdims=True)
    r = env.reward(xs)[:, None]
    return f_x * mu - (r + z * env.log_discount) * f_z + 0.5 * sig2 * f_xx


def dhjb_residual_grid(env: EnvSpec, F: GridCDF, i: int, j: int) -> float:
    nx, nz = F.values.shape
    if not (1 <= i <= nx - 2 and 1 <= j <= nz - 2):
        raise IndexError(f"({i}, {j}) is not an interior grid node")
    sub = GridCDF(F.x_grid[i - 1 : i + 2], F.z_grid[j - 1 : j + 2], F.values[i - 1 : i + 2, j - 1 : j + 2])
    return float(dhjb_residual_interior(env, sub)[0, 0])


def dhjb_operator_exact(env: EnvSpec, f, f_x, f_xx, f_z, x, z) -> Array:
    """The DHJB operator from supplied analytic partials (1-D states)."""
    xs = np.asarray(x, dtype=float)[..., None]
    mu = env.drift(xs)[..., 0]
    sig = env.diffusion(xs)[..., 0, :]
    sig2 = np.sum(sig * sig, axis=-1)
    r = env.reward(xs)
    return f_x(x, z) * mu - (r + z * env.log_discount) * f_z(x, z) + 0.5 * sig2 * f_xx(x, z)


@dataclass(frozen=True)
class ShjbTerms:
    drift_term: Array
    advection_term: Array
    diffusion_term: Array

    @property
    def residual(self) -> Array:
        return self.drift_term + self.advection_term + self.diffusion_term

    @property
    def loss(self) -> Array:
        return np.square(self.residual)


def _stat_derivatives(sf, imp, x, z):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    s, jac, hess = sf.evaluate(x)
    n, d = jac.shape
    if s.shape != (n,) or hess.shape != (n, d, d) or x.shape != (d,):
        raise ValueError("statistics function output does not match the state dimension")
    dz, ds, ds2 = imp.grads(s, z)
    if ds.shape[-1] != n:
        raise ValueError(f"imputation returned {ds.shape[-1]} statistic derivatives, expected {n}")
    return x, s, jac, hess, dz, ds, ds2


def spatial_hessian(sf, imp, x, z) -> tuple[Array, Array]:
    """``(K_space, K_stat)``, each of shape ``z.shape + (d, d)``."""
    _, _, jac, hess, _, ds, ds2 = _stat_derivatives(sf, imp, x, z)
    k_space = np.einsum("...k,kij->...ij", ds, hess)
    if ds2.ndim == ds.ndim:
        k_stat = np.einsum("ki,...k,kj->...ij", jac, ds2, jac)
    else:
        k_stat = np.einsum("ki,...kl,lj->...ij", jac, ds2, jac)
    return k_space, k_stat


def shjb_pointwise(env: EnvSpec, sf, imp, x, z) -> ShjbTerms:
    """Chain-rule assembly of the statistical HJB residual at state ``x`` and returns ``z``.

    ``sf.evaluate(x)`` must return ``(s, J_x s, Hess_x s_k)`` and
    ``imp.grads(s, z)`` the ``z``- and statistics-derivatives of the CDF.
    """
    z = np.asarray(z, dtype=float)
    x, s, jac, hess, dz, ds, ds2 = _stat_derivatives(sf, imp, x, z)
    mu = env.drift(x)
    drift = np.einsum("...k,ki,i->...", ds, jac, mu)
    advection = -(float(env.reward(x)) + z * env.log_discount) * dz
    sig = env.diffusion(x)
    if not np.any(sig):
        diffusion = np.zeros_like(advection)
    else:
        k_space, k_stat = spatial_hessian(sf, imp, x, z)
        diffusion = 0.5 * _trace_form(sig, k_space + k_stat)
    return ShjbTerms(drift, advection, diffusion)


def shjb_fd_residual(env: EnvSpec, sf, imp, x, z, step_x: float, step_z: float) -> Array:
    """Statistical HJB residual from central differences of ``(x, z) -> Phi(s(x), z)``.

    Independent of the chain-rule expansion: only ``sf`` values and
    ``imp.cdf`` are used.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    z = np.asarray(z, dtype=float)
    d = x.size

    def comp(xx, zz):
        return imp.cdf(sf.evaluate(xx)[0], zz)

    f0 = comp(x, z)
    grad = np.empty(z.shape + (d,))
    hess = np.empty(z.shape + (d, d))
    eye = np.eye(d) * step_x
    for a in range(d):
        fp, fm = comp(x + eye[a], z), comp(x - eye[a], z)
        grad[..., a] = (fp - fm) / (2 * step_x)
        hess[..., a, a] = (fp - 2 * f0 + fm) / step_x**2
        for b in range(a + 1, d):
            fpp = comp(x + eye[a] + eye[b], z)
            fpm = comp(x + eye[a] - eye[b], z)
            fmp = comp(x - eye[a] + eye[b], z)
            fmm = comp(x - eye[a] - eye[b], z)
            hess[..., a, b] = hess[..., b, a] = (fpp - fpm - fmp + fmm) / (4 * step_x**2)
    f_z = (comp(x, z + step_z) - comp(x, z - step_z)) / (2 * step_z)
    sig = env.diffusion(x)
    return (
        grad @ env.drift(x)
        - (float(env.reward(x)) + z * env.log_discount) * f_z
        + 0.5 * _trace_form(sig, hess)
    )


def shjb_weak_pairings(env: EnvSpec, sf, imp, x, fam: TestFunctionFamily, strict: bool = False, tol: float = REFINE_TOL) -> Array:
    """``int residual(x, z) phi_j(z) dz`` over the family window, per member."""
    s = sf.evaluate(np.atleast_1d(np.asarray(x, dtype=float)))[0]
    breaks = fam.breakpoints(imp.refine_points(s))
    return integrate(lambda z: shjb_pointwise(env, sf, imp, x, z).residual * fam(z), breaks, tol=tol, strict=strict)


def shjb_weak(env: EnvSpec, sf, imp, x, fam: TestFunctionFamily, strict: bool = False) -> float:
    """Weak statistical HJB loss ``max_j (int residual phi_j dz)^2``."""
    return float(np.max(np.square(shjb_weak_pairings(env, sf, imp, x, fam, strict=strict))))


def mean_of_imputation(s) -> float:
    """Mean of the quantile-imputed measure, i.e. the average atom."""
    s = np.asarray(getattr(s, "values", s), dtype=float)
    if s.size == 0:
        raise ValueError("no statistics")
    return float(s.mean())


def write_residual_csv(path: str | Path, rows) -> None:
    """Rows of ``(x, z, ShjbTerms-scalar-view)`` as ``x,z,drift,advection,diffusion,residual``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "z", "drift_term", "advection_term", "diffusion_term", "residual"])
        for x, z, terms in rows:
            for zi, a, b, c, r in np.broadcast(z, terms.drift_term, terms.advection_term, terms.diffusion_term, terms.residual):
                w.writerow([repr(float(x)), repr(float(zi)), repr(float(a)), repr(float(b)), repr(float(c)), repr(float(r))])
