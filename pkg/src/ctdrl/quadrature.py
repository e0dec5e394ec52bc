"""Composite Gauss-Legendre quadrature with a refinement check."""

from __future__ import annotations

import warnings
from functools import lru_cache

import numpy as np

Array = np.ndarray

DEFAULT_ORDER = 10
REFINE_TOL = 1e-8


class QuadratureWarning(RuntimeWarning):
    pass


class QuadratureError(RuntimeError):
    pass


@lru_cache(maxsize=None)
def _gauss_legendre(order: int) -> tuple[Array, Array]:
    return np.polynomial.legendre.leggauss(order)


def panel_rule(breaks: Array, order: int = DEFAULT_ORDER) -> tuple[Array, Array]:
    """Nodes and weights of a Gauss-Legendre rule on each panel between sorted ``breaks``."""
    breaks = np.unique(np.asarray(breaks, dtype=float))
    a, b = breaks[:-1], breaks[1:]
    t, w = _gauss_legendre(order)
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    nodes = (mid[:, None] + half[:, None] * t[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def bisect_panels(breaks: Array) -> Array:
    breaks = np.unique(np.asarray(breaks, dtype=float))
    mids = 0.5 * (breaks[:-1] + breaks[1:])
    return np.sort(np.concatenate([breaks, mids]))


def breakpoints(lo: float, hi: float, n_panels: int, extra=()) -> Array:
    """Uniform panels on ``[lo, hi]`` plus any ``extra`` points falling inside."""
    base = np.linspace(lo, hi, n_panels + 1)
    extra = np.asarray(extra, dtype=float).ravel()
    extra = extra[(extra > lo) & (extra < hi)]
    return np.unique(np.concatenate([base, extra]))


def integrate(f, breaks: Array, order: int = DEFAULT_ORDER, tol: float = REFINE_TOL, strict: bool = False) -> Array:
    """Integrate ``f(nodes) -> (..., n_nodes)`` over the panels, checking one bisection.

    Returns the refined estimate. Disagreement beyond ``tol`` between the two
    rules warns (or raises when ``strict``).
    """
    nodes, weights = panel_rule(breaks, order)
    coarse = f(nodes) @ weights
    nodes, weights = panel_rule(bisect_panels(breaks), order)
    fine = f(nodes) @ weights
    gap = float(np.max(np.abs(fine - coarse))) if np.size(fine) else 0.0
    if gap > tol:
        msg = f"quadrature refinements disagree by {gap:.3g} (> {tol:.1g})"
        if strict:
            raise QuadratureError(msg)
        warnings.warn(msg, QuadratureWarning, stacklevel=2)
    return fine
