"""Euler-Maruyama simulation of discounted returns and Monte Carlo return oracles.

Noise comes from Philox streams keyed by ``(seed, path_index // GROUP)``;
each stream always draws ``GROUP`` columns per time step, so the noise seen
by a path is a pure function of ``(seed, path_index, step)``. It does not
depend on ``n_paths``, block sizes, time chunking, or the start state.
Simulating several start states with one config therefore uses common
random numbers across states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .envlib import EnvSpec, return_bounds

Array = np.ndarray


class SimulationAborted(RuntimeError):
    """Raised when at least one path produced a non-finite state."""

    def __init__(self, n_aborted: int, n_total: int):
        super().__init__(f"{n_aborted} of {n_total} paths produced non-finite states")
        self.n_aborted = n_aborted
        self.n_total = n_total


@dataclass(frozen=True)
class SimConfig:
    dt: float
    horizon: float
    n_paths: int
    seed: int = 0
    # absolute bound on the discarded tail; None means 1e-4 * return-interval width
    tail_tol: Optional[float] = None

    def __post_init__(self):
        if self.dt <= 0 or self.horizon <= 0:
            raise ValueError("dt and horizon must be positive")
        if self.dt > self.horizon:
            raise ValueError("dt must not exceed the horizon")
        if self.n_paths < 1:
            raise ValueError("n_paths must be at least 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def n_steps(self) -> int:
        """Number of left-Riemann nodes ``k * dt < horizon``."""
        return int(math.ceil(self.horizon / self.dt - 1e-9))

    def tail_bound(self, env: EnvSpec) -> float:
        return env.r_abs_max * env.discount**self.horizon / -math.log(env.discount)

    def check(self, env: EnvSpec) -> None:
        tol = self.tail_tol
        if tol is None:
            tol = 1e-4 * return_bounds(env).nondegenerate().width
        bound = self.tail_bound(env)
        if bound > tol:
            raise ValueError(
                f"horizon {self.horizon} leaves a discounted tail of {bound:.3g} > {tol:.3g}"
            )

    @classmethod
    def for_env(cls, env: EnvSpec, dt: float, n_paths: int, seed: int = 0, tail_frac: float = 1e-4) -> "SimConfig":
        """Shortest horizon (on the dt grid) whose tail is within ``tail_frac`` of the interval width."""
        tol = tail_frac * return_bounds(env).nondegenerate().width
        beta = -math.log(env.discount)
        if env.r_abs_max == 0.0:
            horizon = dt
        else:
            horizon = max(dt, math.log(env.r_abs_max / (beta * tol)) / beta)
        horizon = dt * math.ceil(horizon / dt)
        return cls(dt=dt, horizon=horizon, n_paths=n_paths, seed=seed, tail_tol=tol)


GROUP = 256
_MAX_STATE_ELEMS = 1 << 18
_MAX_NOISE_ELEMS = 1 << 22


def path_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=(int(seed) << 64) | int(stream)))


def euler_maruyama_step(env: EnvSpec, x: Array, dt: float, noise: Array) -> Array:
    """One step ``x + mu(x) dt + sigma(x) noise sqrt(dt)``, clamped to the state box.

    ``x`` has shape ``(..., d)`` and ``noise`` shape ``(..., m)``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    sig = env.diffusion(x)
    if sig.shape[-1] == 1:
        shock = sig[..., 0] * noise
    else:
        shock = np.einsum("...ij,...j->...i", sig, noise)
    # clip propagates NaN, so blow-ups stay visible to the caller
    return env.clamp(x + env.drift(x) * dt + shock * math.sqrt(dt))


def _simulate_block(env: EnvSpec, x0: Array, cfg: SimConfig, first_group: int, n_groups: int) -> Array:
    """Returns for start states ``x0`` ``(S, d)`` over paths of ``n_groups`` whole groups."""
    m = env.noise_dim
    n_paths = n_groups * GROUP
    rngs = [path_rng(cfg.seed, first_group + g) for g in range(n_groups)]
    x = np.broadcast_to(x0[:, None, :], (x0.shape[0], n_paths, env.dim)).copy()
    g = np.zeros(x.shape[:2])
    disc_step = env.discount**cfg.dt
    disc = 1.0
    n_moves = cfg.n_steps - 1
    chunk = max(1, _MAX_NOISE_ELEMS // (n_paths * m))
    g += (disc * cfg.dt) * env.reward(x)
    for k0 in range(0, n_moves, chunk):
        k1 = min(k0 + chunk, n_moves)
        noise = np.concatenate([r.standard_normal((k1 - k0, GROUP, m)) for r in rngs], axis=1)
        for k in range(k1 - k0):
            x = euler_maruyama_step(env, x, cfg.dt, noise[k])
            disc *= disc_step
            g += (disc * cfg.dt) * env.reward(x)
    g[~np.isfinite(g)] = np.nan
    return g


def sample_return(env: EnvSpec, x0, cfg: SimConfig, rng: np.random.Generator) -> float:
    """Left-Riemann estimate of the discounted return of one path driven by ``rng``."""
    x = np.atleast_1d(np.asarray(x0, dtype=float))
    g, disc, disc_step = 0.0, 1.0, env.discount**cfg.dt
    for k in range(cfg.n_steps):
        if k:
            x = euler_maruyama_step(env, x, cfg.dt, rng.standard_normal(env.noise_dim))
            disc *= disc_step
        g += disc * cfg.dt * float(env.reward(x))
    if not np.isfinite(g):
        raise SimulationAborted(1, 1)
    return g


def mc_returns(env: EnvSpec, states, cfg: SimConfig, max_groups: Optional[int] = None) -> Array:
    """Sorted return samples of shape ``(S, n_paths)`` for start states ``(S, d)``.

    ``max_groups`` caps how many path groups are simulated at once; it only
    affects memory and speed, never the samples.
    """
    cfg.check(env)
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if states.shape[1] != env.dim:
        raise ValueError(f"states must have shape (S, {env.dim})")
    total_groups = -(-cfg.n_paths // GROUP)
    per_block = max(1, _MAX_STATE_ELEMS // (GROUP * states.shape[0]))
    if max_groups is not None:
        per_block = min(per_block, max_groups)
    out = np.empty((states.shape[0], total_groups * GROUP))
    for g0 in range(0, total_groups, per_block):
        n = min(per_block, total_groups - g0)
        out[:, g0 * GROUP : (g0 + n) * GROUP] = _simulate_block(env, states, cfg, g0, n)
    out = out[:, : cfg.n_paths]
    n_bad = int(np.isnan(out).any(axis=0).sum())
    if n_bad:
        raise SimulationAborted(n_bad, cfg.n_paths)
    out.sort(axis=1)
    return out


@dataclass(frozen=True)
class EmpiricalReturnDist:
    samples: Array
    origin_state: Array

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 1 or s.size == 0:
            raise ValueError("samples must be a nonempty 1-D array")
        if np.any(np.diff(s) < 0):
            s = np.sort(s)
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "origin_state", np.atleast_1d(np.asarray(self.origin_state, dtype=float)))

    @property
    def n(self) -> int:
        return self.samples.size

    def mean(self) -> float:
        return float(self.samples.mean())

    def std_error(self) -> float:
        if self.n < 2:
            return 0.0
        return float(self.samples.std(ddof=1) / math.sqrt(self.n))


def mc_return_distribution(env: EnvSpec, x0, cfg: SimConfig) -> EmpiricalReturnDist:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    samples = mc_returns(env, x0[None, :], cfg)[0]
    return EmpiricalReturnDist(samples, x0)


def empirical_cdf(d: EmpiricalReturnDist, z):
    """Fraction of samples ``<= z`` (right-continuous)."""
    return np.searchsorted(d.samples, z, side="right") / d.n


def empirical_quantiles(d: EmpiricalReturnDist | Array, n_stats: int) -> Array:
    """Smallest samples whose ECDF reaches the midpoint levels ``(2i-1)/(2N)``."""
    samples = d.samples if isinstance(d, EmpiricalReturnDist) else np.sort(np.asarray(d, dtype=float))
    return sorted_quantiles(samples, n_stats)


def sorted_quantiles(samples: Array, n_stats: int) -> Array:
    """Midpoint quantiles along the last axis of already-sorted ``samples``."""
    if n_stats < 1:
        raise ValueError("need at least one statistic")
    n = samples.shape[-1]
    if n == 0:
        raise ValueError("no samples")
    i = np.arange(1, n_stats + 1)
    # exact integer form of ceil(n (2i-1) / 2N) - 1
    idx = ((2 * i - 1) * n + 2 * n_stats - 1) // (2 * n_stats) - 1
    return samples[..., idx]
