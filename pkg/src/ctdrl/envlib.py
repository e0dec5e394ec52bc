"""Fixed-policy diffusion environments and their closed-form baselines.

All callables on :class:`EnvSpec` are vectorised over a leading batch axis:
``drift(x)`` maps ``(..., d) -> (..., d)``, ``diffusion(x)`` maps
``(..., d) -> (..., d, m)`` and ``reward(x)`` maps ``(..., d) -> (...)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import special

Array = np.ndarray


@dataclass(frozen=True)
class ReturnInterval:
    v_min: float
    v_max: float

    def __post_init__(self):
        if not self.v_min <= self.v_max:
            raise ValueError(f"empty return interval [{self.v_min}, {self.v_max}]")

    @property
    def width(self) -> float:
        return self.v_max - self.v_min

    def nondegenerate(self) -> "ReturnInterval":
        """Interval used for z-quadrature and test-function placement.

        A degenerate interval (deterministic returns) has no scale of its own;
        it is widened to ``v +- max(|v|, 1)``.
        """
        scale = max(abs(self.v_min), abs(self.v_max), 1.0)
        if self.width > 1e-12 * scale:
            return self
        v = 0.5 * (self.v_min + self.v_max)
        rho = max(abs(v), 1.0)
        return ReturnInterval(v - rho, v + rho)


@dataclass(frozen=True)
class EnvSpec:
    """Continuous-time dynamics of a fixed policy.

    ``reward_bounds`` is stored rather than searched for, since every bundled
    environment knows its reward range in closed form.
    """

    dim: int
    drift: Callable[[Array], Array]
    diffusion: Callable[[Array], Array]
    reward: Callable[[Array], Array]
    discount: float
    state_lo: Array
    state_hi: Array
    reward_bounds: tuple[float, float]
    noise_dim: int = 1
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.discount < 1.0:
            raise ValueError(f"discount must lie in (0, 1), got {self.discount}")
        lo = np.atleast_1d(np.asarray(self.state_lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.state_hi, dtype=float))
        if lo.shape != (self.dim,) or hi.shape != (self.dim,):
            raise ValueError("state bounds must have shape (dim,)")
        if np.any(lo > hi):
            raise ValueError("state_lo must not exceed state_hi")
        r_lo, r_hi = self.reward_bounds
        if not (np.isfinite(r_lo) and np.isfinite(r_hi) and r_lo <= r_hi):
            raise ValueError(f"reward bounds must be finite and ordered, got {self.reward_bounds}")
        object.__setattr__(self, "state_lo", lo)
        object.__setattr__(self, "state_hi", hi)

    @property
    def log_discount(self) -> float:
        return math.log(self.discount)

    @property
    def r_abs_max(self) -> float:
        return max(abs(self.reward_bounds[0]), abs(self.reward_bounds[1]))

    def clamp(self, x: Array) -> Array:
        return np.clip(x, self.state_lo, self.state_hi)


@dataclass(frozen=True)
class AnalyticBaseline:
    value: Optional[Callable[[Array], Array]] = None
    value_grad: Optional[Callable[[Array], Array]] = None
    value_hess: Optional[Callable[[Array], Array]] = None
    return_cdf: Optional[Callable[[Array, Array], Array]] = None
    return_quantile: Optional[Callable[[Array, Array], Array]] = None
    # zero for point-mass returns
    return_std: Optional[float] = None


def return_bounds(env: EnvSpec) -> ReturnInterval:
    """``[r_min, r_max] / ln(1/gamma)``: the integral of ``gamma**t`` over ``[0, inf)``."""
    if not 0.0 < env.discount < 1.0:
        raise ValueError(f"discount must lie in (0, 1), got {env.discount}")
    horizon_mass = 1.0 / -math.log(env.discount)
    r_lo, r_hi = env.reward_bounds
    return ReturnInterval(r_lo * horizon_mass, r_hi * horizon_mass)


def _check_gamma(gamma: float) -> None:
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"discount must lie in (0, 1), got {gamma}")


def make_const_env(
    c: float,
    gamma: float,
    state_lo: float = -1.0,
    state_hi: float = 1.0,
) -> tuple[EnvSpec, AnalyticBaseline]:
    """Frozen dynamics with constant reward ``c``; every return equals ``c / ln(1/gamma)``."""
    _check_gamma(gamma)
    c = float(c)
    v = c / -math.log(gamma)

    env = EnvSpec(
        dim=1,
        drift=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        diffusion=lambda x: np.zeros(np.shape(x) + (1,)),
        reward=lambda x: np.full(np.shape(x)[:-1], c),
        discount=gamma,
        state_lo=np.array([state_lo]),
        state_hi=np.array([state_hi]),
        reward_bounds=(c, c),
        name="const",
        params={"c": c, "gamma": gamma, "state_lo": state_lo, "state_hi": state_hi},
    )

    def value(x):
        return np.full(np.shape(x)[:-1], v)

    def cdf(x, z):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(z))
        return np.broadcast_to(np.asarray(z, dtype=float) >= v, shape).astype(float)

    def quantile(x, tau):
        return np.full(np.broadcast_shapes(np.shape(x)[:-1], np.shape(tau)), v)

    baseline = AnalyticBaseline(
        value=value,
        value_grad=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        value_hess=lambda x: np.zeros(np.shape(x) + (1,)),
        return_cdf=cdf,
        return_quantile=quantile,
        return_std=0.0,
    )
    return env, baseline


def ou_default_box(theta: float, sigma0: float) -> tuple[float, float]:
    half = 3.0 * sigma0 / math.sqrt(2.0 * theta) + 1.0
    return -half, half


def ou_return_variance(theta: float, sigma0: float, gamma: float) -> float:
    """Variance of the discounted return of ``dX = -theta X dt + sigma0 dB``.

    The centred return is ``sigma0 / (theta + beta) * int exp(-beta u) dB_u``
    with ``beta = ln(1/gamma)``, whose variance does not depend on the start.
    """
    beta = -math.log(gamma)
    return sigma0**2 / (2.0 * beta * (theta + beta) ** 2)


def make_ou_env(
    theta: float,
    sigma0: float,
    gamma: float,
    state_lo: Optional[float] = None,
    state_hi: Optional[float] = None,
) -> tuple[EnvSpec, AnalyticBaseline]:
    """Mean-reverting 1-D diffusion with reward ``r(x) = x`` clipped to the box.

    The baseline ignores clipping; the default box keeps three stationary
    standard deviations plus one unit of margin inside it.
    """
    if theta <= 0:
        raise ValueError(f"theta must be positive, got {theta}")
    if sigma0 < 0:
        raise ValueError(f"sigma0 must be nonnegative, got {sigma0}")
    _check_gamma(gamma)
    lo_default, hi_default = ou_default_box(theta, sigma0)
    lo = lo_default if state_lo is None else float(state_lo)
    hi = hi_default if state_hi is None else float(state_hi)
    theta, sigma0 = float(theta), float(sigma0)

    def reward(x):
        return np.clip(np.asarray(x, dtype=float)[..., 0], lo, hi)

    env = EnvSpec(
        dim=1,
        drift=lambda x: -theta * np.asarray(x, dtype=float),
        diffusion=lambda x: np.full(np.shape(x) + (1,), sigma0),
        reward=reward,
        discount=gamma,
        state_lo=np.array([lo]),
        state_hi=np.array([hi]),
        reward_bounds=(lo, hi),
        name="ou",
        params={"theta": theta, "sigma0": sigma0, "gamma": gamma, "state_lo": lo, "state_hi": hi},
    )

    slope = 1.0 / (theta - math.log(gamma))
    std = math.sqrt(ou_return_variance(theta, sigma0, gamma))

    def value(x):
        return slope * np.asarray(x, dtype=float)[..., 0]

    def cdf(x, z):
        mean = value(x)
        z = np.asarray(z, dtype=float)
        if std == 0.0:
            return (z >= mean).astype(float)
        return special.ndtr((z - mean) / std)

    def quantile(x, tau):
        return value(x) + std * special.ndtri(np.asarray(tau, dtype=float))

    baseline = AnalyticBaseline(
        value=value,
        value_grad=lambda x: np.full(np.shape(x), slope),
        value_hess=lambda x: np.zeros(np.shape(x) + (1,)),
        return_cdf=cdf,
        return_quantile=quantile,
        return_std=std,
    )
    return env, baseline


def env_from_config(cfg: dict) -> tuple[EnvSpec, AnalyticBaseline]:
    """Build an environment from ``{kind, theta, sigma0, gamma, c, state_lo, state_hi}``."""
    kind = cfg.get("kind")
    if kind == "const":
        return make_const_env(
            cfg["c"],
            cfg["gamma"],
            state_lo=cfg.get("state_lo", -1.0),
            state_hi=cfg.get("state_hi", 1.0),
        )
    if kind == "ou":
        return make_ou_env(
            cfg["theta"],
            cfg.get("sigma0", 0.0),
            cfg["gamma"],
            state_lo=cfg.get("state_lo"),
            state_hi=cfg.get("state_hi"),
        )
    raise ValueError(f"unknown environment kind {kind!r}")


def load_env(path: str | Path) -> tuple[EnvSpec, AnalyticBaseline]:
    with open(path) as fh:
        return env_from_config(json.load(fh))


def env_to_config(env: EnvSpec) -> dict:
    return {"kind": env.name, **env.params}


def probe_states(env: EnvSpec, n: int = 9) -> Array:
    """``n`` equally spaced interior states of the (1-D) box, shape ``(n, 1)``."""
    lo, hi = env.state_lo[0], env.state_hi[0]
    k = np.arange(1, n + 1)
    return (lo + k * (hi - lo) / (n + 1))[:, None]
