"""Shared random-probe oracles for the derivative and chain-rule checks."""

import math

import numpy as np

from ctdrl.envlib import EnvSpec, make_ou_env, return_bounds
from ctdrl.fitlearn import StatFn
from ctdrl.hjbcore import shjb_fd_residual, shjb_pointwise
from ctdrl.imputation import QuantileImputation, mollified_cdf, mollified_grads

BANDWIDTH = 0.05
FD_FRAC = 1e-4  # stencil spacing as a fraction of the box and return-interval widths


def coupled_2d_env() -> EnvSpec:
    """Linear 2-D diffusion with correlated noise, for full-Hessian checks."""
    a = np.array([[-1.0, 0.3], [-0.2, -0.5]])
    sig = np.array([[0.4, 0.1], [0.0, 0.3]])
    return EnvSpec(
        dim=2,
        drift=lambda x: x @ a.T,
        diffusion=lambda x: np.broadcast_to(sig, np.shape(x)[:-1] + (2, 2)),
        reward=lambda x: 0.5 * (x[..., 0] + x[..., 1]),
        discount=math.exp(-1),
        state_lo=[-1.0, -1.0],
        state_hi=[1.0, 1.0],
        reward_bounds=(-1.0, 1.0),
        noise_dim=2,
        name="coupled2d",
    )


def random_statfn(env: EnvSpec, n_stats: int, rng) -> StatFn:
    """Smooth RBF statistics with spread offsets and no projection, so derivatives are classical."""
    side = 5
    axes = [np.linspace(lo, hi, side) for lo, hi in zip(env.state_lo, env.state_hi)]
    centers = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=-1)
    ell = 2 * (axes[0][1] - axes[0][0])
    weights = rng.normal(scale=0.2, size=(n_stats, centers.shape[0]))
    iv = return_bounds(env)
    offsets = np.sort(rng.uniform(iv.v_min, iv.v_max, n_stats)) * 0.5
    return StatFn(centers, ell, weights, offsets, monotone=False)


def chain_rule_probes(n_probes: int = 100, seed: int = 0):
    """Yield ``(env, sf, imp, x, z)`` alternating a 1-D OU and a coupled 2-D env.

    ``z`` lands within three bandwidths of an atom so no term is negligible.
    """
    rng = np.random.default_rng(seed)
    envs = [make_ou_env(1.0, 0.5, math.exp(-1))[0], coupled_2d_env()]
    imp = QuantileImputation(BANDWIDTH)
    for p in range(n_probes):
        env = envs[p % 2]
        sf = random_statfn(env, int(rng.integers(1, 6)), rng)
        lo, hi = env.state_lo, env.state_hi
        x = lo + (hi - lo) * rng.uniform(0.1, 0.9, env.dim)
        s = sf.evaluate(x)[0]
        z = s[rng.integers(s.size)] + rng.uniform(-3, 3) * BANDWIDTH
        yield env, sf, imp, x, z


def chain_rule_error(env, sf, imp, x, z) -> float:
    """Relative gap between the analytic assembly and the composite finite-difference residual.

    The scale is the larger of the finite-difference residual and the sum of
    the analytic term magnitudes, so cancellation between terms cannot
    inflate the ratio.
    """
    terms = shjb_pointwise(env, sf, imp, x, z)
    step_x = FD_FRAC * float(np.max(env.state_hi - env.state_lo))
    step_z = FD_FRAC * return_bounds(env).nondegenerate().width
    fd = float(shjb_fd_residual(env, sf, imp, x, z, step_x, step_z))
    scale = max(abs(fd), abs(terms.drift_term) + abs(terms.advection_term) + abs(terms.diffusion_term))
    return abs(float(terms.residual) - fd) / scale


def rel_err(a, b) -> float:
    """Norm-wise relative error of ``a`` against reference ``b``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))


def mollified_grad_errors(n_probes: int = 100, seed: int = 2, h: float = BANDWIDTH, step: float = 1e-6) -> list[float]:
    """Worst relative error of ``mollified_grads`` against central differences, per probe."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_probes):
        n = int(rng.integers(1, 8))
        s = np.sort(rng.uniform(-1, 1, n))
        z = s[rng.integers(n)] + rng.uniform(-3, 3) * h
        dz, ds, ds2 = mollified_grads(s, z, h)
        fd_z = (mollified_cdf(s, z + step, h) - mollified_cdf(s, z - step, h)) / (2 * step)
        fd_s, fd_s2 = np.empty(n), np.empty(n)
        for i in range(n):
            e = np.zeros(n)
            e[i] = step
            fd_s[i] = (mollified_cdf(s + e, z, h) - mollified_cdf(s - e, z, h)) / (2 * step)
            fd_s2[i] = (mollified_grads(s + e, z, h)[1][i] - mollified_grads(s - e, z, h)[1][i]) / (2 * step)
        out.append(max(rel_err(dz, fd_z), rel_err(ds, fd_s), rel_err(ds2, fd_s2)))
    return out


def statfn_derivative_errors(n_probes: int = 100, seed: int = 4, step: float = 1e-5) -> list[float]:
    """Worst relative error of StatFn Jacobians and Hessians against central differences, per probe."""
    rng = np.random.default_rng(seed)
    envs = [make_ou_env(1.0, 0.5, math.exp(-1))[0], coupled_2d_env()]
    out = []
    for p in range(n_probes):
        env = envs[p % 2]
        sf = random_statfn(env, int(rng.integers(1, 6)), rng)
        d = env.dim
        x = env.state_lo + (env.state_hi - env.state_lo) * rng.uniform(0.05, 0.95, d)
        s, jac, hess = sf.evaluate(x)
        fd_jac = np.empty_like(jac)
        fd_hess = np.empty_like(hess)
        for a in range(d):
            e = np.zeros(d)
            e[a] = step
            sp, jp, _ = sf.evaluate(x + e)
            sm, jm, _ = sf.evaluate(x - e)
            fd_jac[:, a] = (sp - sm) / (2 * step)
            fd_hess[:, :, a] = (jp - jm) / (2 * step)
        out.append(max(rel_err(jac, fd_jac), rel_err(hess, fd_hess)))
    return out
