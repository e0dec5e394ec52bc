import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from ctdrl.envlib import EnvSpec, make_const_env, make_ou_env, return_bounds
from ctdrl.sdesim import (
    EmpiricalReturnDist,
    SimConfig,
    SimulationAborted,
    empirical_cdf,
    empirical_quantiles,
    euler_maruyama_step,
    mc_return_distribution,
    mc_returns,
    path_rng,
    sample_return,
)


def riemann_const(c, gamma, dt, horizon):
    """Closed form of dt * sum_{k dt < T} gamma^{k dt} c."""
    n = math.ceil(horizon / dt - 1e-9)
    return c * dt * (1 - gamma ** (n * dt)) / (1 - gamma**dt)


# --- Euler-Maruyama -----------------------------------------------------------


def test_step_identity_dynamics():
    env, _ = make_const_env(1.0, 0.5)
    x = np.array([[0.3], [-0.7]])
    np.testing.assert_array_equal(euler_maruyama_step(env, x, 0.1, np.ones((2, 1))), x)


def test_step_drift_only():
    env, _ = make_ou_env(1.0, 0.0, 0.5)
    assert euler_maruyama_step(env, np.array([1.0]), 0.1, np.zeros(1))[0] == pytest.approx(0.9)


def test_step_noise_scaling():
    env, _ = make_ou_env(1.0, 1.0, 0.5)
    assert euler_maruyama_step(env, np.array([0.0]), 0.01, np.ones(1))[0] == pytest.approx(0.1)


def test_step_clamps_to_box():
    env, _ = make_ou_env(1.0, 1.0, 0.5)
    out = euler_maruyama_step(env, np.array([env.state_hi[0]]), 0.01, np.array([50.0]))
    assert out[0] == env.state_hi[0]


def test_step_rejects_nonpositive_dt():
    env, _ = make_ou_env(1.0, 1.0, 0.5)
    with pytest.raises(ValueError):
        euler_maruyama_step(env, np.array([0.0]), 0.0, np.ones(1))


# --- single-path returns ----------------------------------------------------


def test_sample_return_const_env():
    gamma = math.exp(-1)
    env, _ = make_const_env(1.0, gamma)
    cfg = SimConfig(1e-3, 20.0, 1)
    g = sample_return(env, [0.0], cfg, path_rng(0, 0))
    assert g == pytest.approx(riemann_const(1.0, gamma, 1e-3, 20.0), rel=1e-10)
    assert g == pytest.approx(1.0, abs=1e-3)


def test_sample_return_zero_reward():
    env, _ = make_const_env(0.0, 0.7)
    assert sample_return(env, [0.0], SimConfig(0.01, 5.0, 1), path_rng(0, 0)) == 0.0


def test_sample_return_ou_deterministic_matches_ode():
    env, _ = make_ou_env(1.0, 0.0, math.exp(-1))
    oracle, _ = integrate.quad(lambda t: math.exp(-t) * math.exp(-t), 0, np.inf)
    g = sample_return(env, [1.0], SimConfig(1e-3, 12.0, 1), path_rng(0, 0))
    assert oracle == pytest.approx(0.5)
    assert g == pytest.approx(oracle, abs=2e-3)


def test_sample_return_agrees_with_batch_for_deterministic_env():
    env, _ = make_ou_env(1.5, 0.0, 0.8)
    cfg = SimConfig.for_env(env, 0.01, 3)
    batch = mc_returns(env, [[0.4]], cfg)[0]
    single = sample_return(env, [0.4], cfg, path_rng(0, 0))
    assert batch == pytest.approx([single] * 3, rel=1e-12)


def test_aborted_paths_are_reported():
    env, _ = make_ou_env(1.0, 0.5, 0.5)
    bad = EnvSpec(1, lambda x: np.full(np.shape(x), np.nan), env.diffusion, env.reward, 0.5, [-1.0], [1.0], (-1.0, 1.0))
    cfg = SimConfig.for_env(bad, 0.1, 10)
    with pytest.raises(SimulationAborted) as info:
        mc_returns(bad, [[0.0]], cfg)
    assert info.value.n_aborted == 10
    with pytest.raises(SimulationAborted):
        sample_return(bad, [0.0], cfg, path_rng(0, 0))


# --- configuration -----------------------------------------------------------


def test_simconfig_validation():
    with pytest.raises(ValueError):
        SimConfig(0.0, 1.0, 10)
    with pytest.raises(ValueError):
        SimConfig(2.0, 1.0, 10)
    with pytest.raises(ValueError):
        SimConfig(0.1, 1.0, 0)


def test_short_horizon_rejected_by_tail_check():
    env, _ = make_ou_env(1.0, 0.5, math.exp(-1))
    with pytest.raises(ValueError, match="tail"):
        mc_returns(env, [[0.0]], SimConfig(0.01, 1.0, 10))


def test_for_env_meets_tail_tolerance():
    for gamma in (0.5, 0.9, math.exp(-1)):
        env, _ = make_ou_env(1.0, 0.5, gamma)
        cfg = SimConfig.for_env(env, 0.01, 10)
        assert cfg.tail_bound(env) <= 1e-4 * return_bounds(env).width
        cfg.check(env)


# --- Monte Carlo oracle ---------------------------------------------------------


def test_deterministic_env_has_no_spread():
    env, _ = make_ou_env(1.0, 0.0, 0.5)
    d = mc_return_distribution(env, [0.5], SimConfig.for_env(env, 0.01, 300))
    assert np.ptp(d.samples) < 1e-9


def test_same_seed_same_samples_and_block_independence():
    env, _ = make_ou_env(1.0, 0.5, 0.5)
    cfg = SimConfig.for_env(env, 0.01, 700, seed=11)
    a = mc_returns(env, [[0.2], [-0.3]], cfg)
    b = mc_returns(env, [[0.2], [-0.3]], cfg)
    c = mc_returns(env, [[0.2], [-0.3]], cfg, max_groups=1)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, c)
    other = mc_returns(env, [[0.2]], SimConfig.for_env(env, 0.01, 700, seed=12))
    assert not np.array_equal(a[:1], other)


def test_path_noise_independent_of_path_count():
    env, _ = make_ou_env(1.0, 0.5, 0.5)
    small = mc_returns(env, [[0.0]], SimConfig.for_env(env, 0.01, 100, seed=3))
    large = mc_returns(env, [[0.0]], SimConfig.for_env(env, 0.01, 300, seed=3))
    # the first 100 paths are shared, so their sorted values are a sub-multiset
    assert np.all(np.isin(small, large))


def test_common_random_numbers_across_states():
    # the linear OU return is a x + noise, and the noise is shared between start states
    env, base = make_ou_env(1.0, 0.5, math.exp(-1))
    cfg = SimConfig.for_env(env, 0.01, 500, seed=5)
    s = mc_returns(env, [[0.0], [0.5]], cfg)
    shift = s[1] - s[0]
    assert np.ptp(shift) < 1e-3


@pytest.mark.slow
def test_ou_mean_matches_baseline_clt():
    env, base = make_ou_env(1.0, 0.5, math.exp(-1))
    d = mc_return_distribution(env, [1.0], SimConfig.for_env(env, 0.001, 100_000, seed=2))
    assert abs(d.mean() - float(base.value(np.array([1.0])))) <= 3 * d.std_error()


@pytest.mark.parametrize(
    "factory",
    [lambda: make_ou_env(1.0, 0.5, math.exp(-1)), lambda: make_ou_env(2.0, 0.0, 0.9), lambda: make_const_env(1.0, 0.9)],
)
def test_samples_inside_return_bounds(factory):
    env, _ = factory()
    cfg = SimConfig.for_env(env, 0.01, 10_000, seed=1)
    iv = return_bounds(env)
    s = mc_returns(env, [[env.state_lo[0]], [0.0], [env.state_hi[0]]], cfg)
    slack = env.r_abs_max * cfg.dt
    assert s.min() >= iv.v_min - slack
    assert s.max() <= iv.v_max + slack


def test_tail_control_on_deterministic_env():
    env, _ = make_ou_env(0.5, 0.0, 0.8)
    x0 = [[1.0]]
    for horizon in (2.0, 5.0, 10.0):
        short = SimConfig(0.01, horizon, 1, tail_tol=np.inf)
        long = SimConfig(0.01, 2 * horizon, 1, tail_tol=np.inf)
        gap = abs(mc_returns(env, x0, long)[0, 0] - mc_returns(env, x0, short)[0, 0])
        assert gap <= short.tail_bound(env)


def test_const_env_first_order_riemann_error():
    gamma = 0.6
    env, _ = make_const_env(1.0, gamma)
    exact = 1 / -math.log(gamma)
    errs = []
    for dt in (0.04, 0.02, 0.01, 0.005):
        cfg = SimConfig(dt, 60.0, 1)
        errs.append(abs(mc_returns(env, [[0.0]], cfg)[0, 0] - exact) / dt)
    # error / dt settles to a constant (c/2 for the left sum)
    np.testing.assert_allclose(errs, 0.5, rtol=0.05)
    assert abs(errs[-1] - errs[-2]) < abs(errs[1] - errs[0])


# --- ECDF and quantiles ---------------------------------------------------------


def test_empirical_cdf_examples():
    d = EmpiricalReturnDist(np.array([4.0, 1.0, 3.0, 2.0]), [0.0])
    assert empirical_cdf(d, 2.5) == 0.5
    assert empirical_cdf(d, 0.0) == 0.0
    assert empirical_cdf(d, 4.0) == 1.0
    assert empirical_cdf(d, 2.0) == 0.5  # right-continuous


def test_empirical_quantile_examples():
    d = EmpiricalReturnDist(np.array([1.0, 2.0, 3.0, 4.0]), [0.0])
    np.testing.assert_array_equal(empirical_quantiles(d, 2), [1.0, 3.0])
    # N = 1: level 0.5, first sample whose ECDF reaches 0.5
    assert empirical_quantiles(d, 1)[0] == 2.0
    np.testing.assert_array_equal(empirical_quantiles(np.full(7, 3.3), 5), np.full(5, 3.3))


def brute_force_quantiles(samples, n):
    s = np.sort(samples)
    out = []
    for i in range(1, n + 1):
        tau = (2 * i - 1) / (2 * n)
        out.append(min(z for z in s if np.mean(s <= z) >= tau - 1e-15))
    return np.array(out)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=40),
    st.integers(1, 20),
)
def test_empirical_quantiles_match_brute_force(samples, n):
    got = empirical_quantiles(np.array(samples), n)
    np.testing.assert_array_equal(got, brute_force_quantiles(np.array(samples), n))
    assert np.all(np.diff(got) >= 0)
