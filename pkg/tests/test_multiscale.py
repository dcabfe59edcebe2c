import math

import numpy as np
import pytest

from mfl.benchmarks import case1_ou, case2_additive, case2_linear
from mfl.fbm import TimeGrid
from mfl.integrate import GridMismatch
from mfl.rng import substream
from mfl.multiscale import (SlowFastSystem, TwoScaleConfig, UnderResolved, deviation, nested_keys, replica_keys,
                            sample_bh, simulate_slow_fast, simulate_two_scale, solve_averaged)

GRID = TimeGrid(1.0, 50)


def _run(bench, eps, keys, grid=GRID, **kw):
    return simulate_slow_fast(bench.system, TwoScaleConfig(eps), grid, 0, keys, bench.x0, bench.y0, **kw)


def test_additive_system_reproduces_fbm_exactly():
    b = case2_additive(x0=0.5)
    traj = _run(b, 0.01, replica_keys(5))
    np.testing.assert_allclose(traj.x[..., 0], 0.5 + traj.bh[..., 0], atol=1e-12)
    xbar = solve_averaged(b.system, GRID, traj.bh, b.x0)
    assert np.max(np.abs(deviation(traj, xbar, 0.01))) < 1e-10


def test_young_linear_averaged_path_matches_closed_form():
    # dx = -x dt + beta x dB^H has the pathwise solution x0 exp(-t + beta B_t)
    b = case2_linear(beta=0.5, x0=1.0)
    grid = TimeGrid(1.0, 4096)
    bh = sample_bh(grid, 0.75, 1, 0, [(i,) for i in range(20)])
    xbar = solve_averaged(b.system, grid, bh, b.x0)[..., 0]
    exact = np.exp(-grid.points + 0.5 * bh[..., 0])
    assert np.max(np.abs(xbar / exact - 1)) < 0.05


def test_case1_variance_matches_integrated_ou():
    # z_T = eps^{-1/2} int_0^T y_t dt with y stationary-ish OU: Var -> sigma^2 T / gamma^2 = 2
    b = case1_ou(y0=0.0)
    eps = 0.01
    traj = _run(b, eps, replica_keys(2000))
    xbar = solve_averaged(b.system, GRID, traj.bh, b.x0)
    z = deviation(traj, xbar, eps)[:, -1, 0]
    se = z.var(ddof=1) * math.sqrt(2 / (z.size - 1))
    assert z.var(ddof=1) == pytest.approx(2.0, abs=4 * se + 0.1)


def test_replicas_independent_of_batching_and_jobs():
    b = case2_linear()
    all5 = _run(b, 0.05, replica_keys(5))
    tail = _run(b, 0.05, replica_keys(2, start=3))
    assert np.array_equal(all5.x[3:], tail.x)
    blocked = _run(b, 0.05, replica_keys(5), jobs=2, block=2)
    assert np.array_equal(all5.x, blocked.x)
    assert all5.checksums() == blocked.checksums()


def test_same_fbm_across_eps():
    b = case2_linear()
    a = _run(b, 0.1, replica_keys(3))
    c = _run(b, 0.01, replica_keys(3))
    assert np.array_equal(a.bh, c.bh)


def test_nested_keys_share_outer_fbm():
    keys = nested_keys(2, 3)
    assert keys[0][0] == keys[2][0] and keys[0][1] != keys[2][1]
    b = case2_linear()
    traj = simulate_two_scale(b.system, 0.1, 0.01, GRID, 0, keys, b.x0, b.y0)
    assert np.array_equal(traj.bh[0], traj.bh[2])
    assert not np.array_equal(traj.y[0], traj.y[1])
    assert traj.config["delta_over_eps"] == pytest.approx(0.1)


def test_supplied_fbm_is_used():
    b = case2_additive()
    bh = np.zeros((2, GRID.n + 1, 1))
    traj = _run(b, 0.1, replica_keys(2), bh=bh)
    assert np.all(traj.x == 0.0)
    with pytest.raises(GridMismatch):
        _run(b, 0.1, replica_keys(3), bh=bh)


def test_martingale_recorded_on_request():
    b = case1_ou()
    traj = _run(b, 0.1, replica_keys(2), dpsi_dy=b.dpsi_dy)
    assert traj.martingale.shape == traj.x.shape
    assert "martingale" in traj.checksums()
    assert _run(b, 0.1, replica_keys(2)).martingale is None


def test_configuration_errors():
    with pytest.raises(ValueError):
        TwoScaleConfig(0.1, 0.2)
    with pytest.raises(ValueError):
        TwoScaleConfig(0.0)
    assert TwoScaleConfig(0.1, 0.1).ratio == 1.0
    b = case2_linear()
    with pytest.raises(UnderResolved):
        _run(b, 0.1, replica_keys(1), c_micro=0.8)
    with pytest.raises(ValueError):
        simulate_two_scale(case1_ou().system, 0.1, 0.01, GRID, 0, replica_keys(1), np.zeros(1))
    with pytest.raises(ValueError):
        SlowFastSystem(b.system.g, b.system.f, b.system.fast, "bogus", 1, 1)
    with pytest.raises(AssertionError):
        SlowFastSystem.case2(b.system.g, b.system.f, b.system.fast, 1, 1, g_box=(1.0, 1.0, 0.5))
    with pytest.raises(GridMismatch):
        deviation(_run(b, 0.1, replica_keys(2)), np.zeros((1, 51, 1)), 0.1)


def test_trajectory_serialisation():
    traj = _run(case2_linear(), 0.1, replica_keys(2))
    lines = traj.to_csv(1).splitlines()
    assert lines[0] == "t,x0,y0" and len(lines) == GRID.n + 2
    side = traj.sidecar()
    assert side["replicas"] == 2 and side["config"]["micro_steps"] == 2


def test_mean_zero_fast_drift_keeps_slow_state_near_start():
    b = case1_ou(y0=0.0)
    traj = _run(b, 1e-3, replica_keys(100), grid=TimeGrid(1.0, 100))
    sup = np.max(np.abs(traj.x[..., 0] - b.x0[0]), axis=1)
    assert sup.mean() + 3 * sup.std(ddof=1) / np.sqrt(sup.size) < 0.2


def test_unit_eps_matches_direct_euler_cosimulation():
    # with eps = 1 and one micro step per macro step the split scheme is plain Euler on the pair (x, y)
    b = case2_linear(beta=0.5, gamma=1.0, sigma=1.0, x0=1.0, y0=0.3)
    grid = TimeGrid(1.0, 50)
    traj = simulate_slow_fast(b.system, TwoScaleConfig(1.0), grid, 3, replica_keys(1), b.x0, b.y0, c_micro=0.5)
    bh = sample_bh(grid, 0.75, 1, 3, [(0,)])[0, :, 0]
    rng = substream(3, "fast", 0)
    x, y = 1.0, 0.3
    xs = [x]
    for i in range(grid.n):
        xi = rng.standard_normal((1, 1))[0, 0]
        x, y = x + (-x + y) * grid.dt + 0.5 * x * (bh[i + 1] - bh[i]), y - y * grid.dt + math.sqrt(grid.dt) * xi
        xs.append(x)
    np.testing.assert_allclose(traj.x[0, :, 0], xs, atol=1e-12)


def test_averaged_path_examples():
    grid = TimeGrid(1.0, 1000)
    bh = sample_bh(grid, 0.75, 1, 0, [(0,)])
    b = case1_ou(x0=0.7)
    np.testing.assert_allclose(solve_averaged(b.system, grid, bh, b.x0)[0, :, 0], 0.7)
    decay = solve_averaged(b.system, grid, bh, np.ones(1), gbar=lambda x: -x)[0, -1, 0]
    assert abs(decay - math.exp(-1)) < 1e-3
    lin = case2_linear(beta=0.6, x0=2.0)
    xbar = solve_averaged(lin.system, TimeGrid(1.0, 4096), sample_bh(TimeGrid(1.0, 4096), 0.75, 1, 1, [(0,)]),
                          lin.x0, gbar=lambda x: np.zeros_like(x))
    bh_fine = sample_bh(TimeGrid(1.0, 4096), 0.75, 1, 1, [(0,)])[0, -1, 0]
    assert xbar[0, -1, 0] == pytest.approx(2.0 * math.exp(0.6 * bh_fine), rel=0.05)


def test_deviation_of_identical_paths_is_zero():
    traj = _run(case2_linear(), 0.1, replica_keys(2))
    assert np.all(deviation(traj, traj.x.copy(), 0.1) == 0.0)


def test_delta_equal_eps_reproduces_slow_fast_bitwise():
    b = case2_linear()
    one = _run(b, 0.05, replica_keys(3))
    two = simulate_two_scale(b.system, 0.05, 0.05, GRID, 0, replica_keys(3), b.x0, b.y0)
    assert np.array_equal(one.x, two.x) and np.array_equal(one.y, two.y)


def test_additive_two_scale_independent_of_delta():
    b = case2_additive()
    a = simulate_two_scale(b.system, 0.1, 0.1, GRID, 0, replica_keys(2), b.x0)
    c = simulate_two_scale(b.system, 0.1, 0.001, GRID, 0, replica_keys(2), b.x0)
    np.testing.assert_allclose(a.x, c.x, atol=1e-13)
    np.testing.assert_allclose(a.x[..., 0], a.bh[..., 0], atol=1e-13)
