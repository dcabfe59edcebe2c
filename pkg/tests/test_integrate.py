import math

import numpy as np
import pytest

from mfl.benchmarks import FORMULA_EXAMPLES
from mfl.fbm import FbmPath, TimeGrid, sample_fbm_davies_harte_batch
from mfl.integrate import (DriverPair, GridFunction, GridMismatch, MixedSdeSpec, NonFiniteState, fd_gradient,
                           fd_hessian, formula_refinement_study, ito_integral, sample_drivers, solve_mixed_sde,
                           verify_young_ito_formula, young_integral)
from mfl.rng import substream


def test_young_integral_of_constant_is_increment():
    drv = sample_drivers(TimeGrid(1.0, 64), 0.75, 2, 1, seed=0)
    coef = np.broadcast_to(np.array([[1.0, -2.0]]), (65, 1, 2))
    out = young_integral(GridFunction(drv.grid, coef), drv.fbm)
    np.testing.assert_allclose(out[:, 0], drv.fbm.values[:, 0] - 2 * drv.fbm.values[:, 1])


def test_left_point_identity_for_b_db():
    # sum B_i dB_i = (B_T^2 - sum dB_i^2) / 2 holds exactly for left-point sums
    drv = sample_drivers(TimeGrid(1.0, 256), 0.75, 1, 1, seed=1)
    b = drv.fbm.values[:, 0]
    val = young_integral(GridFunction(drv.grid, b), drv.fbm)[-1, 0]
    assert val == pytest.approx((b[-1] ** 2 - (np.diff(b) ** 2).sum()) / 2, rel=1e-12)


def test_young_chain_rule_error_shrinks_under_refinement():
    h = 0.75
    fine = TimeGrid(1.0, 4096)
    vals = sample_fbm_davies_harte_batch(fine, h, 1, [substream(0, "fbm", i) for i in range(30)])
    errs = []
    for stride in (16, 4, 1):
        g = fine.subgrid(stride)
        e = []
        for v in vals:
            p = FbmPath(g, v[::stride], h)
            b = p.values[:, 0]
            e.append(abs(young_integral(GridFunction(g, b), p)[-1, 0] - b[-1] ** 2 / 2))
        errs.append(np.median(e))
    assert errs[0] > errs[1] > errs[2]


def test_ito_isometry_and_quadratic_variation():
    grid = TimeGrid(1.0, 256)
    vals = []
    for i in range(4000):
        drv = sample_drivers(grid, 0.75, 1, 1, seed=2, index=i)
        w = drv.bm[:, 0]
        vals.append(ito_integral(GridFunction(grid, w), drv.bm, grid)[-1, 0])
    vals = np.array(vals)
    # E (int W dW)^2 = T^2 / 2
    se = (vals**2).std(ddof=1) / math.sqrt(vals.size)
    assert abs((vals**2).mean() - 0.5) < 4 * se
    assert abs(vals.mean()) < 4 * vals.std(ddof=1) / math.sqrt(vals.size)


def test_grid_mismatch():
    grid = TimeGrid(1.0, 8)
    with pytest.raises(GridMismatch):
        GridFunction(grid, np.ones(5))
    drv = sample_drivers(TimeGrid(1.0, 16), 0.7, 1, 1, seed=0)
    with pytest.raises(GridMismatch):
        young_integral(GridFunction(grid, np.ones(9)), drv.fbm)
    with pytest.raises(GridMismatch):
        DriverPair(drv.fbm, np.zeros((9, 1)))


def _zero(x):
    return np.zeros_like(x)


def _one(t, x):
    return np.ones((x.shape[0], x.shape[1], 1))


def _none(x):
    return np.zeros((x.shape[0], x.shape[1], 1))


def test_additive_sde_reproduces_driver():
    drv = sample_drivers(TimeGrid(1.0, 64), 0.75, 1, 1, seed=3)
    x = solve_mixed_sde(MixedSdeSpec(_zero, _one, _none, np.array([0.5])), drv)
    np.testing.assert_allclose(x[:, 0], 0.5 + drv.fbm.values[:, 0], atol=1e-13)


def test_ou_euler_matches_exact_recursion():
    lam = 0.7
    drv = sample_drivers(TimeGrid(1.0, 64), 0.75, 1, 1, seed=4)
    spec = MixedSdeSpec(lambda x: -lam * x, _one, lambda x: np.full((x.shape[0], 1, 1), 0.3), np.array([1.0]))
    x = solve_mixed_sde(spec, drv)
    ref = [1.0]
    dbh, dw = np.diff(drv.fbm.values[:, 0]), np.diff(drv.bm[:, 0])
    for i in range(64):
        ref.append(ref[-1] * (1 - lam * drv.grid.dt) + dbh[i] + 0.3 * dw[i])
    np.testing.assert_allclose(x[:, 0], ref, atol=1e-12)


def test_non_finite_state_raises():
    drv = sample_drivers(TimeGrid(1.0, 64), 0.75, 1, 1, seed=5)
    spec = MixedSdeSpec(lambda x: x**4 * 1e6, _one, _none, np.array([10.0]))
    with pytest.raises(NonFiniteState), np.errstate(over="ignore", invalid="ignore"):
        solve_mixed_sde(spec, drv)


def test_finite_difference_derivatives():
    x = np.array([[0.3, -1.2]])

    def psi(z):
        return np.sin(z[:, 0]) * z[:, 1] ** 2

    np.testing.assert_allclose(fd_gradient(psi, x)[0], [np.cos(0.3) * 1.44, np.sin(0.3) * -2.4], rtol=1e-7)
    hess = np.array([[-np.sin(0.3) * 1.44, np.cos(0.3) * -2.4], [np.cos(0.3) * -2.4, 2 * np.sin(0.3)]])
    np.testing.assert_allclose(fd_hessian(psi, x)[0], hess, rtol=1e-5)


def test_linear_psi_residual_is_zero_at_stride_one():
    ex = FORMULA_EXAMPLES["linear"]
    drv = sample_drivers(TimeGrid(1.0, 128), 0.75, 1, 1, seed=6)
    res = verify_young_ito_formula(ex.psi, ex.spec, drv, 1, ex.grad, ex.hess)
    assert np.max(np.abs(res.residual)) < 1e-12


@pytest.mark.parametrize("name", ["ito-square", "young-square"])
def test_formula_residual_shrinks(name):
    ex = FORMULA_EXAMPLES[name]
    out = formula_refinement_study(ex.psi, ex.spec, TimeGrid(1.0, 1024), 0.75, (8, 4, 2, 1), 50, 0,
                                   grad=ex.grad, hess=ex.hess)
    assert all(r > 1.2 for r in out["ratios"])


def test_formula_with_finite_difference_derivatives():
    ex = FORMULA_EXAMPLES["young-square"]
    out = formula_refinement_study(ex.psi, ex.spec, TimeGrid(1.0, 512), 0.75, (4, 1), 20, 0)
    assert out["ratios"][0] > 1.2


def test_ito_integral_of_constant():
    drv = sample_drivers(TimeGrid(1.0, 32), 0.75, 1, 1, seed=7)
    out = ito_integral(GridFunction(drv.grid, np.full(33, 2.5)), drv.bm, drv.grid)
    np.testing.assert_allclose(out[:, 0], 2.5 * drv.bm[:, 0], atol=1e-13)


def test_ito_formula_gap_shrinks_with_n():
    # per-path gap between int W dW and (W_T^2 - T)/2 is half the QV error, which shrinks like n^{-1/2}
    fine = TimeGrid(1.0, 4096)
    rms = []
    for stride in (16, 1):
        gaps = []
        for i in range(50):
            w = sample_drivers(fine, 0.75, 1, 1, seed=8, index=i).bm[::stride, 0]
            g = fine.subgrid(stride)
            val = ito_integral(GridFunction(g, w), w, g)[-1, 0]
            gaps.append(val - (w[-1] ** 2 - 1.0) / 2)
        rms.append(np.sqrt(np.mean(np.square(gaps))))
    assert rms[1] < rms[0] / 2


def test_zero_coefficients_keep_initial_state():
    drv = sample_drivers(TimeGrid(1.0, 16), 0.75, 1, 1, seed=9)
    x = solve_mixed_sde(MixedSdeSpec(_zero, lambda t, x: _none(x), _none, np.array([1.5])), drv)
    assert np.all(x == 1.5)


def test_pure_drift_decay():
    drv = sample_drivers(TimeGrid(1.0, 1000), 0.75, 1, 1, seed=10)
    x = solve_mixed_sde(MixedSdeSpec(lambda x: -x, lambda t, x: _none(x), _none, np.array([1.0])), drv)
    assert abs(x[-1, 0] - math.exp(-1.0)) < 1e-3


def test_linear_young_sde_exponential_solution():
    # dx = beta x dB^H has the Young solution x0 exp(beta B^H_t), reached under refinement
    beta = 0.8
    fine = TimeGrid(1.0, 4096)
    vals = sample_fbm_davies_harte_batch(fine, 0.75, 1, [substream(11, "fbm", i) for i in range(10)])
    spec = MixedSdeSpec(_zero, lambda t, x: beta * x[:, :, None], _none, np.array([1.0]))
    errs = []
    for stride in (16, 1):
        g = fine.subgrid(stride)
        e = []
        for v in vals:
            drv = DriverPair(FbmPath(g, v[::stride], 0.75), np.zeros((g.n + 1, 1)))
            x = solve_mixed_sde(spec, drv)[-1, 0]
            e.append(abs(x / math.exp(beta * v[-1, 0]) - 1))
        errs.append(np.median(e))
    assert errs[1] < errs[0] and errs[1] < 0.05
