import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate as spi
from scipy.special import beta as beta_fn
from scipy.special import hyp2f1

from mfl.fbm import (FbmPath, HurstError, SeriesDivergence, TimeGrid, covariance_check, estimate_holder_exponent,
                     fbm_covariance, fbm_covariance_matrix, holder_seminorm, holder_seminorm_batch,
                     hyp2f1_series, neg_holder_seminorm, path_to_csv, read_path_csv, sample_fbm_cholesky,
                     sample_fbm_davies_harte, sample_fbm_davies_harte_batch, sample_fbm_volterra, volterra_kernel,
                     write_path_csv)
from mfl.fbm import _hyp2f1_unit
from mfl.rng import substream
from mfl.stats import ks_distance

hursts = st.floats(0.51, 0.99)
times = st.floats(0.0, 10.0)


def _dh(grid, h, count, seed=0, d=1):
    return sample_fbm_davies_harte_batch(grid, h, d, [substream(seed, "fbm", i) for i in range(count)])


# ---------------------------------------------------------------------------
# covariance
# ---------------------------------------------------------------------------


def test_covariance_diagonal_unit():
    assert fbm_covariance(1.0, 1.0, 0.7) == pytest.approx(1.0)


def test_covariance_brownian_boundary():
    s, t = np.array([0.3, 2.0, 1.5]), np.array([0.7, 0.5, 1.5])
    np.testing.assert_allclose(fbm_covariance(s, t, 0.5), np.minimum(s, t))


@given(hursts, times)
def test_unit_lag_increment_variance(h, s):
    t = s + 1.0
    v = fbm_covariance(t, t, h) - 2 * fbm_covariance(s, t, h) + fbm_covariance(s, s, h)
    assert v == pytest.approx(1.0, rel=1e-9, abs=1e-9)


@given(hursts, times, times)
def test_covariance_symmetric_with_power_diagonal(h, s, t):
    assert fbm_covariance(s, t, h) == fbm_covariance(t, s, h)
    assert fbm_covariance(t, t, h) == pytest.approx(t ** (2 * h))


def test_covariance_rejects_negative_time_and_bad_hurst():
    with pytest.raises(ValueError):
        fbm_covariance(-1.0, 1.0, 0.7)
    with pytest.raises(HurstError):
        sample_fbm_davies_harte(TimeGrid(1.0, 8), 0.4, 1, substream(0, "fbm", 0))


# ---------------------------------------------------------------------------
# Davies-Harte
# ---------------------------------------------------------------------------


def test_davies_harte_increment_variance():
    grid = TimeGrid(1.0, 64)
    inc = np.diff(_dh(grid, 0.75, 10000)[:, :, 0], axis=1)
    var = (inc**2).mean(0)
    se = (inc**2).std(0, ddof=1) / math.sqrt(inc.shape[0])
    target = grid.dt**1.5
    assert np.all(np.abs(var - target) < 4 * se + 1e-15)
    # stationarity: no trend in the variance over time
    assert abs(var[:8].mean() - var[-8:].mean()) < 4 * math.hypot(se[:8].mean(), se[-8:].mean())


def test_davies_harte_starts_at_zero_and_is_deterministic():
    grid = TimeGrid(1.0, 32)
    a = sample_fbm_davies_harte(grid, 0.8, 3, substream(5, "fbm", 2))
    b = sample_fbm_davies_harte(grid, 0.8, 3, substream(5, "fbm", 2))
    assert np.all(a.values[0] == 0.0)
    assert np.array_equal(a.values, b.values)
    assert a.dim == 3


def test_davies_harte_batch_matches_single_paths():
    grid = TimeGrid(2.0, 16)
    batch = _dh(grid, 0.7, 4, seed=3, d=2)
    single = sample_fbm_davies_harte(grid, 0.7, 2, substream(3, "fbm", 2)).values
    assert np.array_equal(batch[2], single)


@pytest.mark.parametrize("h", [0.6, 0.75, 0.9])
def test_davies_harte_covariance_within_four_se(h):
    grid = TimeGrid(1.0, 32)
    chk = covariance_check(_dh(grid, h, 10000, seed=11), grid, h)
    assert chk.passed, chk


def test_covariance_check_detects_wrong_hurst():
    grid = TimeGrid(1.0, 32)
    assert not covariance_check(_dh(grid, 0.6, 10000), grid, 0.9).passed


def test_components_independent():
    grid = TimeGrid(1.0, 16)
    v = _dh(grid, 0.75, 8000, d=2)
    r = np.corrcoef(v[:, -1, 0], v[:, -1, 1])[0, 1]
    assert abs(r) < 4 / math.sqrt(8000)


# ---------------------------------------------------------------------------
# Cholesky oracle
# ---------------------------------------------------------------------------


def test_cholesky_terminal_variance():
    grid = TimeGrid(2.0, 16)
    h = 0.7
    vals = np.array([sample_fbm_cholesky(grid, h, 1, substream(1, "aux", i)).values[-1, 0] for i in range(8000)])
    se = (vals**2).std(ddof=1) / math.sqrt(vals.size)
    assert abs((vals**2).mean() - 2.0 ** (2 * h)) < 4 * se


def test_cholesky_boundary_mode_is_brownian():
    grid = TimeGrid(1.0, 8)
    vals = np.stack([sample_fbm_cholesky(grid, 0.5, 1, substream(2, "aux", i), allow_boundary=True).values[1:, 0]
                     for i in range(8000)])
    emp = vals.T @ vals / vals.shape[0]
    t = grid.points[1:]
    np.testing.assert_allclose(emp, np.minimum.outer(t, t), atol=0.05)


def test_generators_agree_in_law():
    grid = TimeGrid(1.0, 64)
    dh = _dh(grid, 0.75, 10000)[:, -1, 0]
    ch = np.array([sample_fbm_cholesky(grid, 0.75, 1, substream(0, "aux", i)).values[-1, 0] for i in range(10000)])
    assert ks_distance(dh, ch).statistic < 0.02


def test_cholesky_cap():
    with pytest.raises(ValueError):
        sample_fbm_cholesky(TimeGrid(1.0, 64), 0.7, 1, substream(0, "aux", 0), cap=32)


# ---------------------------------------------------------------------------
# hypergeometric series and Volterra kernel
# ---------------------------------------------------------------------------


@given(st.floats(0.51, 0.95), st.floats(-0.9, 0.9))
def test_hyp2f1_series_matches_scipy(h, z):
    a, b, c = h - 0.5, 0.5 - h, h + 0.5
    assert hyp2f1_series(a, b, c, z) == pytest.approx(hyp2f1(a, b, c, z), rel=1e-9, abs=1e-12)


def test_hyp2f1_series_near_unit_circle_needs_more_terms():
    # convergence is geometric in |z|, so 500 terms cannot reach 1e-12 at z = -0.984
    a, b, c = 0.25, -0.25, 1.25
    with pytest.raises(SeriesDivergence):
        hyp2f1_series(a, b, c, -0.984375)
    assert hyp2f1_series(a, b, c, -0.984375, max_terms=5000) == pytest.approx(hyp2f1(a, b, c, -0.984375), rel=1e-9)


@given(st.floats(0.51, 0.95), st.floats(0.0, 0.999))
def test_unit_interval_hyp2f1_matches_scipy(h, w):
    a, b, c = h - 0.5, 2.0 * h, h + 0.5
    assert _hyp2f1_unit(a, b, c, np.array([w]), 1e-12, 500)[0] == pytest.approx(hyp2f1(a, b, c, w), rel=1e-8)


def test_hyp2f1_series_reports_divergence():
    with pytest.raises(SeriesDivergence) as info:
        hyp2f1_series(0.25, -0.25, 1.25, -5.0, max_terms=50)
    assert info.value.n_terms == 50


def _kernel_integral_oracle(t, s, h):
    # K_H(t, s) = c_H s^{1/2-H} int_s^t (u-s)^{H-3/2} u^{H-1/2} du
    c_h = math.sqrt(h * (2 * h - 1) / beta_fn(2 - 2 * h, h - 0.5))
    val, _ = spi.quad(lambda u: u ** (h - 0.5), s, t, weight="alg", wvar=(h - 1.5, 0.0))
    return c_h * s ** (0.5 - h) * val


@pytest.mark.parametrize("h,t,s", [(0.75, 1.0, 0.5), (0.6, 2.0, 0.3), (0.9, 1.0, 0.05), (0.75, 1.0, 0.001)])
def test_volterra_kernel_against_quadrature(h, t, s):
    assert volterra_kernel(t, s, h) == pytest.approx(_kernel_integral_oracle(t, s, h), rel=1e-8)


def test_volterra_kernel_zero_above_diagonal():
    assert volterra_kernel(1.0, 1.5, 0.7) == 0.0


@pytest.mark.parametrize("h", [0.6, 0.75, 0.9])
def test_volterra_variance_identity(h):
    t = 1.3
    val, _ = spi.quad(lambda s: volterra_kernel(t, s, h) ** 2, 0.0, t, limit=200)
    assert val == pytest.approx(t ** (2 * h), rel=1e-6)


def test_volterra_sampler_variance_and_covariance():
    grid = TimeGrid(1.0, 512)
    h = 0.8
    v = np.stack([sample_fbm_volterra(grid, h, substream(4, "bm", i)).values[:, 0] for i in range(4000)])
    assert np.all(v[:, 0] == 0.0)
    assert (v[:, -1] ** 2).mean() == pytest.approx(1.0, rel=0.05)
    cov = (v[:, 256] * v[:, -1]).mean()
    assert cov == pytest.approx(fbm_covariance(0.5, 1.0, h), rel=0.05)


# ---------------------------------------------------------------------------
# Holder functionals
# ---------------------------------------------------------------------------


def _brute_holder(v, dt, eta):
    best = 0.0
    for i in range(len(v)):
        for j in range(i + 1, len(v)):
            best = max(best, np.linalg.norm(v[j] - v[i]) / ((j - i) * dt) ** eta)
    return best


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=25), st.floats(0.05, 1.0))
def test_holder_scan_equals_brute_force(vals, eta):
    v = np.asarray(vals)[:, None]
    dt = 1.0 / (len(vals) - 1)
    assert holder_seminorm(v, dt, eta) == pytest.approx(_brute_holder(v, dt, eta), rel=1e-12, abs=1e-12)


def test_holder_linear_path_and_constant():
    grid = TimeGrid(1.0, 64)
    assert holder_seminorm(3.0 * grid.points, grid.dt, 0.5) == pytest.approx(3.0)
    assert holder_seminorm(np.full(65, 2.0), grid.dt, 0.5) == 0.0


def test_holder_monotone_in_eta():
    grid = TimeGrid(1.0, 128)
    v = _dh(grid, 0.7, 1)[0]
    vals = [holder_seminorm(v, grid.dt, eta) for eta in (0.2, 0.4, 0.6, 0.8)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_holder_below_and_above_hurst_under_refinement():
    h = 0.75
    fine = TimeGrid(1.0, 2048)
    v = _dh(fine, h, 20, seed=2)
    below = [holder_seminorm_batch(v[:, ::s], fine.dt * s, 0.6).mean() for s in (8, 1)]
    above = [holder_seminorm_batch(v[:, ::s], fine.dt * s, 0.9).mean() for s in (8, 1)]
    assert below[1] / below[0] < 1.3
    assert above[1] / above[0] > 1.5


def test_neg_holder_examples():
    grid = TimeGrid(1.0, 32)
    assert neg_holder_seminorm(np.full(33, 2.0), grid.dt, 0.3) == pytest.approx(2.0)
    assert neg_holder_seminorm(np.zeros(33), grid.dt, 0.3) == 0.0
    t = grid.points
    brute = max((t[j] ** 2 - t[i] ** 2) / 2 * (t[j] - t[i]) ** -0.5 for i in range(33) for j in range(i + 1, 33))
    assert neg_holder_seminorm(t, grid.dt, 0.5) == pytest.approx(brute, rel=1e-3)


def test_holder_exponent_estimates():
    grid = TimeGrid(1.0, 1024)
    assert estimate_holder_exponent(grid.points, grid.dt).exponent == pytest.approx(1.0, abs=0.05)
    est = [estimate_holder_exponent(p, grid.dt).exponent for p in _dh(grid, 0.75, 100)]
    assert abs(np.median(est) - 0.75) < 0.05
    bm = np.stack([sample_fbm_cholesky(TimeGrid(1.0, 256), 0.5, 1, substream(0, "bm", i), allow_boundary=True).values
                   for i in range(50)])
    est = [estimate_holder_exponent(p, 1 / 256).exponent for p in bm]
    assert abs(np.median(est) - 0.5) < 0.05
    with pytest.raises(ValueError):
        estimate_holder_exponent(np.zeros(65), 1.0)
    with pytest.raises(ValueError):
        estimate_holder_exponent(np.arange(100.0), 1.0)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def test_csv_roundtrip_full_precision():
    grid = TimeGrid(1.0, 16)
    path = sample_fbm_davies_harte(grid, 0.7, 2, substream(0, "fbm", 0))
    buf = io.StringIO()
    write_path_csv(path, buf)
    text = buf.getvalue()
    assert text.splitlines()[0] == "t,dim0,dim1"
    back = read_path_csv(io.StringIO(text), 0.7)
    assert np.array_equal(back.values, path.values)
    assert path_to_csv(grid.points, path.values) == text


def test_fbm_path_validation():
    with pytest.raises(ValueError):
        FbmPath(TimeGrid(1.0, 4), np.ones(5), 0.7)
    with pytest.raises(ValueError):
        TimeGrid(1.0, 4).subgrid(3)
    assert fbm_covariance_matrix(np.array([1.0]), 0.7).shape == (1, 1)
