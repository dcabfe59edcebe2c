"""Fractional Brownian motion: exact and approximate generators, path regularity.

All generators target the centred Gaussian law with covariance
``0.5 * (t^{2H} + s^{2H} - |t - s|^{2H})`` per component, started at zero.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.special import gamma as gamma_fn

log = logging.getLogger(__name__)

CHOLESKY_CAP = 4096
HOLDER_CAP = 4096
EIG_CLAMP = 1e-10


class HurstError(ValueError):
    """Hurst parameter outside the supported range."""


class FallbackToCholesky(RuntimeWarning):
    pass


class SeriesDivergence(ArithmeticError):
    def __init__(self, msg: str, partial_sum: float, last_term: float, n_terms: int):
        super().__init__(f"{msg} (partial sum {partial_sum!r}, last term {last_term!r}, terms {n_terms})")
        self.partial_sum = partial_sum
        self.last_term = last_term
        self.n_terms = n_terms


def check_hurst(h: float, allow_boundary: bool = False) -> float:
    h = float(h)
    lo_ok = h >= 0.5 if allow_boundary else h > 0.5
    if not (lo_ok and h < 1.0):
        raise HurstError(f"Hurst parameter must satisfy 1/2 < H < 1, got H={h}")
    return h


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_i = i*T/n, i = 0..n."""

    horizon: float
    n: int

    def __post_init__(self):
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n}")
        object.__setattr__(self, "n", int(self.n))

    @property
    def dt(self) -> float:
        return self.horizon / self.n

    @property
    def points(self) -> np.ndarray:
        return np.arange(self.n + 1) * self.dt

    def subgrid(self, stride: int) -> "TimeGrid":
        if self.n % stride:
            raise ValueError(f"stride {stride} does not divide n={self.n}")
        return TimeGrid(self.horizon, self.n // stride)

    def to_dict(self) -> dict:
        return {"horizon": self.horizon, "n": self.n}


@dataclass(frozen=True)
class FbmPath:
    grid: TimeGrid
    values: np.ndarray = field(repr=False)
    hurst: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.grid.n + 1 or v.shape[1] < 1:
            raise ValueError(f"values shape {v.shape} does not match grid n={self.grid.n}")
        if np.any(v[0] != 0.0):
            raise ValueError("fBM path must start at the zero vector")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)


# ---------------------------------------------------------------------------
# Covariance
# ---------------------------------------------------------------------------


def fbm_covariance(s, t, h: float):
    """E[B_s B_t] per component. Accepts H = 1/2 (Brownian covariance) for boundary checks."""
    h = check_hurst(h, allow_boundary=True)
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(s < 0) or np.any(t < 0):
        raise ValueError("fbm_covariance requires non-negative times")
    two_h = 2.0 * h
    out = 0.5 * (t**two_h + s**two_h - np.abs(t - s) ** two_h)
    return float(out) if out.ndim == 0 else out


def fbm_covariance_matrix(times: np.ndarray, h: float) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    return fbm_covariance(times[:, None], times[None, :], h)


def fgn_autocovariance(k: np.ndarray, h: float) -> np.ndarray:
    """Autocovariance of unit-step fractional Gaussian noise at integer lags k."""
    k = np.abs(np.asarray(k, dtype=float))
    two_h = 2.0 * h
    return 0.5 * ((k + 1.0) ** two_h - 2.0 * k**two_h + np.abs(k - 1.0) ** two_h)


# ---------------------------------------------------------------------------
# Davies-Harte (circulant embedding)
# ---------------------------------------------------------------------------


@lru_cache(maxsize=64)
def _circulant_sqrt_eigs(n: int, h: float) -> np.ndarray | None:
    """sqrt(lambda / m) for the 2n circulant embedding of unit-step fGn; None if not PSD."""
    m = 2 * n
    row = fgn_autocovariance(np.r_[np.arange(n + 1), np.arange(n - 1, 0, -1)], h)
    lam = np.fft.fft(row).real
    if np.any(lam < -EIG_CLAMP):
        return None
    lam = np.where(lam < EIG_CLAMP, 0.0, lam)
    out = np.sqrt(lam / m)
    out.setflags(write=False)
    return out


def sample_fbm_davies_harte_batch(
    grid: TimeGrid, h: float, d: int, streams: Sequence[np.random.Generator]
) -> np.ndarray:
    """Paths for several independent substreams, shape (len(streams), n+1, d).

    Each stream draws exactly ``d * 4n`` standard normals, so a path depends only
    on its own stream.
    """
    h = check_hurst(h)
    n, m = grid.n, 2 * grid.n
    scale = grid.dt**h
    root = _circulant_sqrt_eigs(n, h)
    if root is None:
        log.warning("Davies-Harte embedding not PSD for n=%d H=%g; falling back to Cholesky", n, h)
        return np.stack([sample_fbm_cholesky(grid, h, d, rng).values for rng in streams])
    z = np.stack([rng.standard_normal((d, 2, m)) for rng in streams])
    spec = root * (z[:, :, 0, :] + 1j * z[:, :, 1, :])
    fgn = np.fft.fft(spec, axis=-1).real[..., :n] * scale
    out = np.zeros((len(streams), n + 1, d))
    out[:, 1:, :] = np.cumsum(fgn, axis=-1).transpose(0, 2, 1)
    return out


def sample_fbm_davies_harte(grid: TimeGrid, h: float, d: int, stream: np.random.Generator) -> FbmPath:
    values = sample_fbm_davies_harte_batch(grid, h, d, [stream])[0]
    return FbmPath(grid, values, h)


# ---------------------------------------------------------------------------
# Cholesky (exact oracle generator)
# ---------------------------------------------------------------------------


@lru_cache(maxsize=16)
def _cholesky_factor(horizon: float, n: int, h: float) -> np.ndarray:
    times = np.arange(1, n + 1) * (horizon / n)
    cov = fbm_covariance_matrix(times, h)
    jitter = 0.0
    for _ in range(4):
        try:
            factor = np.linalg.cholesky(cov + jitter * np.eye(n))
            break
        except np.linalg.LinAlgError:
            jitter = 1e-12 * np.trace(cov) / n if jitter == 0.0 else jitter * 100
            log.warning("fBM covariance not numerically PSD; retrying with jitter %.3g", jitter)
    else:
        raise np.linalg.LinAlgError(f"fBM covariance not PSD even with jitter {jitter:.3g}")
    factor.setflags(write=False)
    return factor


def sample_fbm_cholesky(
    grid: TimeGrid,
    h: float,
    d: int,
    stream: np.random.Generator,
    cap: int = CHOLESKY_CAP,
    allow_boundary: bool = False,
) -> FbmPath:
    """Exact sampler via the Cholesky factor of the covariance on t_1..t_n."""
    h = check_hurst(h, allow_boundary=allow_boundary)
    if grid.n > cap:
        raise ValueError(f"Cholesky generator limited to n <= {cap}, got n={grid.n}")
    factor = _cholesky_factor(grid.horizon, grid.n, h)
    z = stream.standard_normal((d, grid.n))
    values = np.zeros((grid.n + 1, d))
    values[1:] = (z @ factor.T).T
    return FbmPath(grid, values, h)


# ---------------------------------------------------------------------------
# Volterra kernel
# ---------------------------------------------------------------------------


def hyp2f1_series(a: float, b: float, c: float, z, tol: float = 1e-12, max_terms: int = 500):
    """Gauss series sum_k (a)_k (b)_k / ((c)_k k!) z^k, vectorised over z with |z| < 1.

    Stops once every |term| <= tol * |partial sum|.
    """
    z = np.asarray(z, dtype=float)
    term = np.ones_like(z)
    total = np.ones_like(z)
    for k in range(max_terms):
        term = term * ((a + k) * (b + k) / ((c + k) * (k + 1.0))) * z
        total = total + term
        if np.all(np.abs(term) <= tol * np.maximum(np.abs(total), 1e-300)):
            return total
    worst = int(np.argmax(np.abs(term)))
    raise SeriesDivergence(
        "hypergeometric series did not converge",
        float(total.flat[worst]),
        float(term.flat[worst]),
        max_terms,
    )


def _hyp2f1_unit(a, b, c, w, tol, max_terms):
    """2F1(a, b; c; w) for w in [0, 1); uses the w -> 1-w connection formula when w > 1/2.

    Requires c - a - b to be a non-integer.
    """
    w = np.asarray(w, dtype=float)
    out = np.empty_like(w)
    near = w > 0.5
    if np.any(~near):
        out[~near] = hyp2f1_series(a, b, c, w[~near], tol, max_terms)
    if np.any(near):
        v = 1.0 - w[near]
        s = c - a - b
        g = gamma_fn
        first = g(c) * g(s) / (g(c - a) * g(c - b)) * hyp2f1_series(a, b, 1.0 - s, v, tol, max_terms)
        second = g(c) * g(-s) / (g(a) * g(b)) * hyp2f1_series(c - a, c - b, 1.0 + s, v, tol, max_terms)
        out[near] = first + v**s * second
    return out


def volterra_kernel(t, s, h: float, tol: float = 1e-12, max_terms: int = 500):
    """Molchan-Golosov type kernel K_H(t, s) with K_H = 0 for s > t.

    The hypergeometric argument 1 - t/s lies in (-inf, 0]; it is mapped to
    w = 1 - s/t in [0, 1) by the Pfaff transformation before summation.
    """
    h = check_hurst(h)
    t, s = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(s, dtype=float))
    if np.any(t <= 0) or np.any(s <= 0):
        raise ValueError("volterra_kernel requires t, s > 0")
    out = np.zeros(t.shape)
    inside = s < t
    if np.any(inside):
        ti, si = t[inside], s[inside]
        a, c = h - 0.5, h + 0.5
        # F(a, 1/2-H; c; z) = (1-z)^{-a} F(a, 2H; c; z/(z-1)),  z/(z-1) = 1 - s/t
        f = (ti / si) ** (-a) * _hyp2f1_unit(a, 2.0 * h, c, 1.0 - si / ti, tol, max_terms)
        c_h = math.sqrt(2 * h * gamma_fn(1.5 - h) * gamma_fn(h + 0.5) / gamma_fn(2 - 2 * h))
        out[inside] = c_h / gamma_fn(h + 0.5) * (ti - si) ** a * f
    return float(out) if out.ndim == 0 else out


@lru_cache(maxsize=8)
def _volterra_matrix(horizon: float, n: int, h: float) -> np.ndarray:
    dt = horizon / n
    t = np.arange(1, n + 1) * dt
    mid = (np.arange(n) + 0.5) * dt
    tt, ss = np.meshgrid(t, mid, indexing="ij")
    mat = volterra_kernel(tt, ss, h)
    mat.setflags(write=False)
    return mat


def sample_fbm_volterra(grid: TimeGrid, h: float, stream: np.random.Generator) -> FbmPath:
    """Approximate 1-d fBM from Brownian increments, B_{t_i} = sum_j K(t_i, s_j) dW_j.

    Kernel evaluated at cell midpoints; the s^{1/2-H} singularity at 0 makes the
    variance biased low by O(dt^{2-2H}) (about 2% at n=512, H=0.8).
    """
    mat = _volterra_matrix(grid.horizon, grid.n, check_hurst(h))
    dw = stream.standard_normal(grid.n) * math.sqrt(grid.dt)
    values = np.zeros((grid.n + 1, 1))
    values[1:, 0] = mat @ dw
    return FbmPath(grid, values, h)


# ---------------------------------------------------------------------------
# Regularity functionals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CovarianceCheck:
    """Entrywise empirical-vs-exact covariance on t_1..t_n, deviations in units of the entry's SE."""

    max_abs_dev: float
    max_z: float
    n_se: float
    samples: int

    @property
    def passed(self) -> bool:
        return self.max_z <= self.n_se

    def to_dict(self) -> dict:
        return {"max_abs_dev": self.max_abs_dev, "max_z": self.max_z, "n_se": self.n_se,
                "samples": self.samples, "pass": self.passed}


def covariance_check(values: np.ndarray, grid: TimeGrid, h: float, n_se: float = 4.0) -> CovarianceCheck:
    """Compare E[B_s B_t] estimated from paths (B, n+1[, d]) with the exact covariance.

    Components are pooled as independent samples.  Each entry's SE is the
    sample standard deviation of B_s B_t over sqrt(samples); the mean is known
    to be zero and is not subtracted.
    """
    v = np.asarray(values, dtype=float)
    if v.ndim == 3:
        v = np.moveaxis(v, 2, 1).reshape(-1, v.shape[1])
    x = v[:, 1:]
    m = x.shape[0]
    if m < 2:
        raise ValueError("covariance check needs at least 2 paths")
    emp = x.T @ x / m
    second = (x**2).T @ (x**2) / m
    se = np.sqrt(np.maximum(second - emp**2, 1e-300) / m)
    exact = fbm_covariance_matrix(grid.points[1:], h)
    dev = np.abs(emp - exact)
    return CovarianceCheck(float(dev.max()), float((dev / se).max()), n_se, m)


def _as_batch(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        return v[None, :, None]
    if v.ndim == 2:
        return v[None]
    return v


def holder_seminorm_batch(values: np.ndarray, dt: float, eta: float, cap: int = HOLDER_CAP) -> np.ndarray:
    """Exact all-pairs discrete eta-Holder seminorm for a batch of paths (B, N, d).

    Lags are scanned in increasing order; a lag is skipped once diam/(lag*dt)^eta
    cannot beat the running maximum, which keeps the scan exact.
    """
    if not 0 < eta <= 1:
        raise ValueError(f"eta must lie in (0, 1], got {eta}")
    v = _as_batch(values)
    n_pts = v.shape[1]
    if n_pts - 1 > cap:
        raise ValueError(f"all-pairs scan limited to n <= {cap}, got n={n_pts - 1}")
    centered = v - v[:, :1, :]
    diam = 2.0 * np.sqrt((centered**2).sum(-1)).max(axis=1)
    best = np.zeros(v.shape[0])
    active = np.arange(v.shape[0])
    for lag in range(1, n_pts):
        scale = (lag * dt) ** eta
        active = active[diam[active] / scale > best[active]]
        if active.size == 0:
            break
        inc = v[active, lag:, :] - v[active, :-lag, :]
        norms = np.sqrt((inc**2).sum(-1)).max(axis=1) / scale
        best[active] = np.maximum(best[active], norms)
    return best


def holder_seminorm(values: np.ndarray, dt: float, eta: float, cap: int = HOLDER_CAP) -> float:
    """sup_{s<t} |h_t - h_s| / (t-s)^eta over all grid pairs (lower bound of the continuum value)."""
    return float(holder_seminorm_batch(values, dt, eta, cap)[0])


def neg_holder_seminorm(values: np.ndarray, dt: float, kappa: float, cap: int = HOLDER_CAP) -> float:
    """|h|_{-kappa} = sup |t-s|^{kappa-1} |int_s^t h dr|, integral by the trapezoid rule.

    Equal to the (1-kappa)-Holder seminorm of the running trapezoid integral.
    """
    if not 0 < kappa < 1:
        raise ValueError(f"kappa must lie in (0, 1), got {kappa}")
    v = _as_batch(values)[0]
    cum = np.zeros_like(v)
    cum[1:] = np.cumsum(0.5 * (v[1:] + v[:-1]) * dt, axis=0)
    return holder_seminorm(cum, dt, 1.0 - kappa, cap)


@dataclass(frozen=True)
class HolderEstimate:
    exponent: float
    stderr: float
    lags: tuple


def estimate_holder_exponent(values: np.ndarray, dt: float = 1.0, max_lag_fraction: int = 16) -> HolderEstimate:
    """Regress log mean squared increment on log lag over dyadic lags; exponent = slope/2."""
    v = _as_batch(values)[0]
    n = v.shape[0] - 1
    if n < 64 or n & (n - 1):
        raise ValueError(f"estimate_holder_exponent needs n a power of two >= 64, got n={n}")
    lags = [2**k for k in range(int(math.log2(n // max_lag_fraction)) + 1)]
    msq = np.array([((v[lag:] - v[:-lag]) ** 2).sum(-1).mean() for lag in lags])
    if np.any(msq <= 0):
        raise ValueError("degenerate path: zero increments at some scale")
    x = np.log(np.array(lags) * dt)
    y = np.log(msq)
    A = np.vstack([x, np.ones_like(x)]).T
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    dof = len(x) - 2
    resid = y - A @ coef
    s2 = float(resid @ resid) / dof if dof > 0 else 0.0
    se_slope = math.sqrt(s2 / ((x - x.mean()) ** 2).sum())
    return HolderEstimate(coef[0] / 2.0, se_slope / 2.0, tuple(lags))


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def path_to_csv(times: np.ndarray, values: np.ndarray, prefix: str = "dim", names=None) -> str:
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + (list(names) if names is not None else [f"{prefix}{k}" for k in range(v.shape[1])]))
    for t, row in zip(times, v):
        w.writerow([format(float(t), ".17g")] + [format(float(x), ".17g") for x in row])
    return buf.getvalue()


def write_path_csv(path: FbmPath, fh) -> None:
    fh.write(path_to_csv(path.grid.points, path.values))


def read_path_csv(fh, hurst: float) -> FbmPath:
    rows = list(csv.reader(fh))
    header, data = rows[0], np.array(rows[1:], dtype=float)
    if header[0] != "t":
        raise ValueError("first column must be t")
    t = data[:, 0]
    grid = TimeGrid(float(t[-1]), len(t) - 1)
    if not np.allclose(t, grid.points, rtol=0, atol=1e-12 * grid.horizon):
        raise ValueError("only uniform grids are supported")
    return FbmPath(grid, data[:, 1:], hurst)
