"""Pathwise Young sums against fBM, Ito sums against BM, and a mixed Euler stepper.

Coefficient callables follow one convention throughout the package: the state
argument carries a leading batch axis, ``x.shape == (B, n)``, and the return
value keeps it (``(B, n)`` for drifts, ``(B, n, d)`` for matrix coefficients).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .fbm import FbmPath, TimeGrid, sample_fbm_davies_harte_batch
from .rng import substream

Array = np.ndarray


class GridMismatch(ValueError):
    pass


class NonFiniteState(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite state at step {step}")
        self.step = step


@dataclass(frozen=True)
class GridFunction:
    """Integrand sampled at the grid points: values[i] maps a driver increment to a state increment.

    ``values`` has shape (n+1, p, d); a 1-d array is read as p = d = 1.
    """

    grid: TimeGrid
    values: Array = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None, None]
        elif v.ndim == 2:
            v = v[:, :, None]
        if v.shape[0] != self.grid.n + 1:
            raise GridMismatch(f"integrand has {v.shape[0]} samples, grid has {self.grid.n + 1}")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class DriverPair:
    """fBM (d-dim) and an independent BM (e-dim) on one grid."""

    fbm: FbmPath
    bm: Array = field(repr=False)

    def __post_init__(self):
        bm = np.asarray(self.bm, dtype=float)
        if bm.ndim == 1:
            bm = bm[:, None]
        if bm.shape[0] != self.fbm.grid.n + 1:
            raise GridMismatch("fBM and BM paths live on different grids")
        object.__setattr__(self, "bm", bm)

    @property
    def grid(self) -> TimeGrid:
        return self.fbm.grid


def sample_bm(grid: TimeGrid, e: int, stream: np.random.Generator) -> Array:
    out = np.zeros((grid.n + 1, e))
    out[1:] = np.cumsum(stream.standard_normal((grid.n, e)) * np.sqrt(grid.dt), axis=0)
    return out


def sample_drivers(grid: TimeGrid, h: float, d: int, e: int, seed: int, index: int = 0) -> DriverPair:
    """Driver pair for replica ``index``; fBM and BM come from the disjoint 'fbm'/'bm' substreams."""
    fbm_vals = sample_fbm_davies_harte_batch(grid, h, d, [substream(seed, "fbm", index)])[0]
    bm = sample_bm(grid, e, substream(seed, "bm", index))
    return DriverPair(FbmPath(grid, fbm_vals, h), bm)


def _cumulative(integrand: GridFunction, driver_values: Array, grid: TimeGrid) -> Array:
    dv = np.asarray(driver_values, dtype=float)
    if dv.ndim == 1:
        dv = dv[:, None]
    if dv.shape[0] != grid.n + 1 or integrand.grid != grid:
        raise GridMismatch(f"integrand grid {integrand.grid} vs driver with {dv.shape[0]} points")
    if integrand.values.shape[2] != dv.shape[1]:
        raise GridMismatch(
            f"integrand expects {integrand.values.shape[2]}-dim driver, got {dv.shape[1]}"
        )
    inc = np.einsum("ipd,id->ip", integrand.values[:-1], np.diff(dv, axis=0))
    out = np.zeros((grid.n + 1, inc.shape[1]))
    out[1:] = np.cumsum(inc, axis=0)
    return out


def young_integral(integrand: GridFunction, driver: FbmPath) -> Array:
    """Left-point sums of integrand against fBM increments, cumulated at every grid point."""
    return _cumulative(integrand, driver.values, driver.grid)


def ito_integral(integrand: GridFunction, bm: Array, grid: TimeGrid) -> Array:
    """Left-point (Ito) sums against Brownian increments."""
    return _cumulative(integrand, bm, grid)


# ---------------------------------------------------------------------------
# Mixed Young-Ito SDE
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixedSdeSpec:
    """dx = g(x) dt + f(t, x) dB^H + sigma(x) dW, with batch-first callables."""

    drift: Callable[[Array], Array]
    fbm_coeff: Callable[[float, Array], Array]
    ito_coeff: Callable[[Array], Array]
    x0: Array

    @property
    def dim(self) -> int:
        return int(np.size(self.x0))


def solve_mixed_sde_batch(spec: MixedSdeSpec, grid: TimeGrid, dbh: Array, dw: Array) -> Array:
    """Euler paths for a batch of driver increments dbh (B, n, d), dw (B, n, e) -> (B, n+1, dim)."""
    dbh = np.asarray(dbh, dtype=float)
    dw = np.asarray(dw, dtype=float)
    batch = dbh.shape[0]
    x = np.broadcast_to(np.asarray(spec.x0, dtype=float).reshape(1, -1), (batch, spec.dim)).copy()
    out = np.empty((batch, grid.n + 1, spec.dim))
    out[:, 0] = x
    dt = grid.dt
    times = grid.points
    for i in range(grid.n):
        step = spec.drift(x) * dt
        step += np.einsum("bnd,bd->bn", spec.fbm_coeff(times[i], x), dbh[:, i])
        step += np.einsum("bne,be->bn", spec.ito_coeff(x), dw[:, i])
        x = x + step
        if not np.all(np.isfinite(x)):
            raise NonFiniteState(i + 1)
        out[:, i + 1] = x
    return out


def solve_mixed_sde(spec: MixedSdeSpec, drivers: DriverPair) -> Array:
    """Euler scheme x_{i+1} = x_i + g dt + f dB^H + sigma dW on the drivers' grid; shape (n+1, dim)."""
    dbh = drivers.fbm.increments[None]
    dw = np.diff(drivers.bm, axis=0)[None]
    return solve_mixed_sde_batch(spec, drivers.grid, dbh, dw)[0]


# ---------------------------------------------------------------------------
# Young-Ito formula verifier
# ---------------------------------------------------------------------------


def fd_gradient(psi: Callable[[Array], Array], x: Array, rel_step: float = 1e-5) -> Array:
    x = np.asarray(x, dtype=float)
    h = rel_step * (1.0 + np.abs(x))
    grad = np.empty_like(x)
    for k in range(x.shape[1]):
        e = np.zeros_like(x)
        e[:, k] = h[:, k]
        grad[:, k] = (psi(x + e) - psi(x - e)) / (2.0 * h[:, k])
    return grad


def fd_hessian(psi: Callable[[Array], Array], x: Array, rel_step: float = 1e-4) -> Array:
    x = np.asarray(x, dtype=float)
    n = x.shape[1]
    h = rel_step * (1.0 + np.abs(x))
    out = np.empty((x.shape[0], n, n))
    for i in range(n):
        for j in range(i, n):
            ei = np.zeros_like(x)
            ej = np.zeros_like(x)
            ei[:, i] = h[:, i]
            ej[:, j] = h[:, j]
            val = (psi(x + ei + ej) - psi(x + ei - ej) - psi(x - ei + ej) + psi(x - ei - ej)) / (
                4.0 * h[:, i] * h[:, j]
            )
            out[:, i, j] = out[:, j, i] = val
    return out


@dataclass(frozen=True)
class FormulaResidual:
    grid: TimeGrid
    residual: Array

    @property
    def terminal(self) -> Array:
        return self.residual[..., -1]


def young_ito_residual_batch(
    psi: Callable[[Array], Array],
    spec: MixedSdeSpec,
    grid: TimeGrid,
    dbh: Array,
    dw: Array,
    stride: int = 1,
    grad: Optional[Callable[[Array], Array]] = None,
    hess: Optional[Callable[[Array], Array]] = None,
) -> FormulaResidual:
    """Residual of the Young-Ito change-of-variables identity for a batch of drivers.

    The state is solved on the full grid; the right-hand side integrals are
    left-point sums over the sub-grid of every ``stride``-th point.  Returns
    residuals of shape (B, n/stride + 1).
    """
    grad = grad or (lambda x: fd_gradient(psi, x))
    hess = hess or (lambda x: fd_hessian(psi, x))
    path = solve_mixed_sde_batch(spec, grid, dbh, dw)
    coarse = grid.subgrid(stride)
    batch = path.shape[0]
    xs = path[:, ::stride]
    dbh_c = np.add.reduceat(dbh, np.arange(0, grid.n, stride), axis=1)
    dw_c = np.add.reduceat(dw, np.arange(0, grid.n, stride), axis=1)
    dtc = coarse.dt
    rhs = np.zeros((batch, coarse.n + 1))
    times = coarse.points
    for j in range(coarse.n):
        x = xs[:, j]
        dpsi = grad(x)
        sig = spec.ito_coeff(x)
        a = np.einsum("bie,bje->bij", sig, sig)
        inc = np.einsum("bn,bn->b", dpsi, spec.drift(x)) * dtc
        inc += np.einsum("bn,bnd,bd->b", dpsi, spec.fbm_coeff(times[j], x), dbh_c[:, j])
        inc += np.einsum("bn,bne,be->b", dpsi, sig, dw_c[:, j])
        inc += 0.5 * np.einsum("bij,bij->b", hess(x), a) * dtc
        rhs[:, j + 1] = rhs[:, j] + inc
    lhs = psi(xs.reshape(-1, spec.dim)).reshape(batch, -1)
    return FormulaResidual(coarse, lhs - lhs[:, :1] - rhs)


def verify_young_ito_formula(
    psi: Callable[[Array], Array],
    spec: MixedSdeSpec,
    drivers: DriverPair,
    stride: int = 1,
    grad: Optional[Callable[[Array], Array]] = None,
    hess: Optional[Callable[[Array], Array]] = None,
) -> FormulaResidual:
    """Residual path of Psi(x_t) - Psi(x_0) - [drift + Young + Ito + 1/2 tr(D^2 Psi a)] sums."""
    dbh = drivers.fbm.increments[None]
    dw = np.diff(drivers.bm, axis=0)[None]
    res = young_ito_residual_batch(psi, spec, drivers.grid, dbh, dw, stride, grad, hess)
    return FormulaResidual(res.grid, res.residual[0])


def formula_refinement_study(
    psi: Callable[[Array], Array],
    spec: MixedSdeSpec,
    grid: TimeGrid,
    h: float,
    strides: tuple[int, ...],
    n_paths: int,
    seed: int,
    d: int = 1,
    e: int = 1,
    grad=None,
    hess=None,
) -> dict:
    """Terminal RMS residual per stride over ``n_paths`` shared driver realizations.

    Strides are given coarse-to-fine (e.g. (16, 8, 4)); each halving should
    shrink the RMS residual.
    """
    streams = [substream(seed, "fbm", i) for i in range(n_paths)]
    bh = sample_fbm_davies_harte_batch(grid, h, d, streams)
    dbh = np.diff(bh, axis=1)
    dw = np.stack([substream(seed, "bm", i).standard_normal((grid.n, e)) for i in range(n_paths)])
    dw *= np.sqrt(grid.dt)
    rms = []
    for s in strides:
        res = young_ito_residual_batch(psi, spec, grid, dbh, dw, s, grad, hess)
        rms.append(float(np.sqrt(np.mean(res.terminal**2))))
    ratios = [rms[k] / rms[k + 1] for k in range(len(rms) - 1)]
    return {"strides": list(strides), "rms": rms, "ratios": ratios}
