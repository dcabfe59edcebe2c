"""Limiting fluctuation dynamics and closed-form variance oracles.

case1:      dz = Dg_bar(x_bar) z dt + f_bar(x_bar) dB^H + V_bar^{1/2}(x_bar) dW_hat
case2:      dz = Dg_bar(x_bar) z dt + Df(x_bar)[z] dB^H + V_bar^{1/2}(x_bar) dW_hat
two_scale:  case2 without the W_hat term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .fbm import TimeGrid
from .integrate import GridMismatch, NonFiniteState
from .multiscale import LIMIT_STREAM, SlowFastSystem, sample_bh, solve_averaged
from .parallel import REPLICA_BLOCK, block_map
from .rng import substream
from .stats import KsResult, ks_componentwise

Array = np.ndarray
REGIMES = ("case1", "case2", "two_scale")


@dataclass(frozen=True)
class LimitSpec:
    """Coefficient fields as batch-first callables of x_bar (B, n).

    ``dg -> (B, n, n)``; ``fbar -> (B, n, d)`` (case1); ``df -> (B, n, d, n)`` with
    ``df[b, i, k, l] = d f_ik / d x_l`` (case2, two_scale); ``vbar_sqrt -> (B, n, n)``.
    ``xbar`` maps fBM paths (B, n+1, d) to averaged paths (B, n+1, n) on the same grid.
    """

    regime: str
    n: int
    d: int
    hurst: float
    xbar: Callable[[Array], Array]
    dg: Optional[Callable[[Array], Array]] = None
    fbar: Optional[Callable[[Array], Array]] = None
    df: Optional[Callable[[Array], Array]] = None
    vbar_sqrt: Optional[Callable[[Array], Array]] = None
    z0: Optional[Array] = None

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")
        if self.regime == "case1" and self.fbar is None:
            raise ValueError("case1 needs the averaged fBM coefficient fbar")
        if self.regime in ("case2", "two_scale") and self.df is None:
            raise ValueError(f"{self.regime} needs the Jacobian df of the fBM coefficient")
        if self.regime != "two_scale" and self.vbar_sqrt is None:
            raise ValueError(f"{self.regime} needs vbar_sqrt")
        if self.dg is None:
            raise ValueError("missing drift Jacobian dg")

    @property
    def uses_w_hat(self) -> bool:
        return self.regime != "two_scale"


def fd_jacobian(fn: Callable[[Array], Array], x: Array, rel_step: float = 1e-4) -> Array:
    """Central differences with step rel_step (1 + |x_l|); returns fn's shape plus a trailing n axis."""
    x = np.asarray(x, dtype=float)
    base = np.asarray(fn(x))
    out = np.empty(base.shape + (x.shape[1],))
    for l in range(x.shape[1]):
        h = rel_step * (1.0 + np.abs(x[:, l]))
        e = np.zeros_like(x)
        e[:, l] = h
        diff = np.asarray(fn(x + e)) - np.asarray(fn(x - e))
        out[..., l] = diff / (2.0 * h.reshape((-1,) + (1,) * (diff.ndim - 1)))
    return out


def simulate_limit(spec: LimitSpec, grid: TimeGrid, bh: Array, dw_hat: Optional[Array] = None,
                   z0: Optional[Array] = None) -> Array:
    """Euler paths (B, n+1, n) of the limit SDE for fBM paths bh (B, n+1, d) and W_hat increments (B, n, n).

    z0 defaults to 0 (x^eps and x_bar share the initial point).
    """
    bh = np.asarray(bh, dtype=float)
    if bh.ndim != 3 or bh.shape[1] != grid.n + 1:
        raise GridMismatch(f"fBM array {bh.shape} does not fit a grid with {grid.n + 1} points")
    batch = bh.shape[0]
    xbar = np.asarray(spec.xbar(bh), dtype=float)
    if xbar.shape != (batch, grid.n + 1, spec.n):
        raise GridMismatch(f"averaged path {xbar.shape} not aligned with the grid")
    if spec.uses_w_hat:
        if dw_hat is None:
            raise ValueError("regime needs W_hat increments")
        dw_hat = np.asarray(dw_hat, dtype=float)
        if dw_hat.shape[:2] != (batch, grid.n):
            raise GridMismatch(f"W_hat increments {dw_hat.shape} vs {batch} paths of {grid.n} steps")
    dbh = np.diff(bh, axis=1)
    z0 = spec.z0 if z0 is None else z0
    z = np.zeros((batch, spec.n)) if z0 is None else np.broadcast_to(np.asarray(z0, float), (batch, spec.n)).copy()
    out = np.empty((batch, grid.n + 1, spec.n))
    out[:, 0] = z
    dt = grid.dt
    for i in range(grid.n):
        xb = xbar[:, i]
        step = np.einsum("bij,bj->bi", spec.dg(xb), z) * dt
        if spec.regime == "case1":
            step += np.einsum("bid,bd->bi", spec.fbar(xb), dbh[:, i])
        else:
            step += np.einsum("bidl,bl,bd->bi", spec.df(xb), z, dbh[:, i])
        if spec.uses_w_hat:
            step += np.einsum("bij,bj->bi", spec.vbar_sqrt(xb), dw_hat[:, i])
        z = z + step
        if not np.all(np.isfinite(z)):
            raise NonFiniteState(i + 1)
        out[:, i + 1] = z
    return out


def sample_w_hat(grid: TimeGrid, n: int, seed: int, keys: Sequence[tuple]) -> Array:
    """Fresh W_hat increments (B, n_steps, n) from the 'hat_w' substreams."""
    sq = math.sqrt(grid.dt)
    return np.stack([substream(seed, "hat_w", *k).standard_normal((grid.n, n)) * sq for k in keys])


def limit_ensemble(spec: LimitSpec, grid: TimeGrid, seed: int, count: int, jobs: int = 1,
                   block: int = REPLICA_BLOCK, stream: int = LIMIT_STREAM) -> dict:
    """Independent limit replicas: B^H from ('fbm', stream, i), W_hat from ('hat_w', stream, i).

    The key prefix keeps these draws disjoint from the slow-fast replicas, so an
    unconditional comparison uses independent B^H.
    """
    def fn(idx):
        keys = [(stream, i) for i in idx]
        bh = sample_bh(grid, spec.hurst, spec.d, seed, keys)
        dw = sample_w_hat(grid, spec.n, seed, keys) if spec.uses_w_hat else None
        return {"z": simulate_limit(spec, grid, bh, dw), "bh": bh}

    return block_map(fn, range(count), jobs, block)


def limit_variance_ode(a: float, vbar: float, t) -> Array:
    """Variance of dz = a z dt + sqrt(vbar) dW, z0 = 0: vbar (e^{2at} - 1) / (2a), vbar t at a = 0."""
    t = np.asarray(t, dtype=float)
    if vbar == 0.0:
        return np.zeros_like(t)
    if abs(a) < 1e-12:
        return vbar * t
    return vbar * np.expm1(2.0 * a * t) / (2.0 * a)


def weak_uniqueness_probe(spec: LimitSpec, grid: TimeGrid, n_mc: int, seed_a: int, seed_b: int,
                          level: float = 0.01, other: Optional[LimitSpec] = None) -> dict:
    """KS between terminal marginals of two independently seeded limit ensembles.

    ``other`` swaps in a second spec for the second ensemble (negative controls).
    """
    za = limit_ensemble(spec, grid, seed_a, n_mc)["z"][:, -1]
    zb = limit_ensemble(other or spec, grid, seed_b, n_mc)["z"][:, -1]
    res: list[KsResult] = ks_componentwise(za, zb, level)
    return {"ks": [r.to_dict() for r in res], "pass": all(r.passed for r in res),
            "statistic": max(r.statistic for r in res), "n": n_mc}


def limit_spec_for(system: SlowFastSystem, regime: str, grid: TimeGrid, x0, vbar_sqrt=None, dg=None, df=None,
                   fbar=None, gbar=None) -> LimitSpec:
    """Assemble a LimitSpec from a slow-fast system; missing Jacobians come from central differences."""
    gbar = gbar or system.gbar
    if gbar is None:
        raise ValueError("system has no averaged drift")
    dg = dg or (lambda x: fd_jacobian(gbar, x))
    if regime != "case1" and df is None:
        df = lambda x: fd_jacobian(system.f, x)
    if regime == "case1" and fbar is None:
        fbar = system.fbar
    xbar = lambda bh: solve_averaged(system, grid, bh, x0, gbar)
    return LimitSpec(regime, system.n, system.d, system.hurst, xbar, dg, fbar, df, vbar_sqrt)
