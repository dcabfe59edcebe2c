"""Coupled slow-fast simulation, the matched averaged dynamics and the deviation z = (x - x_bar)/sqrt(eps).

Two slow scalings are supported.  ``sqrt_eps`` (Case 1):
dx = g(x, y) dt + sqrt(eps) f(x, y) dB^H.  ``unit`` (Case 2):
dx = g(x, y) dt + f(x) dB^H.  In both the fast process runs on clock eps, or
on a separate clock delta < eps in the two-scale regime.

Per macro step the fast state is advanced with x frozen at the step start;
the slow drift (and the Case 1 fBM coefficient) enter through their average
over the micro states.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .fastproc import FastBlowUp, FastModel, initial_fast_state, micro_steps_for
from .fbm import TimeGrid, check_hurst, path_to_csv, sample_fbm_davies_harte_batch
from .integrate import GridMismatch, NonFiniteState
from .parallel import REPLICA_BLOCK, block_map
from .rng import array_checksum, substream

Array = np.ndarray
SCALINGS = ("sqrt_eps", "unit")
LIMIT_STREAM = 1


class UnderResolved(ValueError):
    pass


@dataclass(frozen=True)
class SlowFastSystem:
    """Slow coefficients, fast model and scaling.

    ``g(x, y) -> (B, n)``.  ``f`` is ``f(x, y) -> (B, n, d)`` under ``sqrt_eps`` and
    ``f(x) -> (B, n, d)`` under ``unit``.  ``gbar``/``fbar`` are optional analytic
    averages; ``g_box = (x_radius, y_radius, bound)`` turns on a boundedness check.
    """

    g: Callable[[Array, Array], Array]
    f: Callable
    fast: FastModel
    scaling: str
    n: int
    d: int
    hurst: float = 0.75
    gbar: Optional[Callable[[Array], Array]] = None
    fbar: Optional[Callable[[Array], Array]] = None
    g_box: Optional[tuple] = None
    name: str = ""

    def __post_init__(self):
        if self.scaling not in SCALINGS:
            raise ValueError(f"scaling must be one of {SCALINGS}")
        check_hurst(self.hurst)
        if self.g_box is not None:
            self.check_g_bounded(*self.g_box)

    @classmethod
    def case1(cls, g, f, fast, n, d, **kw) -> "SlowFastSystem":
        return cls(g, f, fast, "sqrt_eps", n, d, **kw)

    @classmethod
    def case2(cls, g, f, fast, n, d, **kw) -> "SlowFastSystem":
        return cls(g, f, fast, "unit", n, d, **kw)

    @property
    def m(self) -> int:
        return self.fast.m

    @property
    def e(self) -> int:
        return self.fast.e

    def check_g_bounded(self, x_radius: float, y_radius: float, bound: float, points: int = 9) -> None:
        axes_x = [np.linspace(-x_radius, x_radius, points)] * self.n
        axes_y = [np.linspace(-y_radius, y_radius, points)] * self.m
        mesh = np.stack(np.meshgrid(*(axes_x + axes_y), indexing="ij"), -1).reshape(-1, self.n + self.m)
        val = float(np.max(np.abs(self.g(mesh[:, : self.n], mesh[:, self.n :]))))
        if not val <= bound:
            raise AssertionError(f"|g| reaches {val:.3g} on the configured box, bound {bound:g}")

    def f_slow(self, x: Array) -> Array:
        if self.scaling != "unit":
            raise TypeError("f depends on y under the sqrt_eps scaling")
        return self.f(x)


@dataclass(frozen=True)
class TwoScaleConfig:
    eps: float
    delta: Optional[float] = None

    def __post_init__(self):
        if not 0.0 < self.eps <= 1.0:
            raise ValueError(f"eps must lie in (0, 1], got {self.eps}")
        # delta == eps is accepted as the control run of the two-scale experiment
        if self.delta is not None and not 0.0 < self.delta <= self.eps:
            raise ValueError(f"delta must satisfy 0 < delta < eps, got delta={self.delta}, eps={self.eps}")

    @property
    def fast_clock(self) -> float:
        return self.eps if self.delta is None else self.delta

    @property
    def ratio(self) -> float:
        return self.fast_clock / self.eps

    def to_dict(self) -> dict:
        return {"eps": self.eps, "delta": self.delta, "delta_over_eps": self.ratio}


@dataclass(frozen=True)
class SlowFastTrajectory:
    """Batch of replicas on the macro grid: x (B, n+1, n), y (B, n+1, m), B^H (B, n+1, d).

    ``martingale`` (B, n+1, n), when recorded, is the running sum of
    D_y Psi sigma dW over the micro steps, on the original time clock.
    """

    grid: TimeGrid
    x: Array = field(repr=False)
    y: Array = field(repr=False)
    bh: Array = field(repr=False)
    martingale: Optional[Array] = field(repr=False, default=None)
    config: dict = field(default_factory=dict)

    @property
    def replicas(self) -> int:
        return self.x.shape[0]

    def checksums(self) -> dict:
        out = {"bh": array_checksum(self.bh), "x": array_checksum(self.x), "y": array_checksum(self.y)}
        if self.martingale is not None:
            out["martingale"] = array_checksum(self.martingale)
        return out

    def to_csv(self, replica: int = 0) -> str:
        vals = np.concatenate([self.x[replica], self.y[replica]], axis=1)
        names = [f"x{i}" for i in range(self.x.shape[2])] + [f"y{i}" for i in range(self.y.shape[2])]
        return path_to_csv(self.grid.points, vals, names=names)

    def sidecar(self) -> dict:
        return {"config": self.config, "grid": self.grid.to_dict(), "replicas": self.replicas,
                "checksums": self.checksums()}

    def sidecar_json(self) -> str:
        return json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n"


def replica_keys(count: int, start: int = 0) -> list:
    """Flat keys i -> (fbm key (i,), fast key (i,))."""
    return [((i,), (i,)) for i in range(start, start + count)]


def nested_keys(n_outer: int, n_inner: int) -> list:
    """Outer B^H index o shared by inner W indices j: (fbm key (o,), fast key (o, j))."""
    return [((o,), (o, j)) for o in range(n_outer) for j in range(n_inner)]


def sample_bh(grid: TimeGrid, hurst: float, d: int, seed: int, fbm_keys: Sequence[tuple]) -> Array:
    """fBM paths (B, n+1, d), one 'fbm' substream per key; identical across eps for equal keys."""
    return sample_fbm_davies_harte_batch(grid, hurst, d, [substream(seed, "fbm", *k) for k in fbm_keys])


def _simulate_block(system: SlowFastSystem, cfg: TwoScaleConfig, grid: TimeGrid, seed: int, keys: list,
                    x0: Array, y0, c_micro: float, dpsi_dy, bh: Optional[Array]) -> dict:
    batch = len(keys)
    if bh is None:
        bh = sample_bh(grid, system.hurst, system.d, seed, [k[0] for k in keys])
    dbh = np.diff(bh, axis=1)
    fast = system.fast
    eps_f = cfg.fast_clock
    k = micro_steps_for(grid.dt, eps_f, c_micro)
    h = grid.dt / k
    hf = h / eps_f
    sq_h = math.sqrt(h)
    fast_rngs = [substream(seed, "fast", *key[1]) for key in keys]
    init_rngs = [substream(seed, "init", *key[1]) for key in keys]
    x = np.repeat(np.asarray(x0, dtype=float).reshape(1, system.n), batch, 0)
    y = initial_fast_state(fast, x[0], y0, init_rngs)
    n_steps = grid.n
    xs = np.empty((batch, n_steps + 1, system.n))
    ys = np.empty((batch, n_steps + 1, fast.m))
    xs[:, 0], ys[:, 0] = x, y
    mart = None
    if dpsi_dy is not None:
        mart = np.zeros((batch, n_steps + 1, system.n))
    amp = math.sqrt(cfg.eps) if system.scaling == "sqrt_eps" else 1.0
    sig_t = None if fast.sigma_const is None else fast.sigma_const.T * math.sqrt(hf)
    case1 = system.scaling == "sqrt_eps"
    for i in range(n_steps):
        noise = np.stack([r.standard_normal((k, fast.e)) for r in fast_rngs])
        g_acc = np.zeros((batch, system.n))
        f_acc = np.zeros((batch, system.n, system.d)) if case1 else None
        m_acc = np.zeros((batch, system.n)) if mart is not None else None
        for j in range(k):
            g_acc += system.g(x, y)
            if case1:
                f_acc += system.f(x, y)
            xi = noise[:, j]
            if sig_t is not None:
                sig = None
                kick = xi @ sig_t
            else:
                sig = fast.diffusion(x, y)
                kick = np.einsum("bme,be->bm", sig, xi) * math.sqrt(hf)
            if m_acc is not None:
                sig_m = fast.diffusion(x, y) if sig is None else sig
                m_acc += np.einsum("bnm,bme,be->bn", dpsi_dy(x, y), sig_m, xi) * sq_h
            y = y + fast.drift(x, y) * hf + kick
        peak = float(np.max(np.abs(y)))
        if not np.isfinite(peak) or peak > fast.y_bound:
            raise FastBlowUp((i + 1) * k, peak, fast.y_bound)
        fcoef = f_acc / k if case1 else system.f(x)
        x = x + g_acc * (grid.dt / k) + amp * np.einsum("bnd,bd->bn", fcoef, dbh[:, i])
        if not np.all(np.isfinite(x)):
            raise NonFiniteState(i + 1)
        xs[:, i + 1], ys[:, i + 1] = x, y
        if mart is not None:
            mart[:, i + 1] = mart[:, i] + m_acc
    return {"x": xs, "y": ys, "bh": bh, "martingale": mart}


def simulate_slow_fast(
    system: SlowFastSystem,
    cfg: TwoScaleConfig,
    grid: TimeGrid,
    seed: int,
    keys: Sequence,
    x0,
    y0=0.0,
    c_micro: float = 0.1,
    dpsi_dy: Optional[Callable[[Array, Array], Array]] = None,
    bh: Optional[Array] = None,
    jobs: int = 1,
    block: int = REPLICA_BLOCK,
) -> SlowFastTrajectory:
    """Coupled Euler trajectories for the replica ``keys``.

    Each macro step advances y over k = ceil(dt / (c_micro * clock)) Euler
    micro steps with x frozen, then sets
    x += dt * mean_j g(x, y_j) + a(eps) * F * dB^H with F the micro-averaged
    f(x, y_j) (Case 1) or f(x) (Case 2).  ``bh`` replaces the sampled fBM when
    given (B, n+1, d).  Passing ``dpsi_dy`` records the fast martingale.
    """
    if not 0.0 < c_micro <= 0.5:
        raise UnderResolved(f"micro-step factor {c_micro} leaves the fast scale under-resolved (need <= 0.5)")
    keys = [k if isinstance(k[0], tuple) else ((k,), (k,)) for k in keys]
    if len(keys) == 0:
        raise ValueError("no replicas requested")

    if bh is not None:
        bh = np.asarray(bh, dtype=float)
        if bh.shape != (len(keys), grid.n + 1, system.d):
            raise GridMismatch(f"fBM array {bh.shape} does not match {len(keys)} replicas on the grid")

    def fn(idx):
        blk_bh = None if bh is None else bh[idx]
        return _simulate_block(system, cfg, grid, seed, [keys[i] for i in idx], x0, y0, c_micro, dpsi_dy, blk_bh)

    out = block_map(fn, range(len(keys)), jobs, block)
    conf = {"system": system.name, "scaling": system.scaling, "hurst": system.hurst, "seed": seed,
            "x0": np.asarray(x0, dtype=float).ravel().tolist(),
            "y0": y0 if isinstance(y0, str) else np.asarray(y0, dtype=float).ravel().tolist(),
            "c_micro": c_micro, "micro_steps": micro_steps_for(grid.dt, cfg.fast_clock, c_micro),
            **cfg.to_dict()}
    return SlowFastTrajectory(grid, out["x"], out["y"], out["bh"], out["martingale"], conf)


def simulate_two_scale(system: SlowFastSystem, eps: float, delta: float, grid: TimeGrid, seed: int, keys,
                       x0, y0=0.0, **kw) -> SlowFastTrajectory:
    """Case 2 slow dynamics with the fast clock on delta; z is still normalized by sqrt(eps)."""
    if system.scaling != "unit":
        raise ValueError("the two-scale regime uses the unit (Case 2) slow scaling")
    return simulate_slow_fast(system, TwoScaleConfig(eps, delta), grid, seed, keys, x0, y0, **kw)


def solve_averaged(system: SlowFastSystem, grid: TimeGrid, bh: Array, x0,
                   gbar: Optional[Callable[[Array], Array]] = None) -> Array:
    """Averaged path(s) on the grid, shape (B, n+1, n) for bh (B, n+1, d).

    Case 1 integrates dx = g_bar(x) dt (the same deterministic path for every
    replica); Case 2 adds f(x) dB^H with the very same B^H array.
    """
    gbar = gbar or system.gbar
    if gbar is None:
        raise ValueError("no averaged drift: supply gbar or an analytic system.gbar")
    bh = np.asarray(bh, dtype=float)
    if bh.ndim == 2:
        bh = bh[None]
    if bh.shape[1] != grid.n + 1:
        raise GridMismatch(f"fBM has {bh.shape[1]} points, grid has {grid.n + 1}")
    batch = bh.shape[0]
    x0 = np.asarray(x0, dtype=float).reshape(1, system.n)
    if system.scaling == "sqrt_eps":
        x = x0.copy()
        path = np.empty((1, grid.n + 1, system.n))
        path[:, 0] = x
        for i in range(grid.n):
            x = x + gbar(x) * grid.dt
            path[:, i + 1] = x
        return np.repeat(path, batch, 0)
    dbh = np.diff(bh, axis=1)
    x = np.repeat(x0, batch, 0)
    path = np.empty((batch, grid.n + 1, system.n))
    path[:, 0] = x
    for i in range(grid.n):
        x = x + gbar(x) * grid.dt + np.einsum("bnd,bd->bn", system.f(x), dbh[:, i])
        if not np.all(np.isfinite(x)):
            raise NonFiniteState(i + 1)
        path[:, i + 1] = x
    return path


def deviation(traj: SlowFastTrajectory, xbar: Array, eps: float) -> Array:
    """z = (x^eps - x_bar) / sqrt(eps), pointwise on the shared grid."""
    xbar = np.asarray(xbar, dtype=float)
    if xbar.shape != traj.x.shape:
        raise GridMismatch(f"averaged path {xbar.shape} vs trajectory {traj.x.shape}")
    return (traj.x - xbar) / math.sqrt(eps)
