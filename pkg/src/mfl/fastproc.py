"""The fast Ito process dy = (1/eps) b(x, y) dt + (1/sqrt(eps)) sigma(x, y) dW.

Includes the linear family b = -Gamma y + zeta(x, y) with its Gaussian
invariant law, micro-stepping kernels shared with the multiscale simulator,
and the moment / Holder-scaling diagnostics.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import expm, solve_continuous_lyapunov

from .fbm import TimeGrid, holder_seminorm_batch
from .rng import substream
from .stats import loglog_fit

log = logging.getLogger(__name__)

Array = np.ndarray


class FastBlowUp(FloatingPointError):
    def __init__(self, step: int, max_norm: float, bound: float):
        super().__init__(f"fast process left |y| <= {bound:g} at micro step {step} (max |y| = {max_norm:.3g})")
        self.step = step
        self.max_norm = max_norm


class LyapunovError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class FastModel:
    """Drift b(x, y) -> (B, m) and diffusion sigma(x, y) -> (B, m, e), batch-first.

    ``gamma``/``zeta`` record the decomposition b = -Gamma y + zeta(x, y) when it
    exists; ``sigma_const`` marks additive noise and enables exact OU transitions.
    """

    drift: Callable[[Array, Array], Array]
    diffusion: Callable[[Array, Array], Array]
    m: int
    e: int
    gamma: Optional[Array] = None
    zeta: Optional[Callable[[Array, Array], Array]] = None
    sigma_const: Optional[Array] = None
    y_bound: float = 1e8

    def __post_init__(self):
        if self.gamma is not None:
            g = np.atleast_2d(np.asarray(self.gamma, dtype=float))
            if g.shape != (self.m, self.m):
                raise ValueError(f"Gamma must be {self.m}x{self.m}, got {g.shape}")
            if np.min(np.linalg.eigvals(g).real) <= 0:
                raise ValueError("Gamma must be positive-stable (eigenvalues with positive real part)")
            object.__setattr__(self, "gamma", g)
        if self.sigma_const is not None:
            s = np.asarray(self.sigma_const, dtype=float).reshape(self.m, self.e)
            object.__setattr__(self, "sigma_const", s)

    @property
    def is_linear(self) -> bool:
        return self.gamma is not None

    @property
    def is_ou(self) -> bool:
        """Pure OU: linear drift, no remainder, additive noise."""
        return self.gamma is not None and self.zeta is None and self.sigma_const is not None

    @property
    def gamma_min(self) -> float:
        if self.gamma is None:
            raise ValueError("model has no linear part")
        return float(np.min(np.linalg.eigvals(self.gamma).real))


def _linear_drift(gamma, zeta, x, y):
    out = -y @ gamma.T
    if zeta is not None:
        out = out + zeta(x, y)
    return out


def _const_diffusion(sigma, x, y):
    return np.broadcast_to(sigma, (y.shape[0],) + sigma.shape)


def linear_fast_model(gamma, sigma, zeta=None, y_bound: float = 1e8) -> FastModel:
    """b = -Gamma y + zeta(x, y), constant sigma (m x e)."""
    from functools import partial

    gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
    m = gamma.shape[0]
    sigma = np.asarray(sigma, dtype=float).reshape(m, -1)
    return FastModel(
        drift=partial(_linear_drift, gamma, zeta),
        diffusion=partial(_const_diffusion, sigma),
        m=m,
        e=sigma.shape[1],
        gamma=gamma,
        zeta=zeta,
        sigma_const=sigma,
        y_bound=y_bound,
    )


def ou_model(gamma: float, sigma: float) -> FastModel:
    """Scalar OU dy = -gamma y dt + sigma dW (unscaled clock)."""
    return linear_fast_model([[gamma]], [[sigma]])


def dissipativity_violation(
    model: FastModel, beta1: float, const: float, xs: Array, ys: Array
) -> float:
    """max of <y, b(x,y)> - (-beta1|y|^2 + C|x|^2 + C) over the sampled pairs; <= 0 means the check holds."""
    xs = np.atleast_2d(xs)
    ys = np.atleast_2d(ys)
    lhs = np.einsum("bm,bm->b", ys, model.drift(xs, ys))
    rhs = -beta1 * (ys**2).sum(1) + const * (xs**2).sum(1) + const
    return float(np.max(lhs - rhs))


# ---------------------------------------------------------------------------
# OU invariant law
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OuParams:
    gamma: Array
    sigma: Array

    def __post_init__(self):
        g = np.atleast_2d(np.asarray(self.gamma, dtype=float))
        s = np.asarray(self.sigma, dtype=float).reshape(g.shape[0], -1)
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "sigma", s)


def ou_invariant_covariance(params: OuParams) -> Array:
    """Symmetric PSD solution of Gamma S + S Gamma^T = sigma sigma^T."""
    g, s = params.gamma, params.sigma
    if np.min(np.linalg.eigvals(g).real) <= 0:
        raise LyapunovError("Gamma must be positive-stable")
    q = s @ s.T
    try:
        sol = solve_continuous_lyapunov(g, q)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise LyapunovError(f"Lyapunov solve failed: {exc}") from exc
    sol = 0.5 * (sol + sol.T)
    resid = np.linalg.norm(g @ sol + sol @ g.T - q)
    if not np.isfinite(resid) or resid > 1e-8 * max(1.0, np.linalg.norm(q)):
        raise LyapunovError(f"Lyapunov residual {resid:.3g} too large (ill-conditioned Gamma?)")
    if np.min(np.linalg.eigvalsh(sol)) < -1e-12 * max(1.0, np.trace(sol)):
        raise LyapunovError("Lyapunov solution is not PSD")
    return sol


def _psd_sqrt(mat: Array) -> Array:
    w, v = np.linalg.eigh(0.5 * (mat + mat.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


@lru_cache(maxsize=128)
def _ou_transition_cached(gamma_bytes: bytes, sigma_bytes: bytes, m: int, tau: float):
    g = np.frombuffer(gamma_bytes).reshape(m, m)
    s = np.frombuffer(sigma_bytes).reshape(m, -1)
    sinf = ou_invariant_covariance(OuParams(g, s))
    a = expm(-g * tau)
    cov = sinf - a @ sinf @ a.T
    return a, _psd_sqrt(cov), _psd_sqrt(sinf)


def ou_transition(gamma: Array, sigma: Array, tau: float):
    """(e^{-Gamma tau}, sqrt of transition covariance, sqrt of Sigma_inf) on the unscaled clock."""
    g = np.ascontiguousarray(np.atleast_2d(gamma), dtype=float)
    s = np.ascontiguousarray(np.asarray(sigma, dtype=float).reshape(g.shape[0], -1))
    return _ou_transition_cached(g.tobytes(), s.tobytes(), g.shape[0], float(tau))


def invariant_mean(model: FastModel, x: Array) -> Array:
    """Mean of the invariant law for the linear family with zeta depending on x only."""
    x = np.atleast_2d(x)
    if model.zeta is None:
        return np.zeros((x.shape[0], model.m))
    z = model.zeta(x, np.zeros((x.shape[0], model.m)))
    return np.linalg.solve(model.gamma, z.T).T


def sample_invariant(model: FastModel, x: Array, rng: np.random.Generator, size: int) -> Array:
    """Exact Gaussian draws from mu^x for the linear additive-noise family."""
    if model.gamma is None or model.sigma_const is None:
        raise ValueError("exact invariant sampling needs a linear model with constant sigma")
    root = ou_transition(model.gamma, model.sigma_const, 1.0)[2]
    mean = invariant_mean(model, np.atleast_2d(x))[0]
    return mean + rng.standard_normal((size, model.m)) @ root.T


# ---------------------------------------------------------------------------
# Micro stepping
# ---------------------------------------------------------------------------


def micro_steps_for(dt_macro: float, eps: float, c_micro: float = 0.1) -> int:
    return max(1, int(math.ceil(dt_macro / (c_micro * eps) - 1e-9)))


def noise_shape(model: FastModel, method: str, k: int) -> tuple[int, int]:
    return (k, model.m if method == "exp" else model.e)


def advance_fast(
    model: FastModel,
    x: Array,
    y: Array,
    eps: float,
    h: float,
    noise: Array,
    method: str = "euler",
    keep: bool = True,
    step_offset: int = 0,
) -> Array:
    """Advance y (B, m) through k micro steps of size h with x frozen.

    ``noise`` holds standard normals of shape (B, k, e) for Euler or (B, k, m)
    for the exponential integrator.  Returns micro states (B, k+1, m) if
    ``keep`` else only the final state.
    """
    k = noise.shape[1]
    states = np.empty((y.shape[0], k + 1, model.m)) if keep else None
    if keep:
        states[:, 0] = y
    if method == "exp":
        if model.gamma is None or model.sigma_const is None:
            raise ValueError("exponential integrator needs a linear model with constant sigma")
        a, root, _ = ou_transition(model.gamma, model.sigma_const, h / eps)
        at = a.T
        rt = root.T
        if model.zeta is not None:
            phi = np.linalg.solve(model.gamma, np.eye(model.m) - a)
            phit = phi.T
        for j in range(k):
            y_new = y @ at + noise[:, j] @ rt
            if model.zeta is not None:
                y_new = y_new + model.zeta(x, y) @ phit
            y = y_new
            if keep:
                states[:, j + 1] = y
    elif method == "euler":
        dt_fast = h / eps
        sq = math.sqrt(dt_fast)
        if model.sigma_const is not None:
            sig_t = model.sigma_const.T * sq
            for j in range(k):
                y = y + model.drift(x, y) * dt_fast + noise[:, j] @ sig_t
                if keep:
                    states[:, j + 1] = y
        else:
            for j in range(k):
                y = y + model.drift(x, y) * dt_fast + np.einsum("bme,be->bm", model.diffusion(x, y), noise[:, j]) * sq
                if keep:
                    states[:, j + 1] = y
    else:
        raise ValueError(f"unknown fast integrator {method!r}")
    final = states[:, -1] if keep else y
    peak = float(np.max(np.abs(final))) if final.size else 0.0
    if not np.isfinite(peak) or peak > model.y_bound:
        raise FastBlowUp(step_offset + k, peak, model.y_bound)
    return states if keep else y


def initial_fast_state(model: FastModel, x0: Array, y0, rngs: Sequence[np.random.Generator]) -> Array:
    """y0 may be an array (broadcast to all replicas) or 'stationary' (exact mu^x draws)."""
    batch = len(rngs)
    if isinstance(y0, str):
        if y0 != "stationary":
            raise ValueError(f"unknown initial condition {y0!r}")
        return np.stack([sample_invariant(model, x0, rng, 1)[0] for rng in rngs])
    y0 = np.asarray(y0, dtype=float).reshape(1, model.m)
    return np.repeat(y0, batch, axis=0)


def simulate_fast_batch(
    model: FastModel,
    x_input: Array,
    eps: float,
    grid: TimeGrid,
    streams: Sequence[np.random.Generator],
    y0=0.0,
    method: str = "euler",
    c_micro: float = 0.1,
    init_streams: Optional[Sequence[np.random.Generator]] = None,
) -> Array:
    """Fast paths on the macro grid for a batch of W substreams, shape (B, n+1, m).

    x_input is a frozen point (n_slow,) or a slow path (n+1, n_slow) held fixed
    over each macro step.  Micro steps follow h <= c_micro * eps except for the
    exact OU transition, which needs one step per macro interval.
    """
    x_in = np.asarray(x_input, dtype=float)
    frozen = x_in.ndim <= 1
    x_frozen = np.atleast_1d(x_in)[None] if frozen else None
    batch = len(streams)
    y = initial_fast_state(model, x_frozen[0] if frozen else x_in[0], y0, init_streams or streams)
    k = 1 if (method == "exp" and model.is_ou) else micro_steps_for(grid.dt, eps, c_micro)
    h = grid.dt / k
    out = np.empty((batch, grid.n + 1, model.m))
    out[:, 0] = y
    shape = noise_shape(model, method, k)
    for i in range(grid.n):
        x = np.repeat(x_frozen if frozen else x_in[i][None], batch, axis=0)
        noise = np.stack([rng.standard_normal(shape) for rng in streams])
        y = advance_fast(model, x, y, eps, h, noise, method, keep=False, step_offset=i * k)
        out[:, i + 1] = y
    return out


def simulate_fast(
    model: FastModel,
    x_input: Array,
    eps: float,
    grid: TimeGrid,
    w_stream: np.random.Generator,
    y0=0.0,
    method: str = "euler",
    c_micro: float = 0.1,
) -> Array:
    """Single fast path y^eps on the macro grid, shape (n+1, m)."""
    return simulate_fast_batch(model, x_input, eps, grid, [w_stream], y0, method, c_micro)[0]


# ---------------------------------------------------------------------------
# Moment and Holder-scaling diagnostics
# ---------------------------------------------------------------------------


@dataclass
class DiagnosticTable:
    rows: list = field(default_factory=list)
    verdicts: dict = field(default_factory=dict)
    sup_rows: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"rows": self.rows, "sup_norm_rows": self.sup_rows, "verdicts": self.verdicts}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["eps", "p", "theta", "estimate", "stderr"])
        for r in self.rows:
            theta = "" if r.get("theta") is None else format(r["theta"], ".17g")
            w.writerow([format(r["eps"], ".17g"), format(r["p"], ".17g"), theta,
                        format(r["estimate"], ".17g"), format(r["stderr"], ".17g")])
        return buf.getvalue()


def _ensemble(model, x_frozen, eps, grid, n_mc, seed, y0, method, c_micro, eps_index):
    streams = [substream(seed, "fast", eps_index, r) for r in range(n_mc)]
    inits = [substream(seed, "init", eps_index, r) for r in range(n_mc)]
    return simulate_fast_batch(model, x_frozen, eps, grid, streams, y0, method, c_micro, inits)


def check_moment_bound(
    model: FastModel,
    eps_list: Sequence[float],
    p: float,
    grid: TimeGrid,
    n_mc: int,
    seed: int,
    x_frozen=0.0,
    y0=0.0,
    method: str = "euler",
    c_micro: float = 0.1,
    flat_factor: float = 2.0,
) -> DiagnosticTable:
    """sup_t E|y_t^eps|^p per eps, with a flatness verdict max/min < flat_factor."""
    table = DiagnosticTable()
    for k, eps in enumerate(eps_list):
        paths = _ensemble(model, x_frozen, eps, grid, n_mc, seed, y0, method, c_micro, k)
        mom = np.linalg.norm(paths, axis=-1) ** p
        means = mom.mean(0)
        i = int(np.argmax(means))
        se = float(mom[:, i].std(ddof=1) / math.sqrt(n_mc))
        table.rows.append({"eps": float(eps), "p": float(p), "theta": None, "estimate": float(means[i]), "stderr": se})
    est = np.array([r["estimate"] for r in table.rows])
    ratio = 1.0 if np.all(est == 0) else (float(est.max() / est.min()) if est.min() > 0 else math.inf)
    table.verdicts = {"ratio": ratio, "threshold": flat_factor, "n_mc": n_mc, "flat": ratio < flat_factor}
    return table


def check_holder_bound(
    model: FastModel,
    eps_list: Sequence[float],
    theta: float,
    p: float,
    grid: TimeGrid,
    n_mc: int,
    seed: int,
    x_frozen=0.0,
    y0=0.0,
    method: str = "euler",
    c_micro: float = 0.1,
    flat_factor: float = 2.0,
) -> DiagnosticTable:
    """Slope of log E||y^eps||_theta^p against log eps; PASS inside -p/2 +- 0.3p.

    The pathwise sup-norm moments E||y^eps||_inf^p are reported alongside in
    ``sup_rows`` with their max/min ratio.  They are informational: for an OU
    fast process the running maximum over [0, T] grows like log(T/eps).
    """
    if not 0 < theta < 0.5:
        raise ValueError(f"theta must lie in (0, 1/2), got {theta}")
    per_unit = grid.n / grid.horizon
    if per_unit * min(eps_list) < 10:
        raise ValueError(
            f"grid under-resolves the fastest scale: n/T * eps_min = {per_unit * min(eps_list):.3g} < 10"
        )
    table = DiagnosticTable()
    sup_rows = []
    for k, eps in enumerate(eps_list):
        paths = _ensemble(model, x_frozen, eps, grid, n_mc, seed, y0, method, c_micro, k)
        hold = holder_seminorm_batch(paths, grid.dt, theta, cap=max(grid.n, 4096)) ** p
        sup = np.linalg.norm(paths, axis=-1).max(axis=1) ** p
        table.rows.append({"eps": float(eps), "p": float(p), "theta": float(theta),
                           "estimate": float(hold.mean()), "stderr": float(hold.std(ddof=1) / math.sqrt(n_mc))})
        sup_rows.append({"eps": float(eps), "p": float(p), "theta": None,
                         "estimate": float(sup.mean()), "stderr": float(sup.std(ddof=1) / math.sqrt(n_mc))})
    est = np.array([r["estimate"] for r in table.rows])
    lo, hi = -p / 2 - 0.3 * p, -p / 2 + 0.3 * p
    verdicts = {"band": [lo, hi], "n_mc": n_mc}
    if np.any(est <= 0):
        verdicts.update({"slope": None, "degenerate": True, "pass": False})
    else:
        fit = loglog_fit(eps_list, est)
        verdicts.update({"slope": fit.slope, "ci": list(fit.ci), "r2": fit.r2, "degenerate": False,
                         "nonnegative_slope": fit.slope >= 0, "pass": lo <= fit.slope <= hi})
    sup_est = np.array([r["estimate"] for r in sup_rows])
    if np.all(sup_est == 0):
        sup_ratio = 1.0
    else:
        sup_ratio = float(sup_est.max() / sup_est.min()) if sup_est.min() > 0 else math.inf
    verdicts["sup_ratio"] = sup_ratio
    verdicts["sup_flat"] = sup_ratio < flat_factor
    table.sup_rows = sup_rows
    table.verdicts = verdicts
    return table
