"""Cell (Poisson) problem -L^x Psi = g_hat and the effective coefficients built from it.

Effective coefficients are expectations under the invariant law mu^x of the
fast process with x frozen.  The corrector is either closed form (linear
family) or a Monte Carlo time integral of the semigroup, tabulated on a
y-grid when derivatives are needed.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .fastproc import FastModel, ou_transition, sample_invariant
from .rng import DEFAULT_SEED, substream
from .stats import _jsonable

log = logging.getLogger(__name__)

Array = np.ndarray
BLOCK = 4096


class NonConvergence(RuntimeError):
    pass


class SlowMixingWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    """How to draw from mu^x: 'exact' Gaussian (linear, additive noise), 'ergodic' time averages, or 'auto'."""

    method: str = "auto"
    n_samples: int = 200_000
    seed: int = DEFAULT_SEED
    dt: float = 0.01
    n_chains: int = 256
    burn_in: Optional[float] = None
    se_tol: Optional[float] = None


@dataclass(frozen=True)
class Estimate:
    value: Array
    stderr: Array

    def to_dict(self) -> dict:
        return {"value": np.asarray(self.value).tolist(), "stderr": np.asarray(self.stderr).tolist()}


def _exact_ok(model: FastModel) -> bool:
    return model.gamma is not None and model.sigma_const is not None and model.zeta is None


def _fast_step(model: FastModel, x: Array, y: Array, dt: float, z: Array) -> Array:
    """One step of the unscaled fast dynamics; exact for pure OU, Euler otherwise."""
    if model.is_ou:
        a, root, _ = ou_transition(model.gamma, model.sigma_const, dt)
        return y @ a.T + z[:, : model.m] @ root.T
    sig = model.diffusion(x, y)
    return y + model.drift(x, y) * dt + np.einsum("bme,be->bm", sig, z[:, : model.e]) * math.sqrt(dt)


def _noise_dim(model: FastModel) -> int:
    return max(model.m, model.e)


def invariant_expectation(
    fn: Callable[[Array, Array], Array], model: FastModel, x, cfg: SamplerConfig = SamplerConfig()
) -> Estimate:
    """E_mu^x[fn(x, Y)] with standard error.

    Exact draws give the plain sample SE; the ergodic route uses independent
    chains after burn-in and reports the SE of chain time-averages.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    method = cfg.method
    if method == "auto":
        method = "exact" if _exact_ok(model) else "ergodic"
    if method == "exact":
        if not _exact_ok(model):
            raise ValueError("exact invariant sampling needs the linear additive-noise family with zeta = 0")
        vals = []
        for b, start in enumerate(range(0, cfg.n_samples, BLOCK)):
            size = min(BLOCK, cfg.n_samples - start)
            ys = sample_invariant(model, x, substream(cfg.seed, "cell", 0, b), size)
            vals.append(np.asarray(fn(np.repeat(x[None], size, 0), ys), dtype=float))
        vals = np.concatenate(vals)
        est = Estimate(vals.mean(0), vals.std(0, ddof=1) / math.sqrt(vals.shape[0]))
    elif method == "ergodic":
        est = _ergodic_average(fn, model, x, cfg)
    else:
        raise ValueError(f"unknown sampler {cfg.method!r}")
    if cfg.se_tol is not None and np.max(est.stderr) > cfg.se_tol:
        raise NonConvergence(f"ergodic average SE {np.max(est.stderr):.3g} above tolerance {cfg.se_tol:.3g}")
    return est


def _ergodic_average(fn, model, x, cfg):
    chains = cfg.n_chains
    steps = max(1, cfg.n_samples // chains)
    burn = cfg.burn_in
    if burn is None:
        burn = 5.0 / model.gamma_min if model.gamma is not None else 10.0
    n_burn = int(math.ceil(burn / cfg.dt))
    rng = substream(cfg.seed, "cell", 1, 0)
    xs = np.repeat(x[None], chains, 0)
    y = np.zeros((chains, model.m))
    k = _noise_dim(model)
    for _ in range(n_burn):
        y = _fast_step(model, xs, y, cfg.dt, rng.standard_normal((chains, k)))
    total = None
    for _ in range(steps):
        v = np.asarray(fn(xs, y), dtype=float)
        total = v if total is None else total + v
        y = _fast_step(model, xs, y, cfg.dt, rng.standard_normal((chains, k)))
    chain_means = total / steps
    return Estimate(chain_means.mean(0), chain_means.std(0, ddof=1) / math.sqrt(chains))


def effective_drift(g, model: FastModel, x, cfg: SamplerConfig = SamplerConfig()) -> Estimate:
    """g_bar(x) = int g(x, y) mu^x(dy)."""
    return invariant_expectation(g, model, x, cfg)


def effective_fbm_coeff(f, model: FastModel, x, cfg: SamplerConfig = SamplerConfig()) -> Estimate:
    """f_bar(x) = int f(x, y) mu^x(dy); f returns (B, n, d)."""
    return invariant_expectation(f, model, x, cfg)


def effective_drift_jacobian(gbar: Callable[[Array], Array], x, rel_step: float = 1e-4) -> Array:
    """Central-difference Jacobian of a (deterministic) averaged drift, step 1e-4 (1 + |x|)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = x.size
    jac = np.empty((n, n))
    for j in range(n):
        h = rel_step * (1.0 + abs(x[j]))
        e = np.zeros(n)
        e[j] = h
        jac[:, j] = (np.asarray(gbar((x + e)[None]))[0] - np.asarray(gbar((x - e)[None]))[0]) / (2 * h)
    return jac


# ---------------------------------------------------------------------------
# Cell problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CellProblem:
    """Centered target g_hat(x, y) = g(x, y) - g_bar(x) at a frozen slow point x."""

    x: Array
    g: Callable[[Array, Array], Array]
    model: FastModel
    gbar: Estimate

    @classmethod
    def build(cls, g, model: FastModel, x, cfg: SamplerConfig = SamplerConfig(), gbar=None) -> "CellProblem":
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if gbar is None:
            gbar = effective_drift(g, model, x, cfg)
        elif not isinstance(gbar, Estimate):
            gbar = Estimate(np.atleast_1d(np.asarray(gbar, dtype=float)), np.zeros(np.size(gbar)))
        return cls(x, g, model, gbar)

    def g_hat(self, x: Array, y: Array) -> Array:
        return np.asarray(self.g(x, y), dtype=float) - self.gbar.value

    @property
    def n(self) -> int:
        return int(np.size(self.gbar.value))


@dataclass(frozen=True)
class DecayFit:
    C: float
    c: float
    r2: float
    skipped: bool
    times: Array = field(repr=False, default=None)
    deviation: Array = field(repr=False, default=None)

    @property
    def exponential(self) -> bool:
        return self.skipped or self.r2 >= 0.9

    def to_dict(self) -> dict:
        return {"C": self.C, "c": self.c, "r2": self.r2, "skipped": self.skipped}


def _simulate_means(model, x, y0, u, times_n, dt, n_mc, seed, tag_index):
    """Running mean and SE of u(Y_t) over n_mc paths from y0 at t = 0, dt, ..., times_n*dt."""
    x = np.atleast_1d(x)
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    sums = None
    sq = None
    k = _noise_dim(model)
    for b, start in enumerate(range(0, n_mc, BLOCK)):
        size = min(BLOCK, n_mc - start)
        rng = substream(seed, "cell", tag_index, b)
        xs = np.repeat(x[None], size, 0)
        y = np.repeat(y0[None], size, 0)
        vals = np.empty((times_n + 1, size))
        vals[0] = u(y)
        for i in range(times_n):
            y = _fast_step(model, xs, y, dt, rng.standard_normal((size, k)))
            vals[i + 1] = u(y)
        s, q = vals.sum(1), (vals**2).sum(1)
        sums = s if sums is None else sums + s
        sq = q if sq is None else sq + q
    mean = sums / n_mc
    var = np.maximum(sq / n_mc - mean**2, 0.0) * n_mc / max(n_mc - 1, 1)
    return mean, np.sqrt(var / n_mc)


def ergodic_decay_check(
    model: FastModel,
    x,
    u: Callable[[Array], Array],
    y0,
    horizon: float = 4.0,
    dt: float = 0.02,
    n_mc: int = 20_000,
    seed: int = DEFAULT_SEED,
    cfg: SamplerConfig = SamplerConfig(),
    min_snr: float = 5.0,
) -> DecayFit:
    """Fit |E u(Y_t) - int u dmu| ~ C exp(-c t) on the times where the signal exceeds min_snr SEs."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    limit = invariant_expectation(lambda xx, yy: u(yy), model, x, cfg)
    steps = int(round(horizon / dt))
    mean, se = _simulate_means(model, x, y0, u, steps, dt, n_mc, seed, 2)
    dev = mean - float(limit.value)
    tot_se = np.sqrt(se**2 + float(limit.stderr) ** 2)
    times = np.arange(steps + 1) * dt
    if np.all(np.abs(dev) <= min_snr * np.maximum(tot_se, 1e-300)) or np.ptp(mean) == 0.0:
        return DecayFit(0.0, 0.0, 1.0, True, times, dev)
    # keep the leading stretch where the signal dominates the noise
    good = np.abs(dev) > min_snr * tot_se
    stop = int(np.argmin(good)) if not good.all() else good.size
    if stop < 3:
        return DecayFit(0.0, 0.0, 0.0, False, times, dev)
    t_fit, d_fit = times[:stop], np.log(np.abs(dev[:stop]))
    coef = np.polyfit(t_fit, d_fit, 1)
    resid = d_fit - np.polyval(coef, t_fit)
    ss = float(((d_fit - d_fit.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss if ss > 0 else 1.0
    fit = DecayFit(float(math.exp(coef[1])), float(-coef[0]), r2, False, times, dev)
    if not fit.exponential:
        warnings.warn(f"non-exponential decay: R^2 = {r2:.3f} < 0.9", SlowMixingWarning, stacklevel=2)
    return fit


@dataclass(frozen=True)
class PsiEstimate:
    point: Array
    value: Array
    stderr: Array
    bias_bound: float
    t_max: float
    decay: DecayFit

    def to_dict(self) -> dict:
        return {"point": np.asarray(self.point).tolist(), "value": np.asarray(self.value).tolist(),
                "stderr": np.asarray(self.stderr).tolist(), "bias_bound": self.bias_bound, "t_max": self.t_max}


def solve_cell_mc(
    problem: CellProblem,
    y,
    t_max: Optional[float] = None,
    n_paths: int = 100_000,
    dt: float = 0.01,
    seed: int = DEFAULT_SEED,
    decay: Optional[DecayFit] = None,
    pilot_paths: int = 8192,
) -> PsiEstimate:
    """Psi(x, y) = int_0^t_max E[g_hat(x, Y_t) | Y_0 = y] dt by Monte Carlo, trapezoid rule in time.

    Without an explicit t_max a pilot decay fit on g_hat (or on |y| when g_hat
    shows no transient from y) sets t_max = 8 / c.  The reported stderr covers
    path noise and the propagated centering error; bias_bound is the fitted
    exponential tail C exp(-c t_max) / c.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    x = problem.x
    u_hat = lambda yy: problem.g_hat(np.repeat(x[None], yy.shape[0], 0), yy).sum(axis=1)
    if decay is None and t_max is None:
        decay = ergodic_decay_check(problem.model, x, u_hat, y, n_mc=pilot_paths, seed=seed,
                                    horizon=_pilot_horizon(problem.model))
        if decay.skipped or decay.c <= 0:
            decay = ergodic_decay_check(problem.model, x, lambda yy: np.abs(yy).sum(1), y + 1.0,
                                        n_mc=pilot_paths, seed=seed, horizon=_pilot_horizon(problem.model))
            decay = DecayFit(0.0, decay.c, decay.r2, decay.skipped, decay.times, decay.deviation)
    if t_max is None:
        if decay.c <= 0:
            raise NonConvergence("could not measure a mixing rate to choose t_max")
        t_max = 8.0 / decay.c
    steps = int(round(t_max / dt))
    n = problem.n
    k = _noise_dim(problem.model)
    integrals = []
    for b, start in enumerate(range(0, n_paths, BLOCK)):
        size = min(BLOCK, n_paths - start)
        rng = substream(seed, "cell", 3, b)
        xs = np.repeat(x[None], size, 0)
        yy = np.repeat(y[None], size, 0)
        acc = 0.5 * dt * problem.g_hat(xs, yy)
        for i in range(steps):
            yy = _fast_step(problem.model, xs, yy, dt, rng.standard_normal((size, k)))
            acc += (0.5 if i == steps - 1 else 1.0) * dt * problem.g_hat(xs, yy)
        integrals.append(acc)
    integrals = np.concatenate(integrals)
    value = integrals.mean(0)
    se_path = integrals.std(0, ddof=1) / math.sqrt(n_paths)
    se = np.sqrt(se_path**2 + (problem.gbar.stderr * t_max) ** 2)
    bias = 0.0
    if decay is not None and decay.c > 0:
        bias = decay.C * math.exp(-decay.c * t_max) / decay.c
    return PsiEstimate(y, value, se, float(bias), float(t_max), decay)


def _pilot_horizon(model: FastModel) -> float:
    return 4.0 / model.gamma_min if model.gamma is not None else 8.0


# ---------------------------------------------------------------------------
# Correctors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Corrector:
    """Psi(x, y) -> (B, n) and D_y Psi(x, y) -> (B, n, m); batch-first callables."""

    psi: Callable[[Array, Array], Array]
    dpsi_dy: Callable[[Array, Array], Array]
    kind: str = "analytic"
    fd_step: Optional[float] = None
    y_range: Optional[tuple] = None

    def dpsi_dx(self, x: Array, y: Array, rel_step: float = 1e-4) -> Array:
        x = np.atleast_2d(x)
        base = self.psi(x, y)
        out = np.empty(base.shape + (x.shape[1],))
        for j in range(x.shape[1]):
            h = rel_step * (1.0 + np.abs(x[:, j]))
            e = np.zeros_like(x)
            e[:, j] = h
            out[..., j] = (self.psi(x + e, y) - self.psi(x - e, y)) / (2.0 * h[:, None])
        return out


def _lin_psi(mat, x, y):
    return y @ mat.T


def _lin_dpsi(mat, x, y):
    return np.broadcast_to(mat, (y.shape[0],) + mat.shape)


def solve_cell_analytic_linear(coeff: Array, model: FastModel) -> Corrector:
    """Closed-form corrector for g_hat(x, y) = C y with b = -Gamma y: Psi = C Gamma^{-1} y."""
    from functools import partial

    if model.gamma is None or model.zeta is not None:
        raise ValueError("analytic corrector needs b = -Gamma y (zeta = 0)")
    coeff = np.atleast_2d(np.asarray(coeff, dtype=float))
    if abs(np.linalg.det(model.gamma)) < 1e-14:
        raise np.linalg.LinAlgError("Gamma is singular")
    mat = np.linalg.solve(model.gamma.T, coeff.T).T
    return Corrector(partial(_lin_psi, mat), partial(_lin_dpsi, mat), "analytic")


def tabulate_corrector(
    problem: CellProblem,
    y_axes: Sequence[Array],
    n_paths: int = 20_000,
    dt: float = 0.01,
    seed: int = DEFAULT_SEED,
    t_max: Optional[float] = None,
) -> tuple[Corrector, list[PsiEstimate]]:
    """Monte Carlo corrector on a tensor y-grid (m <= 2), linear interpolation, central FD derivatives.

    All grid points share one seed (common random numbers), which keeps the
    finite-difference derivatives smooth.
    """
    m = problem.model.m
    if m > 2 or len(y_axes) != m:
        raise ValueError("tabulation supports m <= 2 with one axis per fast dimension")
    axes = [np.asarray(a, dtype=float) for a in y_axes]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, m)
    first = solve_cell_mc(problem, mesh[0], t_max, n_paths, dt, seed)
    t_max = first.t_max
    ests = [first] + [solve_cell_mc(problem, p, t_max, n_paths, dt, seed, decay=first.decay) for p in mesh[1:]]
    table = np.stack([e.value for e in ests]).reshape(*[a.size for a in axes], problem.n)
    interp = RegularGridInterpolator(axes, table, bounds_error=True)
    steps = [float(np.min(np.diff(a))) for a in axes]

    def psi(x, y):
        return interp(np.atleast_2d(y))

    def dpsi(x, y):
        y = np.atleast_2d(y)
        out = np.empty((y.shape[0], problem.n, m))
        for j in range(m):
            e = np.zeros(m)
            e[j] = steps[j]
            out[:, :, j] = (interp(y + e) - interp(y - e)) / (2 * steps[j])
        return out

    rng = tuple((float(a[0]), float(a[-1])) for a in axes)
    return Corrector(psi, dpsi, "tabulated", fd_step=min(steps), y_range=rng), ests


def poisson_residual(
    corrector: Corrector, problem: CellProblem, y_points: Array, step: Optional[float] = None
) -> tuple[float, float]:
    """max and mean |L^x Psi + g_hat| over y_points, L^x = 1/2 a_ij d_ij + b_i d_i by central differences."""
    ys = np.atleast_2d(np.asarray(y_points, dtype=float))
    model = problem.model
    m = model.m
    bsz = ys.shape[0]
    xs = np.repeat(problem.x[None], bsz, 0)
    if step is None:
        step = corrector.fd_step if corrector.fd_step is not None else 1e-4 * (1.0 + float(np.max(np.abs(ys))))
    if corrector.y_range is not None:
        for j, (lo, hi) in enumerate(corrector.y_range):
            if np.any(ys[:, j] - step < lo) or np.any(ys[:, j] + step > hi):
                raise ValueError("finite-difference stencil leaves the tabulated range")
    psi0 = corrector.psi(xs, ys)
    grad = np.empty(psi0.shape + (m,))
    hess = np.empty(psi0.shape + (m, m))
    for i in range(m):
        ei = np.zeros(m)
        ei[i] = step
        fp, fm = corrector.psi(xs, ys + ei), corrector.psi(xs, ys - ei)
        grad[..., i] = (fp - fm) / (2 * step)
        hess[..., i, i] = (fp - 2 * psi0 + fm) / step**2
        for j in range(i + 1, m):
            ej = np.zeros(m)
            ej[j] = step
            val = (corrector.psi(xs, ys + ei + ej) - corrector.psi(xs, ys + ei - ej)
                   - corrector.psi(xs, ys - ei + ej) + corrector.psi(xs, ys - ei - ej)) / (4 * step**2)
            hess[..., i, j] = hess[..., j, i] = val
    sig = model.diffusion(xs, ys)
    a = np.einsum("bie,bje->bij", sig, sig)
    b = model.drift(xs, ys)
    lpsi = 0.5 * np.einsum("bkij,bij->bk", hess, a) + np.einsum("bki,bi->bk", grad, b)
    r = np.abs(lpsi + problem.g_hat(xs, ys))
    return float(r.max()), float(r.mean())


def psd_sqrt(mat: Array) -> tuple[Array, Array, float, float]:
    """(clamped PSD matrix, principal square root, clamped eigenvalue mass, min eigenvalue before clamping)."""
    sym = 0.5 * (mat + mat.T)
    w, v = np.linalg.eigh(sym)
    clamped = float(-w[w < 0].sum())
    wc = np.clip(w, 0.0, None)
    return (v * wc) @ v.T, (v * np.sqrt(wc)) @ v.T, clamped, float(w.min())


def effective_fluctuation_diffusion(
    corrector: Corrector, model: FastModel, x, cfg: SamplerConfig = SamplerConfig()
) -> dict:
    """V_bar(x) = int (D_y Psi sigma)(D_y Psi sigma)^T dmu^x and its principal square root.

    Average-then-root: the root is taken of the averaged matrix.
    """
    def v_fn(xx, yy):
        a = np.einsum("bnm,bme->bne", corrector.dpsi_dy(xx, yy), model.diffusion(xx, yy))
        return np.einsum("bne,bke->bnk", a, a)

    est = invariant_expectation(v_fn, model, x, cfg)
    vbar, root, clamped, min_eig = psd_sqrt(np.atleast_2d(est.value))
    tr = float(np.trace(vbar))
    if clamped > 1e-6 * max(tr, 1e-300):
        log.warning("V_bar clamp removed %.3g of trace %.3g", clamped, tr)
    return {"V_bar": vbar, "V_bar_sqrt": root, "stderr": np.atleast_2d(est.stderr),
            "clamped": clamped, "min_eig": min_eig}


@dataclass
class CellSolution:
    x: Array
    corrector: Corrector
    gbar: Estimate
    fbar: Optional[Estimate]
    V_bar: Array
    V_bar_sqrt: Array
    psi_estimates: list = field(default_factory=list)
    decay_fit: Optional[DecayFit] = None
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return _jsonable({
            "x": np.asarray(self.x).tolist(),
            "psi_estimates": [p.to_dict() for p in self.psi_estimates],
            "gbar": self.gbar.to_dict(),
            "fbar": None if self.fbar is None else self.fbar.to_dict(),
            "V_bar": np.asarray(self.V_bar).ravel().tolist(),
            "V_bar_sqrt": np.asarray(self.V_bar_sqrt).ravel().tolist(),
            "V_bar_shape": list(np.shape(self.V_bar)),
            "decay_fit": None if self.decay_fit is None else self.decay_fit.to_dict(),
            "warnings": list(self.warnings),
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
