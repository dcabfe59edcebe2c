"""Named benchmark scenarios with closed-form effective coefficients.

Each factory takes keyword overrides (gamma, sigma, beta, hurst, x0, y0) and
returns a :class:`Benchmark` bundling the slow-fast system, the analytic
averaged drift, corrector gradient and limit coefficients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial
from typing import Callable, Optional

import numpy as np
from scipy.stats import norm

from .cell import psd_sqrt
from .fastproc import FastModel, linear_fast_model, ou_model
from .fbm import TimeGrid
from .integrate import MixedSdeSpec
from .limit import LimitSpec, limit_variance_ode
from .multiscale import SlowFastSystem, solve_averaged

Array = np.ndarray


@dataclass(frozen=True)
class Benchmark:
    name: str
    system: SlowFastSystem
    regime: str
    x0: Array
    y0: object
    params: dict
    dpsi_dy: Optional[Callable[[Array, Array], Array]] = None
    vbar: Optional[Array] = None
    dg: Optional[Callable[[Array], Array]] = None
    df: Optional[Callable[[Array], Array]] = None
    terminal_var: Optional[Callable[[float], float]] = None

    def analytic_cdf(self, horizon: float) -> Optional[Callable[[Array], Array]]:
        """CDF of the Gaussian limit marginal at ``horizon`` when it is known in closed form."""
        if self.terminal_var is None:
            return None
        return partial(norm.cdf, loc=0.0, scale=math.sqrt(float(self.terminal_var(horizon))))

    def limit_spec(self, grid: TimeGrid, regime: Optional[str] = None) -> LimitSpec:
        regime = regime or self.regime
        vs = None if self.vbar is None else partial(_const_matrix, psd_sqrt(self.vbar)[1])
        xbar = partial(_xbar, self.system, grid, self.x0)
        fbar = self.system.fbar if regime == "case1" else None
        df = self.df if regime != "case1" else None
        return LimitSpec(regime, self.system.n, self.system.d, self.system.hurst, xbar, self.dg, fbar, df, vs)


def _xbar(system, grid, x0, bh):
    return solve_averaged(system, grid, bh, x0)


def _const_matrix(mat, x):
    return np.broadcast_to(mat, (x.shape[0],) + mat.shape)


def _const_matrix_xy(mat, x, y):
    return np.broadcast_to(mat, (x.shape[0],) + mat.shape)


def _g_y(x, y):
    return y.copy()


def _zero_f_case1(d, x, y):
    return np.zeros((x.shape[0], x.shape[1], d))


def _zero_drift(x):
    return np.zeros_like(x)


def _zero_fbar(d, x):
    return np.zeros((x.shape[0], x.shape[1], d))


def _g_linear(x, y):
    return -x + y


def _gbar_linear(x):
    return -x


def _f_beta_x(beta, x):
    return beta * x[:, :, None]


def _df_beta(beta, x):
    return np.full((x.shape[0], 1, 1, 1), beta)


def _g_zero(x, y):
    return np.zeros_like(x)


def _f_one(x):
    return np.ones((x.shape[0], x.shape[1], 1))


def _df_zero(x):
    return np.zeros((x.shape[0], x.shape[1], 1, x.shape[1]))


def case1_ou(gamma: float = 1.0, sigma: float = math.sqrt(2.0), hurst: float = 0.75, x0: float = 0.0,
             y0=2.0) -> Benchmark:
    """Pure-corrector Case 1: f = 0, g(x, y) = y, scalar OU; limit z = (sigma / gamma) W_hat."""
    fast = ou_model(gamma, sigma)
    system = SlowFastSystem.case1(_g_y, partial(_zero_f_case1, 1), fast, 1, 1, hurst=hurst,
                                  gbar=_zero_drift, fbar=partial(_zero_fbar, 1), name="case1-ou")
    vbar = np.array([[sigma**2 / gamma**2]])
    return Benchmark("case1-ou", system, "case1", np.array([x0]), y0,
                     {"gamma": gamma, "sigma": sigma, "hurst": hurst, "x0": x0, "y0": y0},
                     partial(_const_matrix_xy, np.array([[1.0 / gamma]])), vbar,
                     partial(_const_matrix, np.zeros((1, 1))), None,
                     partial(limit_variance_ode, 0.0, sigma**2 / gamma**2))


def case2_linear(gamma: float = 1.0, sigma: float = 1.0, beta: float = 0.5, hurst: float = 0.75,
                 x0: float = 1.0, y0=0.0) -> Benchmark:
    """Case 2: g = -x + y, f(x) = beta x, OU fast; g_bar = -x, Psi = y / gamma, V_bar = sigma^2 / gamma^2."""
    fast = ou_model(gamma, sigma)
    system = SlowFastSystem.case2(_g_linear, partial(_f_beta_x, beta), fast, 1, 1, hurst=hurst,
                                  gbar=_gbar_linear, name="case2-linear")
    vbar = np.array([[sigma**2 / gamma**2]])
    return Benchmark("case2-linear", system, "case2", np.array([x0]), y0,
                     {"gamma": gamma, "sigma": sigma, "beta": beta, "hurst": hurst, "x0": x0, "y0": y0},
                     partial(_const_matrix_xy, np.array([[1.0 / gamma]])), vbar,
                     partial(_const_matrix, -np.eye(1)), partial(_df_beta, beta))


def case2_additive(gamma: float = 1.0, sigma: float = 1.0, hurst: float = 0.75, x0: float = 0.0,
                   y0=0.0) -> Benchmark:
    """g = 0, f = 1: x = x0 + B^H exactly for every eps and delta."""
    fast = ou_model(gamma, sigma)
    system = SlowFastSystem.case2(_g_zero, _f_one, fast, 1, 1, hurst=hurst, gbar=_zero_drift,
                                  name="case2-additive")
    return Benchmark("case2-additive", system, "case2", np.array([x0]), y0,
                     {"gamma": gamma, "sigma": sigma, "hurst": hurst, "x0": x0, "y0": y0},
                     partial(_const_matrix_xy, np.zeros((1, 1))), np.zeros((1, 1)),
                     partial(_const_matrix, np.zeros((1, 1))), _df_zero)


BENCHMARKS = {
    "case1-ou": case1_ou,
    "case2-linear": case2_linear,
    "case2-additive": case2_additive,
}


def get_benchmark(name: str, **params) -> Benchmark:
    try:
        factory = BENCHMARKS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; known: {sorted(BENCHMARKS)}") from None
    return factory(**{k: v for k, v in params.items() if v is not None})


# ---------------------------------------------------------------------------
# Cell scenarios: fast model, raw drift and exact answers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CellScenario:
    name: str
    fast: FastModel
    g: Callable[[Array, Array], Array]
    x: Array
    gbar_exact: Optional[Array]
    psi_exact: Optional[Callable[[Array], Array]]
    y_points: Array
    params: dict
    linear_coeff: Optional[Array] = None
    decay_rate: Optional[float] = None


def _g_quadratic(x, y):
    return y**2


def _cubic_drift(x, y):
    return -(y**3)


def _weak_diffusion(x, y):
    return np.full((y.shape[0], 1, 1), SLOW_MIXING_NOISE)


def _g_sum(x, y):
    return y


def _g_null(x, y):
    return np.zeros((y.shape[0], 1))


SLOW_MIXING_NOISE = 0.1


def cell_scenario(name: str, gamma: float = 2.0, sigma: float = 1.0) -> CellScenario:
    if name == "ou-linear":
        return CellScenario(name, ou_model(gamma, sigma), _g_y, np.zeros(1), np.zeros(1),
                            lambda y: y / gamma, np.array([[1.0], [0.0], [-1.0]]),
                            {"gamma": gamma, "sigma": sigma}, np.eye(1), gamma)
    if name == "ou-quadratic":
        v = sigma**2 / (2 * gamma)
        return CellScenario(name, ou_model(gamma, sigma), _g_quadratic, np.zeros(1), np.array([v]),
                            lambda y: (y**2 - v) / (2 * gamma), np.array([[1.0], [0.0]]),
                            {"gamma": gamma, "sigma": sigma}, None, 2 * gamma)
    if name == "ou-2d":
        gam = np.diag([1.0, 2.0])
        return CellScenario(name, linear_fast_model(gam, sigma * np.eye(2)), _g_sum, np.zeros(1), np.zeros(2),
                            lambda y: y / np.diag(gam), np.array([[1.0, 1.0]]),
                            {"gamma": [1.0, 2.0], "sigma": sigma}, np.eye(2))
    if name == "null":
        return CellScenario(name, ou_model(gamma, sigma), _g_null, np.zeros(1), np.zeros(1),
                            lambda y: np.zeros((y.shape[0], 1)), np.array([[1.0]]),
                            {"gamma": gamma, "sigma": sigma}, np.zeros((1, 1)))
    if name == "slow-mixing":
        # flat-bottomed quartic potential with weak noise: the mean relaxes like
        # y0 / sqrt(1 + 2 y0^2 t) before noise takes over, a power law rather than an exponential
        fast = FastModel(_cubic_drift, _weak_diffusion, 1, 1)
        return CellScenario(name, fast, _g_y, np.zeros(1), np.zeros(1), None, np.array([[2.0]]),
                            {"drift": "-y^3", "sigma": SLOW_MIXING_NOISE})
    raise ValueError(f"unknown cell scenario {name!r}")


CELL_SCENARIOS = ("ou-linear", "ou-quadratic", "ou-2d", "null", "slow-mixing")


# ---------------------------------------------------------------------------
# Young-Ito change-of-variables examples: (psi, grad, hess, dynamics)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FormulaExample:
    name: str
    psi: Callable[[Array], Array]
    grad: Callable[[Array], Array]
    hess: Callable[[Array], Array]
    spec: MixedSdeSpec


def _psi_linear(x):
    return x.sum(axis=1)


def _grad_linear(x):
    return np.ones_like(x)


def _hess_zero(x):
    return np.zeros((x.shape[0], x.shape[1], x.shape[1]))


def _psi_square(x):
    return (x**2).sum(axis=1)


def _grad_square(x):
    return 2.0 * x


def _hess_square(x):
    return np.broadcast_to(2.0 * np.eye(x.shape[1]), (x.shape[0], x.shape[1], x.shape[1]))


def _neg(x):
    return -x


def _const_coeff(value, *args):
    x = args[-1]
    return np.full((x.shape[0], x.shape[1], 1), value)


FORMULA_EXAMPLES = {
    # linear psi under mixed dynamics: no second-order term
    "linear": FormulaExample("linear", _psi_linear, _grad_linear, _hess_zero,
                             MixedSdeSpec(_neg, partial(_const_coeff, 0.5), partial(_const_coeff, 0.5), np.ones(1))),
    # x^2 under dx = dW: classical Ito correction t
    "ito-square": FormulaExample("ito-square", _psi_square, _grad_square, _hess_square,
                                 MixedSdeSpec(_zero_drift, partial(_const_coeff, 0.0), partial(_const_coeff, 1.0),
                                              np.zeros(1))),
    # x^2 under dx = dB^H: Young chain rule, no correction
    "young-square": FormulaExample("young-square", _psi_square, _grad_square, _hess_square,
                                   MixedSdeSpec(_zero_drift, partial(_const_coeff, 1.0), partial(_const_coeff, 0.0),
                                                np.zeros(1))),
}
