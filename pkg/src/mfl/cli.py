"""Command-line entry point: ``mfl <command> [options]``.

Every command resolves its configuration (defaults < ``--config`` JSON < flags),
validates it against the published schema, writes its artifacts into ``--out``
and records a ``run.json`` sidecar holding the resolved config and the sha256
of each artifact.  ``mfl replay <dir>`` reruns from that sidecar and compares
checksums.  Reports carry no timing and no worker count, so they are
byte-identical across ``--jobs``.

Exit codes: 0 success, 1 runtime failure, 2 validation failure, 3 verdict FAIL.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
import tempfile
import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import jsonschema
import numpy as np

from . import __version__
from .benchmarks import BENCHMARKS, CELL_SCENARIOS, FORMULA_EXAMPLES, cell_scenario, get_benchmark
from .cell import (CellProblem, SamplerConfig, SlowMixingWarning, effective_fluctuation_diffusion,
                   poisson_residual, solve_cell_analytic_linear, solve_cell_mc)
from .experiments import (EPS_SCHEDULE, averaging_rate_experiment, clt_experiment, deviation_paths,
                          tightness_diagnostic, two_scale_experiment)
from .fastproc import check_holder_bound, check_moment_bound, ou_model
from .fbm import (TimeGrid, check_hurst, covariance_check, estimate_holder_exponent, path_to_csv,
                  sample_fbm_cholesky, sample_fbm_davies_harte_batch)
from .integrate import formula_refinement_study
from .multiscale import TwoScaleConfig, replica_keys, simulate_slow_fast, solve_averaged, deviation
from .rng import default_seed, substream
from .stats import ConvergenceReport, ks_distance, moment_table

log = logging.getLogger("mfl")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID, EXIT_FAIL = 0, 1, 2, 3
PILOT_PATHS = 8192
STATISTICAL = ("fbm-verify", "cell", "rate", "clt", "two-scale", "young", "fast-diag", "tightness")


class ValidationError(ValueError):
    """Configuration rejected before any computation starts."""


# ---------------------------------------------------------------------------
# Parameter table: drives argparse, the JSON schema and default resolution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Param:
    name: str
    kind: str  # number | integer | string | boolean | numbers | y0
    default: object
    help: str
    flag: Optional[str] = None
    choices: Optional[tuple] = None
    minimum: Optional[float] = None
    exclusive_minimum: Optional[float] = None

    @property
    def option(self) -> str:
        return self.flag or "--" + self.name.replace("_", "-")

    def schema(self) -> dict:
        base = {"number": {"type": "number"}, "integer": {"type": "integer"}, "string": {"type": "string"},
                "boolean": {"type": "boolean"},
                "numbers": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                "y0": {"oneOf": [{"type": "number"}, {"const": "stationary"}]}}[self.kind]
        out = dict(base)
        if self.choices:
            out["enum"] = list(self.choices)
        if self.minimum is not None:
            out["minimum"] = self.minimum
        if self.exclusive_minimum is not None:
            out["exclusiveMinimum"] = self.exclusive_minimum
        if self.default is None:
            out = {"oneOf": [out, {"type": "null"}]}
        out["description"] = self.help
        if self.default is not None:
            out["default"] = self.default
        return out


def _p(name, kind, default, help, **kw) -> Param:
    return Param(name, kind, default, help, **kw)


SEED = _p("seed", "integer", None, "master seed (default: $MFL_SEED or the package default)", minimum=0)
OUT = _p("out", "string", None, "output directory (default: mfl-out/<command>)")
JOBS = _p("jobs", "integer", 1, "worker processes; results do not depend on it", minimum=1)
HORIZON = _p("horizon", "number", 1.0, "time horizon T", exclusive_minimum=0)


def _n(default):
    return _p("n", "integer", default, "number of grid steps", minimum=2)


def _mc(default):
    return _p("mc", "integer", default, "Monte Carlo replicas (>= 2)", minimum=1)


SCENARIO_PARAMS = [
    _p("gamma", "number", None, "fast mean-reversion rate", exclusive_minimum=0),
    _p("sigma", "number", None, "fast noise amplitude", minimum=0),
    _p("beta", "number", None, "Case 2 linear fBM coefficient f(x) = beta x"),
    _p("hurst", "number", None, "Hurst parameter H in (1/2, 1)", flag="--h"),
    _p("x0", "number", None, "initial slow state"),
    _p("y0", "y0", None, "initial fast state (number or 'stationary')"),
]


def _scenario(default):
    return [_p("scenario", "string", default, "benchmark scenario", choices=tuple(sorted(BENCHMARKS)))]


COMMANDS: dict[str, dict] = {
    "fbm": {
        "help": "sample fBM paths and check their covariance",
        "params": [
            _p("hurst", "number", 0.75, "Hurst parameter H in (1/2, 1)", flag="--h"),
            _n(64), HORIZON,
            _p("paths", "integer", 3, "paths written to paths.csv", minimum=1),
            _p("dim", "integer", 1, "fBM dimension d", minimum=1),
            _p("check_paths", "integer", 20000, "replicas for the covariance check", minimum=2),
            _p("n_se", "number", 4.0, "covariance tolerance in standard errors", exclusive_minimum=0),
            SEED, OUT,
        ],
    },
    "fbm-verify": {
        "help": "covariance, generator-equivalence and regularity checks for one H",
        "params": [
            _p("hurst", "number", 0.75, "Hurst parameter H in (1/2, 1)", flag="--h"),
            _n(64), HORIZON,
            _p("paths", "integer", 20000, "Davies-Harte replicas for covariance and KS", minimum=1),
            _p("cholesky_paths", "integer", 10000, "Cholesky replicas for the KS comparison", minimum=2),
            _p("n_se", "number", 4.0, "covariance tolerance in standard errors", exclusive_minimum=0),
            _p("ks_max", "number", 0.02, "maximum KS distance between generators", exclusive_minimum=0),
            _p("holder_paths", "integer", 100, "paths for the Holder-exponent fit", minimum=2),
            _p("holder_n", "integer", 1024, "grid steps for the Holder fit (power of two >= 64)", minimum=64),
            _p("holder_tol", "number", 0.05, "tolerance on the median exponent", exclusive_minimum=0),
            SEED, OUT,
        ],
    },
    "young": {
        "help": "Young integral accuracy and Young-Ito formula refinement",
        "params": [
            _p("hurst", "number", 0.75, "Hurst parameter H in (1/2, 1)", flag="--h"),
            _n(4096), HORIZON,
            _p("paths", "integer", 50, "paths for the chain-rule check", minimum=1),
            _p("rel_tol", "number", 1e-2, "median relative error bound", exclusive_minimum=0),
            _p("formula_n", "integer", 1024, "fine grid steps for the formula study", minimum=8),
            _p("formula_paths", "integer", 50, "driver realizations for the formula study", minimum=1),
            _p("strides", "numbers", [8, 4, 2, 1], "coarse-to-fine strides"),
            _p("min_ratio", "number", 1.2, "required residual reduction per halving", exclusive_minimum=0),
            SEED, OUT,
        ],
    },
    "fast-diag": {
        "help": "uniform moment and Holder-scaling diagnostics of the fast process",
        "params": [
            _p("gamma", "number", 1.0, "OU mean-reversion rate", exclusive_minimum=0),
            _p("sigma", "number", 1.0, "OU noise amplitude", minimum=0),
            _p("eps", "numbers", [1e-1, 1e-2, 1e-3], "eps schedule"),
            _p("theta", "number", 0.4, "Holder exponent theta < 1/2", exclusive_minimum=0),
            _p("p", "number", 2.0, "moment order", exclusive_minimum=0),
            _n(4096), _p("horizon", "number", 0.25, "time horizon T", exclusive_minimum=0),
            _mc(200),
            _p("y0", "y0", 0.0, "initial fast state (number or 'stationary')"),
            _p("method", "string", "exp", "fast integrator", choices=("exp", "euler")),
            _p("flat_factor", "number", 2.0, "max/min ratio for flatness", exclusive_minimum=0),
            SEED, OUT,
        ],
    },
    "cell": {
        "help": "Monte Carlo corrector, decay fit, Poisson residual and V_bar",
        "params": [
            _p("scenario", "string", "ou-linear", "cell scenario", choices=CELL_SCENARIOS),
            _p("gamma", "number", 2.0, "OU mean-reversion rate", exclusive_minimum=0),
            _p("sigma", "number", 1.0, "OU noise amplitude", minimum=0),
            _p("y", "numbers", None, "evaluation points (flattened, m values per point)"),
            _p("mc", "integer", 100000, "path integrals per point", minimum=1),
            _p("dt", "number", 0.01, "time step of the semigroup integral", exclusive_minimum=0),
            _p("t_max", "number", None, "integration horizon (default from the decay fit)", exclusive_minimum=0),
            _p("rel_tol", "number", 0.02, "relative tolerance against the analytic corrector", exclusive_minimum=0),
            _p("decay_tol", "number", 0.15, "relative tolerance on the decay rate", exclusive_minimum=0),
            _p("residual_tol", "number", 1e-6, "Poisson residual bound for the analytic corrector",
               exclusive_minimum=0),
            SEED, OUT,
        ],
    },
    "simulate": {
        "help": "slow-fast trajectories, trajectory CSV and sidecar",
        "params": _scenario("case2-linear") + SCENARIO_PARAMS + [
            _p("eps", "number", 1e-2, "time-scale separation eps", exclusive_minimum=0),
            _p("delta", "number", None, "fast clock delta <= eps (default eps)", exclusive_minimum=0),
            _n(100), HORIZON, _mc(1),
            _p("csv_replicas", "integer", 3, "replicas written as CSV", minimum=0),
            _p("c_micro", "number", 0.1, "micro step as a fraction of the fast clock", exclusive_minimum=0),
            SEED, JOBS, OUT,
        ],
    },
    "rate": {
        "help": "averaging rate: E sup|x^eps - x_bar| against eps",
        "params": _scenario("case2-linear") + SCENARIO_PARAMS + [
            _p("eps", "numbers", list(EPS_SCHEDULE), "eps schedule"),
            _n(100), HORIZON, _mc(100),
            _p("holder", "number", None, "use the Holder seminorm of this exponent instead of the sup norm",
               exclusive_minimum=0),
            _p("min_slope", "number", 0.3, "required rate kappa", exclusive_minimum=0),
            SEED, JOBS, OUT,
        ],
    },
    "clt": {
        "help": "law of z^eps against the limit law",
        "params": _scenario("case1-ou") + SCENARIO_PARAMS + [
            _p("eps", "numbers", list(EPS_SCHEDULE), "eps schedule"),
            _n(100), HORIZON, _mc(5000),
            _p("n_limit", "integer", None, "limit-ensemble replicas (default mc)", minimum=2),
            _p("coupled", "boolean", None, "coupled-driver residual (default: on for Case 2)"),
            _p("ks_subset", "integer", None, "replicas entering the KS target check", minimum=2),
            _p("ks_target", "number", None, "KS bound at the last eps (default 0.05 with an analytic limit)",
               exclusive_minimum=0),
            _p("var_tol", "number", None, "relative variance tolerance (default 0.15 without an analytic limit)",
               exclusive_minimum=0),
            _p("require_monotone", "boolean", None, "gate on KS decreasing (default: with an analytic limit)"),
            _p("level", "number", 0.01, "KS significance level", exclusive_minimum=0),
            SEED, JOBS, OUT,
        ],
    },
    "two-scale": {
        "help": "conditional-on-B^H variance against delta/eps",
        "params": _scenario("case2-linear") + SCENARIO_PARAMS + [
            _p("eps", "number", 1e-2, "time-scale separation eps", exclusive_minimum=0),
            _p("ratios", "numbers", [1.0, 0.1, 0.01], "delta/eps values"),
            _n(100), HORIZON,
            _p("n_outer", "integer", 16, "B^H realizations", minimum=1),
            _p("n_inner", "integer", 64, "W realizations per B^H", minimum=2),
            _p("target", "number", 1.0, "expected slope"),
            _p("tol", "number", 0.4, "slope tolerance", exclusive_minimum=0),
            _p("max_rel_se", "number", 0.5, "refuse the verdict above this relative SE", exclusive_minimum=0),
            SEED, JOBS, OUT,
        ],
    },
    "tightness": {
        "help": "Holder-moment flatness of z^eps across eps",
        "params": _scenario("case1-ou") + SCENARIO_PARAMS + [
            _p("eps", "numbers", list(EPS_SCHEDULE), "eps schedule"),
            _n(100), HORIZON, _mc(1000),
            _p("alpha", "number", 0.4, "Holder exponent", exclusive_minimum=0),
            _p("p", "number", 2.0, "moment order", exclusive_minimum=0),
            _p("max_ratio", "number", 3.0, "max/min ratio for flatness", exclusive_minimum=0),
            SEED, JOBS, OUT,
        ],
    },
}


def build_schema() -> dict:
    """JSON schema: one closed object per command under ``$defs``."""
    defs = {}
    for cmd, info in COMMANDS.items():
        props = {p.name: p.schema() for p in info["params"]}
        props["command"] = {"const": cmd}
        defs[cmd] = {"type": "object", "description": info["help"], "properties": props,
                     "additionalProperties": False}
    return {"$schema": "https://json-schema.org/draft/2020-12/schema", "title": "mfl experiment config",
            "$defs": defs, "oneOf": [{"$ref": f"#/$defs/{c}"} for c in COMMANDS]}


def load_schema() -> dict:
    return json.loads(resources.files("mfl").joinpath("config_schema.json").read_text())


# ---------------------------------------------------------------------------
# Config resolution and validation
# ---------------------------------------------------------------------------


def _validate(command: str, cfg: dict) -> None:
    schema = load_schema()
    sub = {"$defs": schema["$defs"], "$ref": f"#/$defs/{command}"}
    try:
        jsonschema.validate(cfg, sub)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "config"
        raise ValidationError(f"{where}: {exc.message}") from None


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """defaults < --config file < explicit flags; seed falls back to $MFL_SEED."""
    params = COMMANDS[command]["params"]
    cfg = {}
    if getattr(args, "config", None):
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise ValidationError("config must be a JSON object")
        _validate(command, cfg)
        cfg.pop("command", None)
    for p in params:
        val = getattr(args, p.name, None)
        if val is not None:
            cfg[p.name] = val
    for p in params:
        cfg.setdefault(p.name, p.default)
    if cfg.get("seed") is None:
        cfg["seed"] = default_seed()
    if cfg.get("out") is None:
        cfg["out"] = str(Path("mfl-out") / command)
    _validate(command, cfg)
    _check_domain(command, cfg)
    return cfg


def _check_domain(command: str, cfg: dict) -> None:
    h = cfg.get("hurst")
    if h is not None:
        try:
            check_hurst(h)
        except ValueError as exc:
            raise ValidationError(str(exc)) from None
    if command in STATISTICAL and "mc" in cfg and cfg["mc"] < 2:
        raise ValidationError(f"{command} is a statistical command and needs --mc >= 2, got {cfg['mc']}")
    if command == "simulate" and cfg["delta"] is not None and cfg["delta"] > cfg["eps"]:
        raise ValidationError("delta must not exceed eps")
    if command in ("rate", "clt", "tightness", "fast-diag") and any(e <= 0 for e in cfg["eps"]):
        raise ValidationError("eps values must be positive")
    if command == "two-scale" and any(not 0 < r <= 1 for r in cfg["ratios"]):
        raise ValidationError("delta/eps ratios must lie in (0, 1]")
    if command == "fast-diag" and cfg["theta"] >= 0.5:
        raise ValidationError("theta must be below 1/2")
    if command == "young" and any(s < 1 or s != int(s) for s in cfg["strides"]):
        raise ValidationError("strides must be positive integers")
    if command == "cell" and cfg["y"] is not None:
        m = cell_scenario(cfg["scenario"]).fast.m
        if len(cfg["y"]) % m:
            raise ValidationError(f"y needs a multiple of {m} values for scenario {cfg['scenario']}")


# ---------------------------------------------------------------------------
# Artifact writing
# ---------------------------------------------------------------------------


class Artifacts:
    """Writes files into one directory and keeps their sha256 for the sidecar."""

    def __init__(self, out: Path):
        self.out = out
        self.out.mkdir(parents=True, exist_ok=True)
        self.sums: dict[str, str] = {}

    def write(self, name: str, text: str) -> None:
        data = text.encode()
        (self.out / name).write_bytes(data)
        self.sums[name] = hashlib.sha256(data).hexdigest()

    def report(self, rep: ConvergenceReport) -> None:
        self.write("report.json", rep.to_json())
        self.write("report.csv", rep.to_csv())
        self.write("report.txt", rep.to_text())

    def sidecar(self, command: str, cfg: dict) -> None:
        body = {"command": command, "config": cfg, "seed": cfg["seed"], "version": __version__,
                "artifacts": dict(sorted(self.sums.items()))}
        (self.out / "run.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _json(obj) -> str:
    from .stats import _jsonable

    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def _grid(cfg: dict) -> TimeGrid:
    return TimeGrid(float(cfg["horizon"]), int(cfg["n"]))


def _bench(cfg: dict):
    params = {k: cfg.get(k) for k in ("gamma", "sigma", "beta", "hurst", "x0", "y0")}
    try:
        return get_benchmark(cfg["scenario"], **params)
    except TypeError as exc:
        raise ValidationError(f"scenario {cfg['scenario']}: {exc}") from None


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_fbm(cfg: dict, art: Artifacts) -> bool:
    grid, h, d = _grid(cfg), cfg["hurst"], cfg["dim"]
    count = max(cfg["paths"], cfg["check_paths"])
    vals = sample_fbm_davies_harte_batch(grid, h, d, [substream(cfg["seed"], "fbm", i) for i in range(count)])
    shown = vals[: cfg["paths"]]
    cols = np.concatenate([shown[p] for p in range(shown.shape[0])], axis=1)
    names = [f"path{p}_dim{k}" for p in range(shown.shape[0]) for k in range(d)]
    art.write("paths.csv", path_to_csv(grid.points, cols, names=names))
    chk = covariance_check(vals[: cfg["check_paths"]], grid, h, cfg["n_se"])
    art.write("covariance.json", _json({"hurst": h, "grid": grid.to_dict(), **chk.to_dict(), "pass": chk.passed}))
    print(f"covariance: max z {chk.max_z:.3f} over {chk.samples} paths -> {'PASS' if chk.passed else 'FAIL'}")
    return chk.passed


def cmd_fbm_verify(cfg: dict, art: Artifacts) -> bool:
    grid, h, seed = _grid(cfg), cfg["hurst"], cfg["seed"]
    rep = ConvergenceReport("fbm_verify", meta={"hurst": h, "grid": grid.to_dict(), "seed": seed})
    dh = sample_fbm_davies_harte_batch(grid, h, 1, [substream(seed, "fbm", i) for i in range(cfg["paths"])])
    chk = covariance_check(dh, grid, h, cfg["n_se"])
    rep.add("cov_max_z", chk.max_z, threshold=cfg["n_se"], verdict=chk.passed, n=chk.samples)
    rep.add("cov_max_abs_dev", chk.max_abs_dev, n=chk.samples)
    rep.verdict("covariance", chk.passed, cfg["n_se"], chk.samples, max_z=chk.max_z)

    ch = np.array([sample_fbm_cholesky(grid, h, 1, substream(seed, "aux", i)).values[-1, 0]
                   for i in range(cfg["cholesky_paths"])])
    ks = ks_distance(dh[:, -1, 0], ch)
    ok = ks.statistic < cfg["ks_max"]
    rep.add("ks_dh_vs_cholesky", ks.statistic, threshold=cfg["ks_max"], verdict=ok, n=ks.n)
    rep.verdict("generator_ks", ok, cfg["ks_max"], ks.n, statistic=ks.statistic)

    hg = TimeGrid(grid.horizon, cfg["holder_n"])
    hp = sample_fbm_davies_harte_batch(hg, h, 1, [substream(seed, "fbm", 1, i) for i in range(cfg["holder_paths"])])
    exps = np.array([estimate_holder_exponent(p, hg.dt).exponent for p in hp])
    med = float(np.median(exps))
    ok = abs(med - h) <= cfg["holder_tol"]
    rep.add("holder_median", med, threshold=cfg["holder_tol"], verdict=ok, n=exps.size)
    rep.verdict("holder", ok, cfg["holder_tol"], int(exps.size), median=med, target=h)
    art.report(rep)
    print(rep.to_text(), end="")
    return rep.passed


def cmd_young(cfg: dict, art: Artifacts) -> bool:
    h, seed = cfg["hurst"], cfg["seed"]
    grid = _grid(cfg)
    rep = ConvergenceReport("young", meta={"hurst": h, "grid": grid.to_dict(), "seed": seed})
    bh = sample_fbm_davies_harte_batch(grid, h, 1, [substream(seed, "fbm", i) for i in range(cfg["paths"])])[..., 0]
    exact = 0.5 * bh[:, -1] ** 2
    errs = {}
    for stride in (2, 1):
        coarse = bh[:, ::stride]
        integral = np.sum(coarse[:, :-1] * np.diff(coarse, axis=1), axis=1)
        errs[stride] = float(np.median(np.abs(integral - exact) / np.abs(exact)))
    rel = errs[1]
    # left-point sums miss exactly half the discrete quadratic variation, about n^(1-2H) / 2
    qv = float(np.median(np.sum(np.diff(bh, axis=1) ** 2, axis=1) / bh[:, -1] ** 2))
    ok = rel < cfg["rel_tol"]
    rep.add("chain_rule_rel_err", rel, threshold=cfg["rel_tol"], verdict=ok, n=cfg["paths"])
    rep.add("qv_over_bt2_median", qv, n=cfg["paths"])
    rep.verdict("chain_rule", ok, cfg["rel_tol"], cfg["paths"], median_rel_err=rel)
    order = math.log2(errs[2] / errs[1])
    rep.add("chain_rule_order", order, threshold=0.3, verdict=order > 0.3, n=cfg["paths"])
    rep.verdict("chain_rule_order", order > 0.3, 0.3, cfg["paths"], order=order, expected=2 * h - 1)
    fgrid = TimeGrid(grid.horizon, cfg["formula_n"])
    strides = tuple(int(s) for s in cfg["strides"])
    for name, ex in FORMULA_EXAMPLES.items():
        study = formula_refinement_study(ex.psi, ex.spec, fgrid, h, strides, cfg["formula_paths"], seed,
                                         grad=ex.grad, hess=ex.hess)
        for s, r in zip(study["strides"], study["rms"]):
            rep.add(f"{name}_rms_stride{s}", r, n=cfg["formula_paths"])
        ratios = study["ratios"]
        ok = all(r > cfg["min_ratio"] for r in ratios)
        rep.verdict(f"formula_{name}", ok, cfg["min_ratio"], cfg["formula_paths"], ratios=ratios)
    art.report(rep)
    print(rep.to_text(), end="")
    return rep.passed


def cmd_fast_diag(cfg: dict, art: Artifacts) -> bool:
    model = ou_model(cfg["gamma"], cfg["sigma"])
    grid, seed = _grid(cfg), cfg["seed"]
    kw = dict(y0=cfg["y0"], method=cfg["method"], flat_factor=cfg["flat_factor"])
    mom = check_moment_bound(model, cfg["eps"], cfg["p"], grid, cfg["mc"], seed, **kw)
    hold = check_holder_bound(model, cfg["eps"], cfg["theta"], cfg["p"], grid, cfg["mc"], seed, **kw)
    rep = ConvergenceReport("fast_diagnostics", meta={"gamma": cfg["gamma"], "sigma": cfg["sigma"],
                                                      "grid": grid.to_dict(), "seed": seed})
    for r in mom.rows:
        rep.add("sup_t_moment", r["estimate"], eps=r["eps"], stderr=r["stderr"], n=cfg["mc"])
    for r in hold.rows:
        rep.add("holder_moment", r["estimate"], eps=r["eps"], stderr=r["stderr"], n=cfg["mc"])
    for r in hold.sup_rows:
        rep.add("pathwise_sup_moment", r["estimate"], eps=r["eps"], stderr=r["stderr"], n=cfg["mc"])
    v = mom.verdicts
    rep.verdict("moment_flat", v["flat"], v["threshold"], v["n_mc"], ratio=v["ratio"])
    v = hold.verdicts
    rep.verdict("holder_slope", v["pass"], v["band"], v["n_mc"], slope=v["slope"])
    rep.meta["pathwise_sup_ratio"] = v["sup_ratio"]
    art.report(rep)
    print(rep.to_text(), end="")
    return rep.passed


def cmd_cell(cfg: dict, art: Artifacts) -> bool:
    sc = cell_scenario(cfg["scenario"], cfg["gamma"], cfg["sigma"])
    m = sc.fast.m
    ys = sc.y_points if cfg["y"] is None else np.asarray(cfg["y"], dtype=float).reshape(-1, m)
    seed = cfg["seed"]
    problem = CellProblem.build(sc.g, sc.fast, sc.x, SamplerConfig(seed=seed), gbar=sc.gbar_exact)
    with warnings.catch_warnings(record=True) as wlist:
        warnings.simplefilter("always", SlowMixingWarning)
        first = solve_cell_mc(problem, ys[0], cfg["t_max"], cfg["mc"], cfg["dt"], seed)
        ests = [first] + [solve_cell_mc(problem, y, first.t_max, cfg["mc"], cfg["dt"], seed, decay=first.decay)
                          for y in ys[1:]]
    caught = [str(w.message) for w in wlist if issubclass(w.category, SlowMixingWarning)]
    decay = first.decay
    rep = {"scenario": sc.name, "params": sc.params, "x": sc.x, "seed": seed, "n_paths": cfg["mc"],
           "dt": cfg["dt"], "t_max": first.t_max, "gbar": problem.gbar.to_dict(), "psi": [], "verdicts": {},
           "decay_fit": None if decay is None else decay.to_dict(),
           "warnings": [f"WARN: {msg}" for msg in dict.fromkeys(caught)]}
    if decay is not None and not decay.exponential and not caught:
        rep["warnings"].append(f"WARN: non-exponential decay: R^2 = {decay.r2:.3f} < 0.9")
    ok_all = True
    for est in ests:
        row = est.to_dict()
        if sc.psi_exact is not None:
            exact = np.asarray(sc.psi_exact(est.point[None]))[0]
            err = np.abs(est.value - exact)
            tol = np.maximum(cfg["rel_tol"] * np.abs(exact), 3 * est.stderr + est.bias_bound)
            row.update({"exact": exact, "abs_err": err, "tol": tol, "pass": bool(np.all(err <= tol))})
            ok_all &= row["pass"]
        rep["psi"].append(row)
    if sc.psi_exact is not None:
        rep["verdicts"]["psi"] = {"pass": ok_all, "threshold": f"max({cfg['rel_tol']} |Psi|, 3 se + bias)",
                                  "n": cfg["mc"]}
    if sc.decay_rate is not None and decay is not None and not decay.skipped:
        rel = abs(decay.c / sc.decay_rate - 1.0)
        rep["verdicts"]["decay_rate"] = {"pass": rel <= cfg["decay_tol"], "threshold": cfg["decay_tol"],
                                         "n": PILOT_PATHS, "fitted": decay.c, "expected": sc.decay_rate, "rel_err": rel}
    if sc.linear_coeff is not None:
        corr = solve_cell_analytic_linear(sc.linear_coeff, sc.fast)
        r_max, r_mean = poisson_residual(corr, problem, ys)
        rep["poisson_residual"] = {"max": r_max, "mean": r_mean}
        rep["verdicts"]["poisson_residual"] = {"pass": r_max < cfg["residual_tol"], "threshold": cfg["residual_tol"],
                                               "n": int(ys.shape[0])}
        vb = effective_fluctuation_diffusion(corr, sc.fast, sc.x, SamplerConfig(seed=seed))
        rep["V_bar"] = vb["V_bar"]
        rep["V_bar_sqrt"] = vb["V_bar_sqrt"]
        rep["V_bar_stderr"] = vb["stderr"]
    passed = all(v["pass"] for v in rep["verdicts"].values())
    rep["pass"] = passed
    art.write("cell.json", _json(rep))
    for w in rep["warnings"]:
        print(w)
    for row in rep["psi"]:
        print(f"Psi{row['point']} = {row['value']} +- {row['stderr']}")
    for k, v in sorted(rep["verdicts"].items()):
        print(f"{k}: {'PASS' if v['pass'] else 'FAIL'}")
    return passed


def cmd_simulate(cfg: dict, art: Artifacts) -> bool:
    bench, grid = _bench(cfg), _grid(cfg)
    traj = simulate_slow_fast(bench.system, TwoScaleConfig(cfg["eps"], cfg["delta"]), grid, cfg["seed"],
                              replica_keys(cfg["mc"]), bench.x0, bench.y0, c_micro=cfg["c_micro"],
                              jobs=cfg["jobs"])
    for r in range(min(cfg["csv_replicas"], traj.replicas)):
        art.write(f"trajectory_{r:04d}.csv", traj.to_csv(r))
    art.write("trajectory.json", traj.sidecar_json())
    if bench.system.gbar is not None:
        z = deviation(traj, solve_averaged(bench.system, grid, traj.bh, bench.x0), cfg["eps"])[:, -1, 0]
        rep = ConvergenceReport("simulate", meta={"scenario": bench.name, "eps": cfg["eps"], "seed": cfg["seed"],
                                                  "grid": grid.to_dict()})
        if z.size >= 2:
            mt = moment_table(z)
            rep.add("z_mean", mt.mean, eps=cfg["eps"], stderr=mt.mean_se, n=z.size)
            rep.add("z_var", mt.var, eps=cfg["eps"], stderr=mt.var_se, n=z.size)
        else:
            rep.add("z_terminal", float(z[0]), eps=cfg["eps"], n=1)
        art.report(rep)
    print(f"wrote {traj.replicas} replicas to {art.out}")
    return True


def cmd_rate(cfg: dict, art: Artifacts) -> bool:
    rep = averaging_rate_experiment(_bench(cfg), cfg["eps"], cfg["mc"], _grid(cfg), cfg["seed"], cfg["jobs"],
                                    cfg["holder"], cfg["min_slope"])
    art.report(rep)
    print(rep.to_text(), end="")
    return rep.passed


def resolve_clt_defaults(cfg: dict, analytic: bool, regime: str) -> dict:
    """Fill the regime-dependent clt defaults in place and return the config."""
    if cfg["coupled"] is None:
        cfg["coupled"] = regime == "case2"
    if cfg["require_monotone"] is None:
        cfg["require_monotone"] = analytic
    if cfg["ks_target"] is None and analytic:
        cfg["ks_target"] = 0.05
    if cfg["var_tol"] is None and not analytic:
        cfg["var_tol"] = 0.15
    return cfg


def cmd_clt(cfg: dict, art: Artifacts) -> bool:
    bench, grid = _bench(cfg), _grid(cfg)
    cdf = bench.analytic_cdf(grid.horizon)
    resolve_clt_defaults(cfg, cdf is not None, bench.regime)
    rep, _ = clt_experiment(bench, cfg["eps"], cfg["mc"], grid, cfg["seed"], cfg["jobs"], analytic_cdf=cdf,
                            n_limit=cfg["n_limit"], coupled=cfg["coupled"], ks_subset=cfg["ks_subset"],
                            ks_target=cfg["ks_target"], var_tol=cfg["var_tol"], level=cfg["level"],
                            require_monotone=cfg["require_monotone"])
    art.report(rep)
    print(rep.to_text(), end="")
    return rep.passed


def cmd_two_scale(cfg: dict, art: Artifacts) -> bool:
    bench = _bench(cfg)
    if bench.system.scaling != "unit":
        raise ValidationError("two-scale needs a Case 2 scenario")
    rep = two_scale_experiment(bench, cfg["eps"], cfg["ratios"], cfg["n_outer"], cfg["n_inner"], _grid(cfg),
                               cfg["seed"], cfg["jobs"], cfg["target"], cfg["tol"], cfg["max_rel_se"])
    art.report(rep)
    print(rep.to_text(), end="")
    return rep.passed


def cmd_tightness(cfg: dict, art: Artifacts) -> bool:
    bench, grid = _bench(cfg), _grid(cfg)
    paths = deviation_paths(bench, cfg["eps"], cfg["mc"], grid, cfg["seed"], cfg["jobs"])
    rep = tightness_diagnostic(paths, grid.dt, cfg["alpha"], cfg["p"], cfg["max_ratio"], name="tightness")
    rep.meta.update({"scenario": bench.name, "seed": cfg["seed"], "n_mc": cfg["mc"], "grid": grid.to_dict()})
    art.report(rep)
    print(rep.to_text(), end="")
    return rep.passed


HANDLERS = {
    "fbm": cmd_fbm, "fbm-verify": cmd_fbm_verify, "young": cmd_young, "fast-diag": cmd_fast_diag,
    "cell": cmd_cell, "simulate": cmd_simulate, "rate": cmd_rate, "clt": cmd_clt,
    "two-scale": cmd_two_scale, "tightness": cmd_tightness,
}


def run_command(command: str, cfg: dict) -> int:
    """Run a resolved config; returns the exit code and writes artifacts plus run.json."""
    art = Artifacts(Path(cfg["out"]))
    passed = HANDLERS[command](cfg, art)
    art.sidecar(command, cfg)
    return EXIT_OK if passed else EXIT_FAIL


def cmd_replay(run: str, out: Optional[str], jobs: Optional[int]) -> int:
    path = Path(run)
    side = path / "run.json" if path.is_dir() else path
    try:
        body = json.loads(side.read_text())
        command, cfg, sums = body["command"], dict(body["config"]), body["artifacts"]
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise ValidationError(f"cannot read sidecar {side}: {exc}") from None
    if command not in HANDLERS:
        raise ValidationError(f"sidecar names unknown command {command!r}")
    _validate(command, cfg)
    if jobs is not None and "jobs" in cfg:
        cfg["jobs"] = jobs
    with tempfile.TemporaryDirectory() as tmp:
        cfg["out"] = out or tmp
        art = Artifacts(Path(cfg["out"]))
        HANDLERS[command](cfg, art)
        mismatched = sorted(k for k in set(sums) | set(art.sums) if sums.get(k) != art.sums.get(k))
    for name in sorted(sums):
        print(f"{name}: {'MISMATCH' if name in mismatched else 'identical'}")
    for name in mismatched:
        if name not in sums:
            print(f"{name}: MISMATCH (not in the original run)")
    print("replay: " + ("PASS" if not mismatched else "FAIL"))
    return EXIT_OK if not mismatched else EXIT_FAIL


# ---------------------------------------------------------------------------
# argparse
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_INVALID)


def _y0(text: str):
    return text if text == "stationary" else float(text)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mfl", description="Averaging and fluctuation experiments for fBM-driven slow-fast "
                                             "systems.")
    parser.add_argument("--version", action="version", version=f"mfl {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for cmd, info in COMMANDS.items():
        sp = sub.add_parser(cmd, help=info["help"], description=info["help"])
        sp.add_argument("--config", help="JSON config; explicit flags override its fields")
        for p in info["params"]:
            kw = {"dest": p.name, "default": None, "help": p.help}
            if p.kind == "boolean":
                sp.add_argument(p.option, action=argparse.BooleanOptionalAction, **kw)
                continue
            if p.kind == "numbers":
                kw.update(nargs="+", type=float)
            elif p.kind == "y0":
                kw["type"] = _y0
            else:
                kw["type"] = {"number": float, "integer": int, "string": str}[p.kind]
            if p.choices:
                kw["choices"] = p.choices
            sp.add_argument(p.option, **kw)
    rp = sub.add_parser("replay", help="rerun a recorded run and compare artifact checksums")
    rp.add_argument("run", help="run directory or its run.json")
    rp.add_argument("--out", default=None, help="keep the replayed artifacts here")
    rp.add_argument("--jobs", type=int, default=None, help="worker count for the replay")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if args.command == "replay":
            return cmd_replay(args.run, args.out, args.jobs)
        cfg = resolve_config(args.command, args)
        return run_command(args.command, cfg)
    except ValidationError as exc:
        print(f"mfl: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any simulation failure maps to the runtime exit code
        log.debug("runtime failure", exc_info=True)
        print(f"mfl: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
