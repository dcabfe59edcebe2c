"""Ensembles, Kolmogorov-Smirnov distances, log-log rate fits and report containers."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats as sps

Array = np.ndarray

KS_LEVEL = 0.01


@dataclass(frozen=True)
class Ensemble:
    """Replica values (R, k) plus shared metadata (eps, delta, regime, seed, grid)."""

    values: Array
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] < 2:
            raise ValueError(f"an ensemble needs at least 2 replicas, got {v.shape[0]}")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "meta", dict(self.meta, replicas=v.shape[0]))

    @property
    def size(self) -> int:
        return self.values.shape[0]


# ---------------------------------------------------------------------------
# Kolmogorov-Smirnov
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KsResult:
    statistic: float
    threshold: float
    level: float
    n: int
    m: Optional[int]

    @property
    def passed(self) -> bool:
        return self.statistic < self.threshold

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "threshold": self.threshold, "level": self.level,
                "n": self.n, "m": self.m, "pass": self.passed}


def ks_critical(level: float) -> float:
    """Asymptotic Kolmogorov quantile c with P(sqrt(n) D > c) = level."""
    return float(sps.kstwobign.isf(level))


def _ks_two_sample(a: Array, b: Array) -> float:
    a = np.sort(a)
    b = np.sort(b)
    pts = np.concatenate([a, b])
    fa = np.searchsorted(a, pts, side="right") / a.size
    fb = np.searchsorted(b, pts, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def _ks_one_sample(a: Array, cdf: Callable[[Array], Array]) -> float:
    a = np.sort(a)
    n = a.size
    f = np.asarray(cdf(a), dtype=float)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - f), np.max(f - (i - 1) / n)))


def ks_distance(a, b, level: float = KS_LEVEL) -> KsResult:
    """Sup-norm CDF distance between a sample and another sample or an analytic CDF.

    The threshold is the asymptotic critical value at significance ``level``.
    """
    a = np.asarray(a, dtype=float).ravel()
    if a.size == 0:
        raise ValueError("empty sample")
    c = ks_critical(level)
    if callable(b):
        return KsResult(_ks_one_sample(a, b), c / math.sqrt(a.size), level, a.size, None)
    b = np.asarray(b, dtype=float).ravel()
    if b.size == 0:
        raise ValueError("empty sample")
    thr = c * math.sqrt((a.size + b.size) / (a.size * b.size))
    return KsResult(_ks_two_sample(a, b), thr, level, a.size, b.size)


def ks_componentwise(a: Array, b, level: float = KS_LEVEL) -> list[KsResult]:
    """KS per component with a Bonferroni-corrected level."""
    a = np.atleast_2d(np.asarray(a, dtype=float).T).T
    k = a.shape[1]
    out = []
    for j in range(k):
        other = b[j] if isinstance(b, (list, tuple)) else (b if callable(b) else np.atleast_2d(np.asarray(b).T).T[:, j])
        out.append(ks_distance(a[:, j], other, level / k))
    return out


# ---------------------------------------------------------------------------
# Rates and moments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float
    stderr: float
    ci: tuple
    n: int

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "r2": self.r2,
                "stderr": self.stderr, "ci": list(self.ci), "n": self.n}


def loglog_fit(xs: Sequence[float], ys: Sequence[float], confidence: float = 0.95) -> RateFit:
    """Least squares of log y on log x with a t-based confidence interval for the slope."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.size < 3:
        raise ValueError("rate fit needs at least 3 points")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("rate fit needs strictly positive inputs")
    lx, ly = np.log(x), np.log(y)
    res = sps.linregress(lx, ly)
    resid = ly - (res.intercept + res.slope * lx)
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - float((resid**2).sum()) / ss_tot
    stderr = float(res.stderr) if np.isfinite(res.stderr) else 0.0
    q = float(sps.t.ppf(0.5 + confidence / 2, x.size - 2))
    slope = float(res.slope)
    return RateFit(slope, float(res.intercept), r2, stderr, (slope - q * stderr, slope + q * stderr), int(x.size))


fit_rate = loglog_fit


@dataclass(frozen=True)
class Moments:
    n: int
    mean: float
    mean_se: float
    var: float
    var_se: float
    skew: float
    skew_se: float
    kurt: float
    kurt_se: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def moment_table(sample: Array) -> Moments:
    """Mean, variance, skewness, excess kurtosis with standard errors; SE(mean) = std/sqrt(n)."""
    x = np.asarray(sample, dtype=float).ravel()
    n = x.size
    if n < 4:
        raise ValueError("moment table needs at least 4 values")
    mean = float(x.mean())
    sd = float(x.std(ddof=1))
    var = sd**2
    c = x - mean
    m4 = float((c**4).mean())
    var_se = math.sqrt(max(m4 - var**2 * (n - 3) / (n - 1), 0.0) / n)
    if var > 0:
        skew = float(sps.skew(x, bias=False))
        kurt = float(sps.kurtosis(x, bias=False))
    else:
        skew = kurt = 0.0
    return Moments(n, mean, sd / math.sqrt(n), var, var_se, skew, math.sqrt(6.0 / n), kurt, math.sqrt(24.0 / n))


def mean_se(x: Array) -> tuple[float, float]:
    x = np.asarray(x, dtype=float).ravel()
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "PASS" if v else "FAIL"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    return obj


@dataclass
class ConvergenceReport:
    """Rows of (eps, delta, stat, value, stderr, threshold, verdict) plus fits and verdicts.

    Each verdict entry carries the threshold and sample size behind it.
    """

    name: str
    rows: list = field(default_factory=list)
    fits: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add(self, stat: str, value, eps=None, delta=None, stderr=None, threshold=None, verdict=None, n=None):
        self.rows.append({"eps": eps, "delta": delta, "stat": stat, "value": value, "stderr": stderr,
                          "threshold": threshold, "verdict": verdict, "n": n})

    def verdict(self, key: str, passed: bool, threshold, n, **extra):
        self.verdicts[key] = {"pass": bool(passed), "threshold": threshold, "n": n, **extra}

    @property
    def passed(self) -> bool:
        return all(v["pass"] for v in self.verdicts.values())

    def to_dict(self) -> dict:
        return _jsonable({"name": self.name, "meta": self.meta, "rows": self.rows, "fits": self.fits,
                          "verdicts": self.verdicts, "pass": self.passed})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["eps", "delta", "stat", "value", "stderr", "threshold", "verdict"])
        for r in self.rows:
            w.writerow([_fmt(r["eps"]), _fmt(r["delta"]), r["stat"], _fmt(r["value"]), _fmt(r["stderr"]),
                        _fmt(r["threshold"]), _fmt(r["verdict"])])
        return buf.getvalue()

    def to_text(self) -> str:
        header = ["eps", "delta", "stat", "value", "stderr", "threshold", "verdict"]
        body = []
        for r in self.rows:
            body.append([
                "" if r["eps"] is None else f"{r['eps']:.3g}",
                "" if r["delta"] is None else f"{r['delta']:.3g}",
                r["stat"],
                "" if r["value"] is None else f"{r['value']:.6g}",
                "" if r["stderr"] is None else f"{r['stderr']:.3g}",
                "" if r["threshold"] is None else f"{r['threshold']:.4g}",
                _fmt(r["verdict"]),
            ])
        widths = [max(len(h), *(len(row[k]) for row in body)) if body else len(h) for k, h in enumerate(header)]
        lines = [f"# {self.name}", "  ".join(h.ljust(w) for h, w in zip(header, widths))]
        lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in body]
        for key, v in sorted(self.verdicts.items()):
            lines.append(f"{key}: {'PASS' if v['pass'] else 'FAIL'} (threshold {v['threshold']}, n {v['n']})")
        return "\n".join(lines) + "\n"
