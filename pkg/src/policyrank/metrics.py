"""Uplift ranking metrics: AUUC, AUQC, KRCC, LIFT@h and the cost curve / AUCC.

Every metric depends only on the ranking, which is score descending with
ties broken by ascending subject index. Areas are normalised so that a
random ranking lands near 0.5; degenerate normalisers yield 0.5 and a
logged warning instead of an exception.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

logger = logging.getLogger(__name__)


@dataclass
class RankedEvalSet:
    score: np.ndarray
    treatment: np.ndarray
    y_r: np.ndarray
    y_c: np.ndarray = None

    def __post_init__(self):
        self.score = np.asarray(self.score, dtype=np.float64)
        self.treatment = np.asarray(self.treatment).astype(np.intp)
        self.y_r = np.asarray(self.y_r, dtype=np.float64)
        self.y_c = None if self.y_c is None else np.asarray(self.y_c, dtype=np.float64)
        n = self.score.shape[0]
        for name in ("treatment", "y_r", "y_c"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != (n,):
                raise ContractError(f"{name} has shape {arr.shape}, expected ({n},)")
        if not np.all(np.isfinite(self.score)):
            raise ContractError("scores must be finite")
        if self.treatment.sum() == 0 or self.treatment.sum() == n:
            raise ContractError("both cohorts must be non-empty")

    def __len__(self):
        return self.score.shape[0]

    @property
    def order(self):
        return np.argsort(-self.score, kind="stable")

    @classmethod
    def from_dataset(cls, scores, data):
        return cls(scores, data.treatment, data.y_r, data.y_c)


def _prefix_stats(es, y):
    """Cumulative treated/control counts and outcome sums along the ranking."""
    order = es.order
    t = es.treatment[order].astype(np.float64)
    yy = y[order]
    n_t = np.cumsum(t)
    n_c = np.cumsum(1.0 - t)
    s_t = np.cumsum(yy * t)
    s_c = np.cumsum(yy * (1.0 - t))
    # the full prefix is the whole population: sum in index order so it is
    # bit-identical for every ranking
    t0 = es.treatment.astype(np.float64)
    s_t[-1], s_c[-1] = np.sum(y * t0), np.sum(y * (1.0 - t0))
    return n_t, n_c, s_t, s_c


def _mean_diff_scaled(n_t, n_c, s_t, s_c):
    """(treated mean - control mean) * prefix size; 0 where a cohort is empty."""
    with np.errstate(divide="ignore", invalid="ignore"):
        diff = np.where((n_t > 0) & (n_c > 0), s_t / np.maximum(n_t, 1) - s_c / np.maximum(n_c, 1), 0.0)
    return diff * (n_t + n_c)


def _normalized_area(curve, name):
    """Trapezoid area of curve(k), k = 0..n, over the rectangle n * |curve(n)|."""
    full = np.concatenate([[0.0], curve])
    n = len(curve)
    rect = n * abs(full[-1])
    if rect == 0 or not math.isfinite(rect):
        logger.warning("%s: degenerate normaliser, reporting 0.5", name)
        return 0.5, True
    area = float(np.sum((full[1:] + full[:-1]) * 0.5))
    return float(area / rect), False


def uplift_curve(es):
    n_t, n_c, s_t, s_c = _prefix_stats(es, es.y_r)
    return _mean_diff_scaled(n_t, n_c, s_t, s_c)


def qini_curve(es):
    n_t, n_c, s_t, s_c = _prefix_stats(es, es.y_r)
    with np.errstate(divide="ignore", invalid="ignore"):
        control = np.where(n_c > 0, s_c * n_t / np.maximum(n_c, 1), 0.0)
    return s_t - control


def auuc(es):
    """Normalised area under the cumulative uplift curve."""
    return _normalized_area(uplift_curve(es), "auuc")[0]


def auqc(es):
    """Normalised area under the Qini curve."""
    return _normalized_area(qini_curve(es), "auqc")[0]


def _usable_buckets(es, buckets):
    order = es.order
    groups = [list(g) for g in np.array_split(order, buckets) if len(g)]

    def ok(g):
        t = es.treatment[g]
        return 0 < t.sum() < len(t)

    merged = []
    for g in groups:
        if merged and not ok(merged[-1]):
            merged[-1] = merged[-1] + g
        else:
            merged.append(g)
    if len(merged) > 1 and not ok(merged[-1]):
        tail = merged.pop()
        merged[-1] = merged[-1] + tail
    return [np.asarray(g) for g in merged if ok(g)]


def kendall_tau(a, b):
    """(concordant - discordant) / (m (m - 1) / 2); tied pairs count zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m = len(a)
    if m < 2:
        raise ContractError("need at least two items")
    i, j = np.triu_indices(m, k=1)
    s = np.sign(a[i] - a[j]) * np.sign(b[i] - b[j])
    return float(s.sum() / (m * (m - 1) / 2))


def bucket_uplifts(es, buckets=10):
    """Observed treated-minus-control mean per score bucket, best bucket first."""
    if buckets < 2:
        raise ContractError("need at least 2 buckets")
    groups = _usable_buckets(es, buckets)
    out = []
    for g in groups:
        t = es.treatment[g].astype(bool)
        out.append(es.y_r[g][t].mean() - es.y_r[g][~t].mean())
    return np.asarray(out)


def krcc(es, buckets=10):
    """Kendall correlation between bucket score order and bucket observed uplift."""
    uplifts = bucket_uplifts(es, buckets)
    if len(uplifts) < 2:
        raise ContractError(f"only {len(uplifts)} usable bucket(s); need 2")
    # bucket 0 has the highest scores
    return kendall_tau(-np.arange(len(uplifts)), uplifts)


def lift_at_h(es, h=30):
    """Treated mean minus control mean of Y^r among the top h percent."""
    k = math.ceil(h * len(es) / 100.0 - 1e-9)
    top = es.order[:k]
    t = es.treatment[top].astype(bool)
    if not t.any():
        raise ContractError(f"top {h}% slice has no treated subjects")
    if t.all():
        raise ContractError(f"top {h}% slice has no control subjects")
    return float(es.y_r[top][t].mean() - es.y_r[top][~t].mean())


@dataclass
class CostCurve:
    fractions: np.ndarray
    costs: np.ndarray
    values: np.ndarray
    area: float = 0.5
    degenerate: bool = False

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("fraction,cum_cost,cum_value\n")
            for q, c, v in zip(self.fractions, self.costs, self.values):
                fh.write(f"{float(q)!r},{float(c)!r},{float(v)!r}\n")


def cost_curve(es, steps=100):
    """Incremental cost and value of treating each top-q prefix, q = 0, 1/steps, ..., 1."""
    if steps < 2:
        raise ContractError("steps must be >= 2")
    if es.y_c is None:
        raise ContractError("cost outcomes are required")
    n = len(es)
    ks = np.array([(j * n + steps - 1) // steps for j in range(1, steps + 1)])
    value = _mean_diff_scaled(*_prefix_stats(es, es.y_r))[ks - 1]
    cost = _mean_diff_scaled(*_prefix_stats(es, es.y_c))[ks - 1]
    curve = CostCurve(
        fractions=np.concatenate([[0.0], np.arange(1, steps + 1) / steps]),
        costs=np.concatenate([[0.0], cost]),
        values=np.concatenate([[0.0], value]),
    )
    curve.area, curve.degenerate = _curve_area(curve)
    return curve


def _curve_area(curve):
    rect = np.max(curve.costs) * np.max(curve.values)
    if not rect > 0:
        logger.warning("aucc: zero rectangle, reporting 0.5")
        return 0.5, True
    dx = np.diff(curve.costs)
    area = float(np.sum(dx * (curve.values[1:] + curve.values[:-1]) * 0.5))
    return float(area / rect), False


def aucc(curve):
    """Area under the cost curve over max cumulative cost x max cumulative value."""
    if isinstance(curve, RankedEvalSet):
        curve = cost_curve(curve)
    if len(curve.costs) < 2:
        raise ContractError("cost curve needs at least 2 points")
    return _curve_area(curve)[0]


METRICS = ("auuc", "auqc", "krcc", "lift", "aucc")


def evaluate(es, metrics=METRICS, steps=100, buckets=10, h=30):
    """Compute the named metrics; returns an ordered dict name -> value."""
    out = {}
    for name in metrics:
        if name == "auuc":
            out[name] = auuc(es)
        elif name == "auqc":
            out[name] = auqc(es)
        elif name == "krcc":
            out[name] = krcc(es, buckets)
        elif name == "lift":
            out[name] = lift_at_h(es, h)
        elif name == "aucc":
            out[name] = aucc(cost_curve(es, steps))
        else:
            raise ContractError(f"unknown metric {name!r}; choose from {METRICS}")
    return out
