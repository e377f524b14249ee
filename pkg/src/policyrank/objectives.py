"""Differentiable treatment-effect estimators and the cost-aware objective.

All functions accept plain arrays or :class:`~policyrank.diffcore.Var`
values for the quantities that carry gradients (scores, probabilities);
labels, outcomes and propensities are always plain arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ContractError, DegenerateThresholdError

PROPENSITY_CLIP = (0.01, 0.99)


@dataclass
class PropensityWeights:
    """Per-subject propensity e(x_i) and the overall treated share e_hat."""

    e: np.ndarray
    e_hat: float
    model: object = None

    def __post_init__(self):
        self.e = np.asarray(self.e, dtype=np.float64)
        if not 0.0 < self.e_hat < 1.0:
            raise ContractError(f"overall propensity {self.e_hat} outside (0, 1)")

    def subset(self, idx):
        return PropensityWeights(self.e[idx], self.e_hat, self.model)


@dataclass
class BarrierConfig:
    """Percentage or budget constraint plus the annealed sigmoid temperature."""

    percentage: float = None
    budget: float = None
    temperature: float = 0.5
    increment: float = 0.1
    period: int = 10

    def __post_init__(self):
        if (self.percentage is None) == (self.budget is None):
            raise ContractError("set exactly one of percentage or budget")
        if self.percentage is not None and not 0.0 < self.percentage < 1.0:
            raise ContractError(f"percentage {self.percentage} outside (0, 1)")
        if self.budget is not None and not self.budget > 0:
            raise ContractError(f"budget {self.budget} must be positive")
        if self.temperature <= 0 or self.period < 1:
            raise ContractError("temperature must be positive and period >= 1")

    @property
    def kind(self):
        return "percentage" if self.percentage is not None else "budget"

    def temperature_at(self, step):
        """Temperature after ``step`` optimizer steps."""
        return self.temperature + self.increment * (int(step) // self.period)


def _cohort_ids(labels):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ContractError("cohort labels must be a vector")
    return labels.astype(np.intp)


def cohort_softmax(scores, cohort_labels):
    """Softmax of ``scores`` within each cohort (labels 0 = control, 1 = treated)."""
    ids = _cohort_ids(cohort_labels)
    sv = dc.value_of(scores)
    if sv.shape != ids.shape:
        raise ContractError(f"scores {sv.shape} and labels {ids.shape} differ in shape")
    counts = np.bincount(ids, minlength=2)
    if np.any(counts[:2] == 0):
        raise ContractError(f"empty cohort (control={counts[0]}, treated={counts[1]})")
    # constant shift: the softmax is invariant to it, so it carries no gradient
    shift = np.array([sv[ids == k].max() for k in range(len(counts))])[ids]
    e = dc.exp(dc.sub(scores, shift))
    z = dc.segment_sum(e, ids, len(counts))
    return dc.div(e, dc.take(z, ids))


def renormalize(p, cohort_labels):
    """Divide each entry by its cohort's total."""
    ids = _cohort_ids(cohort_labels)
    z = dc.segment_sum(p, ids, ids.max() + 1)
    return dc.div(p, dc.take(z, ids))


def tau_hat(p, y, treatment):
    """sum_{T=1} p_i y_i - sum_{T=0} p_i y_i."""
    sign = 2.0 * np.asarray(treatment, dtype=np.float64) - 1.0
    return dc.sum(dc.mul(p, sign * np.asarray(y, dtype=np.float64)))


def propensity_weighted_tau(p, y, treatment, weights):
    """Inverse-propensity version of :func:`tau_hat`.

    e_hat * sum_{T=1} y p / e(x) - (1 - e_hat) * sum_{T=0} y p / (1 - e(x)).
    """
    lo, hi = PROPENSITY_CLIP
    e = np.asarray(weights.e, dtype=np.float64)
    if np.any(e < lo) or np.any(e > hi):
        raise ContractError(f"propensities must lie in [{lo}, {hi}]; clip them first")
    t = np.asarray(treatment, dtype=np.float64)
    coef = weights.e_hat * t / e - (1.0 - weights.e_hat) * (1.0 - t) / (1.0 - e)
    return dc.sum(dc.mul(p, coef * np.asarray(y, dtype=np.float64)))


def ratio_objective(tau_r, tau_c, reg=0.0, theta_norm2=0.0, invert=False):
    """softplus(tau_r) / softplus(tau_c) - reg * ||theta||^2.

    With ``invert`` the ratio is cost per unit gain instead; callers then
    minimise. The penalty is always subtracted from the maximised form.
    """
    num, den = dc.softplus(tau_r), dc.softplus(tau_c)
    ratio = dc.div(den, num) if invert else dc.div(num, den)
    if invert:
        return dc.add(ratio, dc.mul(reg, theta_norm2))
    return dc.sub(ratio, dc.mul(reg, theta_norm2))


def barrier_apply(p, d_star, temperature, cohort_labels=None, active=None):
    """Soft top-set gate: p_i * sigmoid(T (p_i - d*)), renormalised per cohort.

    ``d_star`` and ``temperature`` may be scalars or per-entry vectors (one
    value per cohort broadcast to its rows). Entries where ``active`` is
    False pass through ungated.
    """
    temperature = np.asarray(temperature, dtype=np.float64)
    if np.any(temperature <= 0):
        raise ContractError("temperature must be positive")
    gate = dc.sigmoid(dc.mul(temperature, dc.sub(p, d_star)))
    if active is not None:
        active = np.asarray(active, dtype=np.float64)
        gate = dc.add(dc.mul(gate, active), 1.0 - active)
    p_hat = dc.mul(p, gate)
    if cohort_labels is None:
        cohort_labels = np.zeros(dc.value_of(p).shape, dtype=np.intp)
    return renormalize(p_hat, cohort_labels)


def _descending(p):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ContractError("probabilities must be a non-empty vector")
    order = np.argsort(-p, kind="stable")
    return p, order


def percentage_cut(p, percentage):
    """Indices (last kept, first dropped) for keeping the top ceil(P n) entries."""
    if not 0.0 < percentage < 1.0:
        raise ContractError(f"percentage {percentage} outside (0, 1)")
    p, order = _descending(p)
    n = p.size
    k = math.ceil(percentage * n - 1e-9)
    if k <= 0 or k >= n:
        raise ContractError(f"P * n = {percentage * n:g} selects {k} of {n}; need 0 < k < n")
    hi, lo = order[k - 1], order[k]
    if not p[hi] > p[lo]:
        raise DegenerateThresholdError(f"tie at the cut (rank {k}): no separating interval")
    return hi, lo


def threshold_for_percentage(p, percentage):
    """Midpoint threshold with exactly ceil(P n) entries above it."""
    hi, lo = percentage_cut(p, percentage)
    p = np.asarray(p, dtype=np.float64)
    return 0.5 * (p[hi] + p[lo])


def budget_cut(p, costs, budget):
    """Number of top-ranked entries whose total cost fits ``budget``, with cut indices.

    Returns (k, hi, lo); hi/lo are None when k is 0 or n.
    """
    if not budget > 0:
        raise ContractError(f"budget {budget} must be positive")
    p, order = _descending(p)
    costs = np.asarray(costs, dtype=np.float64)
    if costs.shape != p.shape:
        raise ContractError("costs and probabilities differ in shape")
    if np.any(costs < 0):
        raise ContractError("costs must be non-negative")
    cum = np.cumsum(costs[order])
    k = int(np.searchsorted(cum, budget, side="right"))
    # entries tied with the first excluded one cannot be separated from it
    while 0 < k < p.size and not p[order[k - 1]] > p[order[k]]:
        k -= 1
    if k in (0, p.size):
        return k, None, None
    return k, order[k - 1], order[k]


def threshold_for_budget(p, costs, budget):
    """Greedy-by-probability threshold whose selected cost stays within budget.

    Selecting everything returns -inf, selecting nothing returns +inf.
    """
    k, hi, lo = budget_cut(p, costs, budget)
    if k == 0:
        return math.inf
    if hi is None:
        return -math.inf
    p = np.asarray(p, dtype=np.float64)
    return 0.5 * (p[hi] + p[lo])
