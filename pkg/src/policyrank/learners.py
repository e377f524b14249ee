"""Trainers and baselines.

* ``train_scpm``: stacked NANBL posterior + cost-aware ratio objective.
* ``train_drm``: one-layer tanh scorer + cohort softmax, same objective.
* ``train_constrained``: DRM with a barrier gate for a percentage or budget.
* ``fit_propensity``: logistic regression by gradient descent.
* ``fit_rlearner_tau`` / ``duality_solve`` / ``train_duality``: the ridge
  quasi-oracle baseline with Lagrangian-dual selection.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diffcore as dc
from . import metrics
from .errors import ContractError, DegenerateThresholdError, NumericDomainError
from .objectives import (
    PROPENSITY_CLIP, BarrierConfig, PropensityWeights, barrier_apply, budget_cut,
    cohort_softmax, percentage_cut, propensity_weighted_tau, ratio_objective, tau_hat,
)
from .policy_model import (
    CohortView, ContinuousIntensity, DiscreteAssignment, MlpModel, PolicyFactorSet, Prior,
    build_mlp, load_checkpoint, prior_prob, recursive_forward, save_checkpoint,
)

logger = logging.getLogger(__name__)

MODEL_KINDS = ("scpm", "drm", "constrained", "duality")
LAMBDA_GRID = (0.001, 0.005, 0.01, 0.05, 0.1)


class TrainingError(RuntimeError):
    """Training produced a non-finite objective."""


@dataclass
class TrainConfig:
    batch_size: int = 8000
    lr: float = 0.001
    epochs: int = 10
    iterations: int = None  # overrides epochs when set
    hidden: int = 32
    reg: float = 0.0
    seed: int = 0
    propensity: str = "off"  # off | weighted
    invert: bool = False
    eval_every: int = 100  # validation AUCC cadence in steps; 0 disables selection

    def __post_init__(self):
        if self.batch_size < 2:
            raise ContractError("batch size must be >= 2")
        if self.propensity not in ("off", "weighted"):
            raise ContractError(f"propensity mode must be off|weighted, got {self.propensity!r}")


SCPM_DEFAULTS = TrainConfig()
DRM_DEFAULTS = TrainConfig(iterations=1500)


@dataclass
class TrainedModel:
    """A fitted scorer plus its training log; ``score`` ranks subjects."""

    kind: str
    models: dict
    meta: dict = field(default_factory=dict)
    log: list = field(default_factory=list)

    def score(self, x):
        x = x.x if hasattr(x, "x") else np.asarray(x, dtype=np.float64)
        if self.kind == "scpm":
            return prior_prob(self.models["prior"], x)
        return self.models["scorer"].predict(x)

    @property
    def input_dim(self):
        return self.models["prior" if self.kind == "scpm" else "scorer"].input_dim

    def save(self, path):
        save_checkpoint(path, self.models, {"kind": self.kind, **self.meta})

    @classmethod
    def load(cls, path):
        models, meta = load_checkpoint(path)
        kind = meta.pop("kind", "drm")
        return cls(kind, models, meta)

    def write_log(self, path):
        with open(path, "w") as fh:
            fh.write("step,objective,tau_r,tau_c,extra\n")
            for row in self.log:
                fh.write(f"{row['step']},{row['objective']!r},{row['tau_r']!r},{row['tau_c']!r},"
                         f"{row.get('extra', '')}\n")


# ---------------------------------------------------------------------------
# Batching and shared loop
# ---------------------------------------------------------------------------

def stratified_batches(treatment, batch_size, rng):
    """One epoch of batches without replacement, each holding both cohorts."""
    treatment = np.asarray(treatment)
    treated = rng.permutation(np.flatnonzero(treatment == 1))
    control = rng.permutation(np.flatnonzero(treatment == 0))
    if len(treated) == 0 or len(control) == 0:
        raise ContractError("both cohorts are needed to form batches")
    nb = max(1, math.ceil(len(treatment) / batch_size))
    nb = min(nb, len(treated), len(control))
    for t_part, c_part in zip(np.array_split(treated, nb), np.array_split(control, nb)):
        yield np.concatenate([t_part, c_part])


def _batch_stream(treatment, config, rng):
    while True:
        yield from stratified_batches(treatment, min(config.batch_size, len(treatment)), rng)


def _n_steps(n, config):
    if config.iterations is not None:
        return int(config.iterations)
    return config.epochs * max(1, math.ceil(n / min(config.batch_size, n)))


def _tau(p, y, treatment, weights):
    if weights is None:
        return tau_hat(p, y, treatment)
    return propensity_weighted_tau(p, y, treatment, weights)


def _finish(tau_r, tau_c, theta, config):
    norm2 = dc.sum(dc.mul(theta, theta)) if config.reg else 0.0
    obj = ratio_objective(tau_r, tau_c, config.reg, norm2, config.invert)
    return obj, {"tau_r": float(dc.value_of(tau_r)), "tau_c": float(dc.value_of(tau_c))}


def _optimize(theta0, objective, data, config, validation=None, score_fn=None, extra=None):
    """Adam on a packed parameter vector; ascends unless ``config.invert``.

    ``objective(theta, batch_idx, step)`` returns (objective, info). When
    a validation set is given, the parameters with the best validation
    AUCC (checked every ``eval_every`` steps and at the end) are kept.
    """
    rng = np.random.default_rng(config.seed + 1)
    stream = _batch_stream(data.treatment, config, rng)
    theta = np.array(theta0, dtype=np.float64)
    state = dc.AdamState.fresh(theta.size, lr=config.lr)
    sign = 1.0 if config.invert else -1.0
    n_steps = _n_steps(data.n, config)
    log = []
    best = (-math.inf, theta.copy(), 0)
    for step in range(n_steps):
        idx = next(stream)
        graph = dc.Graph()
        theta_var = graph.leaf(theta)
        try:
            obj, info = objective(theta_var, idx, step)
        except NumericDomainError as exc:
            raise TrainingError(f"step {step}: {exc}; |theta|max={np.abs(theta).max():.3g}") from exc
        (grad,) = graph.backward(obj)
        theta, state = dc.adam_step(theta, sign * grad, state)
        row = {"step": step, "objective": float(obj.value), **info}
        if extra is not None:
            row["extra"] = extra(step, info)
        log.append(row)
        last = step == n_steps - 1
        if validation is not None and config.eval_every and ((step + 1) % config.eval_every == 0 or last):
            val = _validation_aucc(score_fn(theta), validation)
            if val > best[0]:
                best = (val, theta.copy(), step + 1)
    if validation is not None and config.eval_every:
        logger.info("selected step %d with validation AUCC %.4f", best[2], best[0])
        return best[1], log, {"val_aucc": best[0], "selected_step": best[2]}
    return theta, log, {}


def _validation_aucc(scores, data):
    return float(metrics.aucc(metrics.cost_curve(metrics.RankedEvalSet.from_dataset(scores, data))))


def _propensity_for(data, config, weights):
    if config.propensity == "off":
        return None
    if weights is None:
        weights = fit_propensity(data.x, data.treatment)
    return weights


# ---------------------------------------------------------------------------
# DRM and constrained ranking
# ---------------------------------------------------------------------------

def drm_scorer(d):
    """One-layer tanh(w.x + b) scorer, zero-initialised."""
    return MlpModel((d, 1), "tanh")


def drm_objective(theta, model, batch, config, weights=None, barrier=None, temperature=None):
    """Ratio objective of a scorer on one batch; returns (objective, info).

    ``theta`` is a Var (recorded) or an array (evaluated directly).
    """
    scores = model.forward(batch.x, theta)
    p = cohort_softmax(scores, batch.treatment)
    info = {}
    if barrier is not None:
        p, info = apply_barrier(p, batch, barrier, temperature)
    tau_r = _tau(p, batch.y_r, batch.treatment, weights)
    tau_c = _tau(p, batch.y_c, batch.treatment, weights)
    obj, tau_info = _finish(tau_r, tau_c, theta, config)
    return obj, {**tau_info, **info}


def apply_barrier(p, batch, barrier, temperature):
    """Gate ``p`` to each cohort's constrained top set.

    The threshold sits midway between the last kept and first dropped
    probability, so it moves with ``p`` and carries gradient. The
    temperature is scaled by cohort size, i.e. applied to n * p, which
    keeps the gate's sharpness independent of batch size. Ties at the cut
    (or a budget that admits nobody) skip the barrier for the batch.

    Returns:
        (gated probabilities, info) with info["top_mass"] the mean share of
        post-barrier mass on the top sets, or info["barrier"] = "skipped".
    """
    pv = dc.value_of(p)
    ids = np.asarray(batch.treatment, dtype=np.intp)
    d_rows = np.zeros(len(pv))
    d_star = 0.0
    active = np.zeros(len(pv))
    top = np.zeros(len(pv), dtype=bool)
    for k in (0, 1):
        rows = np.flatnonzero(ids == k)
        try:
            if barrier.kind == "percentage":
                hi, lo = percentage_cut(pv[rows], barrier.percentage)
            else:
                costs = np.maximum(batch.y_c[rows], 0.0)
                n_keep, hi, lo = budget_cut(pv[rows], costs, barrier.budget)
                if n_keep == 0:
                    raise DegenerateThresholdError("budget admits no subject")
                if hi is None:
                    top[rows] = True
                    continue
        except DegenerateThresholdError as exc:
            logger.debug("barrier skipped: %s", exc)
            return p, {"barrier": "skipped"}
        mask = (ids == k).astype(np.float64)
        d_k = dc.mul(0.5, dc.add(dc.take(p, rows[hi]), dc.take(p, rows[lo])))
        d_star = dc.add(d_star, dc.mul(d_k, mask))
        active[rows] = 1.0
        top[rows] = pv[rows] > 0.5 * (pv[rows[hi]] + pv[rows[lo]])
        d_rows[rows] = len(rows)
    if not active.any():
        return p, {"barrier": "inactive", "top_mass": 1.0}
    temp = temperature * np.where(active > 0, d_rows, 1.0)
    p_hat = barrier_apply(p, d_star, temp, ids, active=active)
    hv = dc.value_of(p_hat)
    masses = [hv[(ids == k) & top].sum() for k in (0, 1) if active[ids == k].any()]
    return p_hat, {"top_mass": float(np.mean(masses))}


def train_drm(data, config=DRM_DEFAULTS, validation=None, weights=None, barrier=None):
    """Direct ranking model; with ``barrier`` this is constrained ranking."""
    model = drm_scorer(data.d)
    weights = _propensity_for(data, config, weights)

    def objective(theta, idx, step):
        batch = data.subset(idx)
        w = None if weights is None else weights.subset(idx)
        temp = barrier.temperature_at(step) if barrier is not None else None
        return drm_objective(theta, model, batch, config, w, barrier, temp)

    def score_fn(theta):
        return model.forward(validation.x, theta)

    extra = None
    if barrier is not None:
        def extra(step, info):
            return f"temperature={barrier.temperature_at(step)!r};top_mass={info.get('top_mass', info.get('barrier'))}"

    theta, log, sel = _optimize(model.params, objective, data, config, validation, score_fn, extra)
    model.params = theta
    kind = "drm" if barrier is None else "constrained"
    meta = {"propensity": config.propensity, "seed": config.seed, **sel}
    if barrier is not None:
        meta.update({f"barrier_{k}": v for k, v in asdict(barrier).items() if v is not None})
        meta["final_temperature"] = barrier.temperature_at(_n_steps(data.n, config) - 1)
    return TrainedModel(kind, {"scorer": model}, meta, log)


def train_constrained(data, config=DRM_DEFAULTS, barrier=None, validation=None, weights=None):
    barrier = barrier or BarrierConfig(percentage=0.4)
    return train_drm(data, config, validation, weights, barrier)


def barrier_mass(trained, data, barrier, temperature, batch_size=None, seed=0):
    """Mean post-barrier mass on the constrained top set over one epoch of batches."""
    model = trained.models["scorer"]
    rng = np.random.default_rng(seed)
    out = []
    for idx in stratified_batches(data.treatment, batch_size or data.n, rng):
        batch = data.subset(idx)
        p = cohort_softmax(model.forward(batch.x), batch.treatment)
        _, info = apply_barrier(p, batch, barrier, temperature)
        if "top_mass" in info:
            out.append(info["top_mass"])
    return float(np.mean(out)) if out else float("nan")


# ---------------------------------------------------------------------------
# SCPM
# ---------------------------------------------------------------------------

def default_factors(data, hidden=32, rng=None):
    """Prior, plus intensity / assignment factors when the dataset has them."""
    rng = rng or np.random.default_rng(0)
    factors = [Prior(build_mlp(data.d, hidden, "sigmoid", rng=rng))]
    rho_t = data.rho[data.treatment == 1]
    if np.any(rho_t != 0):
        std = rho_t.std()
        factors.append(ContinuousIntensity(build_mlp(data.d, hidden, "linear", rng=rng),
                                           rho_t.mean(), std if std > 0 else 1.0))
    if data.t_a is not None and data.n_classes > 1:
        width = data.d + (0 if data.item_x is None else data.item_x.shape[1])
        factors.append(DiscreteAssignment(
            build_mlp(width, hidden, "logits", out_dim=data.n_classes, rng=rng)))
    return PolicyFactorSet(factors)


def scpm_objective(theta, factors, batch, config, weights=None):
    """Treated cohort: stacked NANBL posterior. Control cohort: softmax of log f(x)."""
    thetas = factors.split_params(theta)
    t_rows = np.flatnonzero(batch.treatment == 1)
    c_rows = np.flatnonzero(batch.treatment == 0)
    if len(t_rows) == 0 or len(c_rows) == 0:
        raise ContractError("batch needs both cohorts")
    view = CohortView.from_dataset(batch, t_rows, treated=True)
    if len(factors) > 1:
        p_t = recursive_forward(factors, view, thetas)
    else:
        f_t = prior_prob(factors.prior.model, view.x, thetas[0])
        p_t = dc.div(f_t, dc.sum(f_t))
    # softmax of log f(x) over the cohort, i.e. f / sum f
    f_c = prior_prob(factors.prior.model, batch.x[c_rows], thetas[0])
    p_c = dc.div(f_c, dc.sum(f_c))
    p = dc.concat([p_t, p_c])
    order = np.concatenate([t_rows, c_rows])
    t = batch.treatment[order]
    w = None if weights is None else weights.subset(order)
    tau_r = _tau(p, batch.y_r[order], t, w)
    tau_c = _tau(p, batch.y_c[order], t, w)
    return _finish(tau_r, tau_c, theta, config)


def train_scpm(data, factors=None, config=SCPM_DEFAULTS, validation=None, weights=None):
    """Fit every factor network jointly; test-time scores use the prior only."""
    rng = np.random.default_rng(config.seed)
    factors = factors or default_factors(data, config.hidden, rng)
    weights = _propensity_for(data, config, weights)

    def objective(theta, idx, step):
        w = None if weights is None else weights.subset(idx)
        return scpm_objective(theta, factors, data.subset(idx), config, w)

    prior_n = factors.prior.model.param_count

    def score_fn(theta):
        return prior_prob(factors.prior.model, validation.x, theta[:prior_n])

    theta, log, sel = _optimize(factors.pack(), objective, data, config, validation, score_fn)
    factors.unpack(theta)
    models = {f.kind: f.model for f in factors}
    meta = {"propensity": config.propensity, "seed": config.seed, **sel}
    for f in factors:
        if isinstance(f, ContinuousIntensity):
            meta.update(rho_mean=repr(f.rho_mean), rho_std=repr(f.rho_std))
    trained = TrainedModel("scpm", models, meta, log)
    trained.factors = factors
    return trained


# ---------------------------------------------------------------------------
# Propensity
# ---------------------------------------------------------------------------

@dataclass
class LogisticModel:
    coef: np.ndarray
    intercept: float
    mean: np.ndarray
    std: np.ndarray
    loss_history: list = field(default_factory=list)

    def predict(self, x):
        z = (np.asarray(x, dtype=np.float64) - self.mean) / self.std
        return dc.sigmoid(z @ self.coef + self.intercept)

    def weights(self, x, e_hat):
        lo, hi = PROPENSITY_CLIP
        return PropensityWeights(np.clip(self.predict(x), lo, hi), e_hat, self)


def _log_loss(logits, t):
    return float(np.mean(np.logaddexp(0.0, logits) - t * logits))


def fit_propensity(x, treatment, lr=1.0, epochs=500, standardize=True):
    """Logistic regression by full-batch gradient descent on the log-loss.

    Returns PropensityWeights for the training rows (clipped to
    [0.01, 0.99]) with ``e_hat`` the treated share; ``weights.model``
    scores new rows.
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(treatment, dtype=np.float64)
    if t.min() == t.max():
        raise ContractError("propensity fitting needs both treated and control rows")
    mean = x.mean(axis=0) if standardize else np.zeros(x.shape[1])
    std = x.std(axis=0) if standardize else np.ones(x.shape[1])
    std = np.where(std > 0, std, 1.0)
    z = (x - mean) / std
    coef = np.zeros(x.shape[1])
    b = 0.0
    history = []
    for _ in range(epochs):
        logits = z @ coef + b
        history.append(_log_loss(logits, t))
        r = dc.sigmoid(logits) - t
        coef = coef - lr * (z.T @ r) / len(t)
        b = b - lr * r.mean()
    history.append(_log_loss(z @ coef + b, t))
    model = LogisticModel(coef, b, mean, std, history)
    return model.weights(x, float(t.mean()))


# ---------------------------------------------------------------------------
# Ridge quasi-oracle estimation and the Lagrangian dual
# ---------------------------------------------------------------------------

def _design(x):
    x = np.asarray(x, dtype=np.float64)
    return np.hstack([np.ones((x.shape[0], 1)), x])


def _ridge(a, y, penalty):
    gram = a.T @ a + penalty * np.eye(a.shape[1])
    if not np.isfinite(gram).all() or np.linalg.cond(gram) > 1e14:
        raise ContractError("normal matrix is singular; increase the ridge penalty")
    return np.linalg.solve(gram, a.T @ y)


@dataclass
class RidgeTau:
    """Linear effect model tau(x) = b0 + x.b, plus the outcome model used to fit it."""

    outcome_coef: np.ndarray
    tau_coef: np.ndarray
    penalty: float

    def predict(self, x):
        return _design(x) @ self.tau_coef

    def to_model(self):
        return MlpModel((len(self.tau_coef) - 1, 1), "linear",
                        np.concatenate([self.tau_coef[1:], self.tau_coef[:1]]))


def fit_rlearner_tau(x, treatment, y, e, penalty=1.0):
    """Two-stage ridge R-learner.

    Stage 1 fits m(x) ~ E[Y | x] on all rows; stage 2 solves
    min_b sum((Y - m(x)) - (T - e(x)) [1, x].b)^2 + penalty ||b||^2.
    ``e`` is PropensityWeights, an array, or a constant.
    """
    a = _design(x)
    t = np.asarray(treatment, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if a.shape[0] <= a.shape[1] - 1:
        raise ContractError(f"need more rows ({a.shape[0]}) than features ({a.shape[1] - 1})")
    if not penalty > 0:
        raise ContractError("ridge penalty must be positive")
    e = e.e if isinstance(e, PropensityWeights) else np.broadcast_to(np.asarray(e, dtype=np.float64), t.shape)
    outcome = _ridge(a, y, penalty)
    resid = y - a @ outcome
    z = (t - e)[:, None] * a
    return RidgeTau(outcome, _ridge(z, resid, penalty), penalty)


def ridge_loss(beta, x, treatment, y, e, outcome_coef, penalty):
    """Stage-2 R-learner loss as a differentiable function of ``beta``."""
    a = _design(x)
    resid = np.asarray(y, dtype=np.float64) - a @ outcome_coef
    z = (np.asarray(treatment, dtype=np.float64) - e)[:, None] * a
    r = dc.sub(resid, dc.matmul(z, beta))
    return dc.add(dc.sum(dc.mul(r, r)), dc.mul(penalty, dc.sum(dc.mul(beta, beta))))


def duality_combined_model(x, treatment, y_r, y_c, lam, e, penalty=1.0):
    """R-learner on the composite outcome Y^r - lam * Y^c."""
    if lam < 0:
        raise ContractError("lambda must be non-negative")
    y_e = np.asarray(y_r, dtype=np.float64) - lam * np.asarray(y_c, dtype=np.float64)
    return fit_rlearner_tau(x, treatment, y_e, e, penalty)


@dataclass
class DualState:
    lam: float
    z: np.ndarray
    alpha: float
    budget: float
    cost: float = 0.0
    gain: float = 0.0
    converged: bool = False
    log: list = field(default_factory=list)


def duality_solve(tau_r, tau_c, budget, alpha, iters=1000, lam0=0.0, update="ascent"):
    """Alternate the z-rule and projected λ steps for the budgeted selection.

    z_i = 1 iff tau_r_i - λ tau_c_i >= 0; then λ <- max(0, λ + α g) with
    g = cost - B (``update="ascent"``) or B - cost (``update="descent"``).

    Returns the DualState of the best feasible selection met on the way
    (largest gain with cost <= B). ``converged`` is True when λ reached a
    fixed point at a feasible selection.
    """
    tau_r = np.asarray(tau_r, dtype=np.float64)
    tau_c = np.asarray(tau_c, dtype=np.float64)
    if not budget > 0 or not alpha > 0:
        raise ContractError("budget and alpha must be positive")
    if update not in ("ascent", "descent"):
        raise ContractError(f"unknown lambda update {update!r}")
    lam = float(lam0)
    log = []
    best = None
    converged = False
    for it in range(iters):
        z = (tau_r - lam * tau_c >= 0).astype(np.float64)
        cost = float(tau_c @ z)
        gain = float(tau_r @ z)
        log.append({"iter": it, "lam": lam, "cost": cost, "gain": gain})
        if cost <= budget and (best is None or gain > best[2]):
            best = (lam, z, gain, cost)
        g = cost - budget if update == "ascent" else budget - cost
        new_lam = max(0.0, lam + alpha * g)
        if new_lam == lam and cost <= budget:
            converged = True
            break
        lam = new_lam
    if best is None:
        logger.warning("duality_solve found no feasible selection in %d iterations", iters)
        best = (lam, z, gain, cost)
    lam, z, gain, cost = best
    return DualState(lam, z, alpha, budget, cost, gain, converged, log)


def train_duality(data, validation=None, lambda_grid=LAMBDA_GRID, penalty=1.0):
    """Combined-outcome R-learner with λ chosen by validation AUCC.

    Uses a constant propensity equal to the training treated share.
    """
    e_hat = float(data.treatment.mean())
    scores = {}
    fits = {}
    log = []
    for step, lam in enumerate(lambda_grid):
        fits[lam] = duality_combined_model(data.x, data.treatment, data.y_r, data.y_c, lam, e_hat, penalty)
        if validation is not None:
            scores[lam] = _validation_aucc(fits[lam].predict(validation.x), validation)
        pred = fits[lam].predict(data.x)
        log.append({"step": step, "objective": scores.get(lam, math.nan),
                    "tau_r": float(pred.mean()), "tau_c": math.nan, "extra": f"lambda={lam!r}"})
    best = max(scores, key=scores.get) if scores else lambda_grid[0]
    meta = {"lambda": repr(best), "penalty": repr(penalty)}
    if scores:
        meta["val_aucc"] = repr(scores[best])
        meta["lambda_grid_aucc"] = ";".join(f"{k}:{v:.4f}" for k, v in scores.items())
    return TrainedModel("duality", {"scorer": fits[best].to_model()}, meta, log)


# ---------------------------------------------------------------------------
# Gradient checks
# ---------------------------------------------------------------------------

GRADCHECK_KINDS = ("scpm", "drm", "constrained", "propensity", "duality")


@dataclass
class GradCheckReport:
    kind: str
    rows: int
    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray

    def passed(self, tolerance):
        return self.max_rel_error < tolerance


def gradcheck_batch(data, rows, seed=0):
    """``rows`` rows split evenly between the cohorts."""
    if not 2 <= rows <= 100:
        raise ContractError(f"gradient checks take 2..100 rows, got {rows}")
    rng = np.random.default_rng(seed)
    n_t = rows // 2
    treated = data.treated_idx
    control = data.control_idx
    if len(treated) < n_t or len(control) < rows - n_t:
        raise ContractError("not enough rows in one cohort for the gradient check")
    idx = np.concatenate([rng.choice(treated, n_t, replace=False),
                          rng.choice(control, rows - n_t, replace=False)])
    return data.subset(np.sort(idx))


def objective_for(kind, batch, seed=0, hidden=8, barrier=None):
    """(fn(theta), theta0) for the full objective of ``kind`` on one batch.

    Parameters start from a random draw so every gradient path is active.
    """
    rng = np.random.default_rng(seed)
    config = TrainConfig(batch_size=max(2, batch.n), seed=seed)
    if kind in ("drm", "constrained", "propensity"):
        model = drm_scorer(batch.d).init(rng)
        weights = fit_propensity(batch.x, batch.treatment, epochs=50) if kind == "propensity" else None
        if kind == "constrained":
            barrier = barrier or BarrierConfig(percentage=0.4)
            temp = barrier.temperature_at(0)
        else:
            barrier, temp = None, None
        return (lambda th: drm_objective(th, model, batch, config, weights, barrier, temp)[0],
                model.params)
    if kind == "scpm":
        factors = default_factors(batch, hidden, rng)
        return lambda th: scpm_objective(th, factors, batch, config)[0], factors.pack()
    if kind == "duality":
        e = float(batch.treatment.mean())
        outcome = _ridge(_design(batch.x), batch.y_r, 1.0)
        beta0 = rng.normal(scale=0.1, size=outcome.shape)
        return (lambda th: ridge_loss(th, batch.x, batch.treatment, batch.y_r, e, outcome, 1.0),
                beta0)
    raise ContractError(f"unknown model {kind!r}; choose from {GRADCHECK_KINDS}")


def gradient_check(kind, data, rows=20, seed=0, h=1e-5, barrier=None):
    """Tape gradient of the full objective against central differences."""
    batch = gradcheck_batch(data, rows, seed)
    fn, theta0 = objective_for(kind, batch, seed, barrier=barrier)
    graph = dc.Graph()
    out = fn(graph.leaf(theta0))
    (analytic,) = graph.backward(out)
    numeric = dc.finite_diff_grad(fn, theta0, h)
    return GradCheckReport(kind, rows, dc.max_relative_error(analytic, numeric), analytic, numeric)
