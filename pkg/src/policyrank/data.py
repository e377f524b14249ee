"""Cohort datasets: CSV ingestion, public-dataset recipes, splits and a
synthetic generator with known per-subject treatment effects."""

from __future__ import annotations

import logging
import math
import operator
import os
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .errors import ContractError, IngestionError

logger = logging.getLogger(__name__)

CACHE_FORMAT = "# policyrank-dataset 1"


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

@dataclass
class CohortDataset:
    """Covariates, treatment indicator, policy variables and two outcomes.

    ``t_a`` holds assignment classes 0..K-1 for treated rows and -1 for
    control rows; ``item_x`` holds the assigned item's covariates (zeros
    for control rows).
    """

    x: np.ndarray
    treatment: np.ndarray
    rho: np.ndarray
    y_r: np.ndarray
    y_c: np.ndarray
    t_a: np.ndarray = None
    item_x: np.ndarray = None
    feature_names: list = None
    n_classes: int = 0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise ContractError("covariates must be a 2-D matrix")
        n = self.x.shape[0]
        self.treatment = np.asarray(self.treatment).astype(np.intp)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        self.y_r = np.asarray(self.y_r, dtype=np.float64)
        self.y_c = np.asarray(self.y_c, dtype=np.float64)
        for name in ("treatment", "rho", "y_r", "y_c"):
            if getattr(self, name).shape != (n,):
                raise ContractError(f"{name} must have shape ({n},)")
        if not np.isin(self.treatment, (0, 1)).all():
            raise ContractError("treatment must be 0/1")
        if self.t_a is not None:
            self.t_a = np.asarray(self.t_a).astype(np.intp)
            if self.t_a.shape != (n,):
                raise ContractError(f"t_a must have shape ({n},)")
            if not self.n_classes:
                self.n_classes = int(self.t_a.max()) + 1
        if self.item_x is not None:
            self.item_x = np.asarray(self.item_x, dtype=np.float64)
            if self.item_x.ndim != 2 or self.item_x.shape[0] != n:
                raise ContractError("item covariates must be an (n, k) matrix")
        if self.feature_names is None:
            self.feature_names = [f"x{j}" for j in range(self.x.shape[1])]
        self.validate()

    def validate(self):
        if np.any(self.rho[self.treatment == 0] != 0):
            raise ContractError("control rows must have zero intensity")
        if np.any(self.rho < 0):
            raise ContractError("intensity must be non-negative")
        for name in ("x", "rho", "y_r", "y_c", "item_x"):
            arr = getattr(self, name)
            if arr is not None and not np.all(np.isfinite(arr)):
                raise ContractError(f"{name} contains non-finite values")
        if self.n_treated == 0 or self.n_treated == self.n:
            raise ContractError(f"both cohorts must be non-empty (treated={self.n_treated}, n={self.n})")

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def d(self):
        return self.x.shape[1]

    @property
    def n_treated(self):
        return int(self.treatment.sum())

    @property
    def treated_idx(self):
        return np.flatnonzero(self.treatment == 1)

    @property
    def control_idx(self):
        return np.flatnonzero(self.treatment == 0)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return replace(
            self,
            x=self.x[idx], treatment=self.treatment[idx], rho=self.rho[idx],
            y_r=self.y_r[idx], y_c=self.y_c[idx],
            t_a=None if self.t_a is None else self.t_a[idx],
            item_x=None if self.item_x is None else self.item_x[idx],
            feature_names=list(self.feature_names),
        )

    def save(self, path):
        """Write the processed dataset as a headed, comma-separated text table."""
        cols = [self.x]
        names = [f"x:{name}" for name in self.feature_names]
        cols += [self.treatment[:, None], self.rho[:, None], self.y_r[:, None], self.y_c[:, None]]
        names += ["treatment", "rho", "y_r", "y_c"]
        if self.t_a is not None:
            cols.append(self.t_a[:, None])
            names.append("t_a")
        if self.item_x is not None:
            cols.append(self.item_x)
            names += [f"item:{j}" for j in range(self.item_x.shape[1])]
        table = np.hstack([np.asarray(c, dtype=np.float64) for c in cols])
        with open(path, "w") as fh:
            fh.write(f"{CACHE_FORMAT} n_classes={self.n_classes}\n")
            fh.write(",".join(names) + "\n")
            np.savetxt(fh, table, fmt="%.17g", delimiter=",")

    @classmethod
    def load(cls, path):
        if not os.path.exists(path):
            raise IngestionError(f"dataset file not found: {path}")
        with open(path) as fh:
            first = fh.readline().rstrip("\n")
            if not first.startswith(CACHE_FORMAT):
                raise IngestionError(f"{path}: not a processed dataset (missing '{CACHE_FORMAT}' header)")
            n_classes = int(first.split("n_classes=")[1]) if "n_classes=" in first else 0
            names = fh.readline().rstrip("\n").split(",")
            table = np.loadtxt(fh, delimiter=",", ndmin=2)
        col = {name: j for j, name in enumerate(names)}
        x_cols = [j for j, name in enumerate(names) if name.startswith("x:")]
        item_cols = [j for j, name in enumerate(names) if name.startswith("item:")]
        return cls(
            x=table[:, x_cols],
            treatment=table[:, col["treatment"]],
            rho=table[:, col["rho"]],
            y_r=table[:, col["y_r"]],
            y_c=table[:, col["y_c"]],
            t_a=table[:, col["t_a"]] if "t_a" in col else None,
            item_x=table[:, item_cols] if item_cols else None,
            feature_names=[names[j][2:] for j in x_cols],
            n_classes=n_classes,
        )


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

@dataclass
class Split:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        for name in ("train", "validation", "test"):
            np.savetxt(os.path.join(directory, f"{name}.idx"), getattr(self, name), fmt="%d")

    @classmethod
    def load(cls, directory):
        return cls(*(np.loadtxt(os.path.join(directory, f"{name}.idx"), dtype=np.intp, ndmin=1)
                     for name in ("train", "validation", "test")))


def _largest_remainder(total, fractions):
    raw = np.asarray(fractions, dtype=np.float64) * total
    out = np.floor(raw).astype(int)
    for j in np.argsort(-(raw - out), kind="stable")[: total - out.sum()]:
        out[j] += 1
    return out


def split_3_1_1(treatment, seed=0):
    """Stratified 60/20/20 train/validation/test split of row indices.

    ``treatment`` may be a 0/1 vector or a :class:`CohortDataset`.
    """
    if isinstance(treatment, CohortDataset):
        treatment = treatment.treatment
    treatment = np.asarray(treatment).astype(np.intp)
    n = len(treatment)
    if n < 5:
        raise ContractError("need at least 5 rows to split")
    rng = np.random.default_rng(seed)
    sizes = _largest_remainder(n, (0.6, 0.2, 0.2))
    treated = np.flatnonzero(treatment == 1)
    control = np.flatnonzero(treatment == 0)
    t_sizes = _largest_remainder(len(treated), sizes / n)
    c_sizes = sizes - t_sizes
    if np.any(c_sizes < 0):
        raise ContractError(f"cannot stratify {n} rows with {len(treated)} treated")
    parts = []
    for idx, sz in ((rng.permutation(treated), t_sizes), (rng.permutation(control), c_sizes)):
        parts.append(np.split(idx, np.cumsum(sz)[:-1]))
    return Split(*(np.sort(np.concatenate([parts[0][j], parts[1][j]])) for j in range(3)))


# ---------------------------------------------------------------------------
# Schema and CSV ingestion
# ---------------------------------------------------------------------------

_OPS = {
    "<": operator.lt, "<=": operator.le, ">": operator.gt,
    ">=": operator.ge, "==": operator.eq, "!=": operator.ne,
}
RULES = ("identity", "above_median", "below_median")


@dataclass
class SchemaConfig:
    """How CSV columns map to dataset roles.

    Derivation rules: ``identity``, ``above_median`` / ``below_median``
    (strict inequality against the filtered-population median) or
    ``equals:<value>`` (indicator).
    """

    treatment: str
    gain: str
    cost: str
    treatment_rule: str = "identity"
    gain_rule: str = "identity"
    cost_rule: str = "identity"
    gain_scale: float = 1.0
    cost_scale: float = 1.0
    intensity: str = None
    assignment: str = None
    covariates: list = None
    categorical: list = field(default_factory=list)
    drop: list = field(default_factory=list)
    filters: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("treatment_rule", "gain_rule", "cost_rule"):
            rule = getattr(self, name)
            if rule not in RULES and not rule.startswith("equals:"):
                raise IngestionError(f"{name}: unknown rule {rule!r}")
        for f in self.filters:
            if len(f) != 3 or f[1] not in _OPS:
                raise IngestionError(f"bad filter {f!r}; expected (column, op, value)")

    @property
    def role_columns(self):
        return [c for c in (self.treatment, self.gain, self.cost, self.intensity, self.assignment) if c]

    @classmethod
    def parse(cls, text):
        """Parse ``key = value`` lines; ``filter`` may repeat as ``column op value``."""
        kw = {"filters": []}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            # the first '=' separates key from value, so "filter = c >= 1" works
            key, sep, val = line.partition("=")
            if not sep:
                raise IngestionError(f"schema line {lineno}: expected key=value, got {raw!r}")
            key, val = key.strip(), val.strip()
            if key == "filter":
                parts = val.split()
                if len(parts) != 3:
                    raise IngestionError(f"schema line {lineno}: filter must be 'column op value'")
                kw["filters"].append((parts[0], parts[1], float(parts[2])))
            elif key in ("covariates", "categorical", "drop"):
                kw[key] = [c.strip() for c in val.split(",") if c.strip()]
            elif key in ("gain_scale", "cost_scale"):
                kw[key] = float(val)
            elif key in ("treatment", "gain", "cost", "treatment_rule", "gain_rule", "cost_rule",
                         "intensity", "assignment"):
                kw[key] = val
            else:
                raise IngestionError(f"schema line {lineno}: unknown key {key!r}")
        for key in ("treatment", "gain", "cost"):
            if key not in kw:
                raise IngestionError(f"schema is missing the mandatory '{key}' column")
        return cls(**kw)

    @classmethod
    def from_file(cls, path):
        if not os.path.exists(path):
            raise IngestionError(f"schema file not found: {path}")
        with open(path) as fh:
            return cls.parse(fh.read())


def census_recipe():
    """US Census 1990 extract: parents born in the U.S., younger than 50.

    Treatment marks above-median working hours; gain is income; cost is
    the number of children times -1.
    """
    return SchemaConfig(
        treatment="dHours", treatment_rule="above_median",
        gain="dIncome1",
        cost="iFertil", cost_scale=-1.0,
        drop=["caseid"],
        filters=[("iFertil", ">=", 1.5), ("iCitizen", "==", 0.0), ("dAge", "<", 5.0)],
    )


def covtype_recipe():
    """Covertype restricted to Spruce-Fir (1) and Lodgepole Pine (2).

    Treatment marks below-median distance to hydrology; gain marks
    below-median distance to fire points; cost is 1 for Lodgepole Pine.
    """
    return SchemaConfig(
        treatment="Horizontal_Distance_To_Hydrology", treatment_rule="below_median",
        gain="Horizontal_Distance_To_Fire_Points", gain_rule="below_median",
        cost="Cover_Type", cost_rule="equals:2",
        drop=["Vertical_Distance_To_Hydrology"],
        filters=[("Cover_Type", ">=", 1.0), ("Cover_Type", "<=", 2.0)],
    )


RECIPES = {"census": census_recipe, "covtype": covtype_recipe}


def _derive(values, rule, scale=1.0):
    if rule == "identity":
        out = values
    elif rule == "above_median":
        out = (values > np.median(values)).astype(np.float64)
    elif rule == "below_median":
        out = (values < np.median(values)).astype(np.float64)
    else:
        out = (values == float(rule.split(":", 1)[1])).astype(np.float64)
    return out * scale


@dataclass
class IngestResult:
    dataset: CohortDataset
    split: Split
    report: dict


def _numeric(df, col):
    vals = pd.to_numeric(df[col], errors="coerce")
    bad = vals.isna().to_numpy()
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise IngestionError(
            f"unparsable cell at data row {row + 1}, column {col!r}: {df[col].iloc[row]!r}")
    return vals.to_numpy(dtype=np.float64)


def load_csv(path, schema, seed=0):
    """Read a headed CSV into a normalised :class:`CohortDataset`.

    Categorical columns are one-hot expanded; dense columns are z-scored
    with statistics from the training part of a stratified 3/1/1 split
    drawn with ``seed`` (a constant column is divided by 1 and reported).

    Returns:
        IngestResult with the dataset, the split used for the statistics,
        and a report of dropped rows and flagged columns.
    """
    if not os.path.exists(path):
        raise IngestionError(f"input file not found: {path}")
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise IngestionError(f"{path}: cannot parse CSV: {exc}") from exc
    df.columns = [c.strip() for c in df.columns]
    needed = set(schema.role_columns) | {f[0] for f in schema.filters} | set(schema.categorical)
    if schema.covariates:
        needed |= set(schema.covariates)
    missing = sorted(needed - set(df.columns))
    if missing:
        raise IngestionError(f"{path}: missing column(s) {missing}")
    report = {"rows_read": len(df), "dropped": {}, "constant_columns": []}

    keep = np.ones(len(df), dtype=bool)
    for col, op, val in schema.filters:
        ok = _OPS[op](_numeric(df, col), val)
        report["dropped"][f"{col} {op} {val:g}"] = int((keep & ~ok).sum())
        keep &= ok
    df = df.loc[keep].reset_index(drop=True)
    report["rows_kept"] = len(df)
    if len(df) == 0:
        raise IngestionError(f"{path}: every row was removed by the filters")

    treatment = _derive(_numeric(df, schema.treatment), schema.treatment_rule)
    if not np.isin(treatment, (0.0, 1.0)).all():
        raise IngestionError(f"treatment column {schema.treatment!r} is not 0/1 after derivation")
    y_r = _derive(_numeric(df, schema.gain), schema.gain_rule, schema.gain_scale)
    y_c = _derive(_numeric(df, schema.cost), schema.cost_rule, schema.cost_scale)
    rho = np.zeros(len(df))
    if schema.intensity:
        rho = np.where(treatment == 1, _numeric(df, schema.intensity), 0.0)
        if np.any(rho < 0):
            raise IngestionError(f"intensity column {schema.intensity!r} has negative values")
    t_a, n_classes = None, 0
    if schema.assignment:
        levels = sorted(set(df.loc[treatment == 1, schema.assignment]))
        lookup = {lv: k for k, lv in enumerate(levels)}
        t_a = np.array([lookup[v] if t == 1 else -1 for v, t in zip(df[schema.assignment], treatment)])
        n_classes = len(levels)

    excluded = set(schema.role_columns) | set(schema.drop)
    cov_cols = schema.covariates or [c for c in df.columns if c not in excluded]
    blocks, names, dense = [], [], []
    for col in cov_cols:
        if col in schema.categorical:
            levels = sorted(set(df[col]))
            block = np.stack([(df[col] == lv).to_numpy(dtype=np.float64) for lv in levels], axis=1)
            blocks.append(block)
            names += [f"{col}={lv}" for lv in levels]
        else:
            dense.append(len(names))
            blocks.append(_numeric(df, col)[:, None])
            names.append(col)
    x = np.hstack(blocks) if blocks else np.zeros((len(df), 0))

    if treatment.sum() == 0 or treatment.sum() == len(treatment):
        raise IngestionError(f"{path}: a cohort is empty after filtering (treated={int(treatment.sum())})")
    split = split_3_1_1(treatment.astype(np.intp), seed)
    mean = x[split.train][:, dense].mean(axis=0)
    std = x[split.train][:, dense].std(axis=0)
    flat = std == 0
    report["constant_columns"] = [names[dense[j]] for j in np.flatnonzero(flat)]
    std[flat] = 1.0
    x[:, dense] = (x[:, dense] - mean) / std
    report["normalization"] = {names[j]: (float(m), float(s)) for j, m, s in zip(dense, mean, std)}

    data = CohortDataset(x, treatment, rho, y_r, y_c, t_a=t_a, feature_names=names, n_classes=n_classes)
    report["n"], report["d"] = data.n, data.d
    report["treated"] = data.n_treated
    return IngestResult(data, split, report)


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    """Planted uplift model.

    gain effect   tau_r(x, rho) = gain_base + gain_het * x.beta_r + intensity_effect * (rho - rho_bar(x))
    cost effect   tau_c(x)      = cost_base * exp(cost_het * x.beta_c)            (always > 0)
    intensity     rho_bar(x)    = max(0, intensity_base + intensity_het * x.eta)
    propensity    constant ``treat_prob`` or sigmoid(logit(treat_prob) + propensity_strength * x.gamma)

    ``confounding`` adds confounding * (x.gamma)^2 to the gain baseline, so
    untreated gain grows with the propensity index in a way a cohort-wise
    comparison cannot cancel. The hidden coefficient vectors have unit norm
    and mixed signs. With
    ``n_classes`` > 0 each treated subject also receives an item class;
    matching a user feature to the item adds ``assignment_effect`` to the
    gain effect.
    """

    n: int = 20000
    d: int = 10
    gain_base: float = 1.0
    gain_het: float = 1.0
    cost_base: float = 1.0
    cost_het: float = 0.5
    baseline: float = 0.5
    propensity: str = "constant"
    treat_prob: float = 0.5
    propensity_strength: float = 0.0
    confounding: float = 0.0
    noise: float = 0.5
    intensity_base: float = 1.0
    intensity_het: float = 0.3
    intensity_noise: float = 0.3
    intensity_effect: float = 0.5
    n_classes: int = 0
    item_dim: int = 0
    assignment_effect: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 100 or self.d < 2:
            raise ContractError("synthetic data needs n >= 100 and d >= 2")
        if self.confounding < 0:
            raise ContractError("confounding must be non-negative")
        if self.propensity not in ("constant", "logistic"):
            raise ContractError(f"unknown propensity family {self.propensity!r}")


PRESETS = {
    "default": SynthSpec(),
    "logistic": SynthSpec(propensity="logistic", propensity_strength=1.5, baseline=1.0, confounding=0.5),
    "ponpare-like": SynthSpec(n=5000, d=50, n_classes=8, item_dim=160, assignment_effect=0.5),
}


@dataclass
class GroundTruth:
    tau_r: np.ndarray
    tau_c: np.ndarray
    propensity: np.ndarray

    def save(self, path):
        with open(path, "w") as fh:
            fh.write("tau_r,tau_c,propensity\n")
            np.savetxt(fh, np.column_stack([self.tau_r, self.tau_c, self.propensity]),
                       fmt="%.17g", delimiter=",")


def _unit(rng, d):
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


def synth_generate(spec):
    """Draw a dataset from ``spec``; returns (CohortDataset, GroundTruth).

    Ground-truth effects are evaluated at the noise-free intensity
    rho_bar(x), so they are defined for control subjects too.
    """
    rng = np.random.default_rng(spec.seed)
    n, d = spec.n, spec.d
    beta_r, beta_c, eta, gamma = (_unit(rng, d) for _ in range(4))
    base_r, base_c = _unit(rng, d), _unit(rng, d)
    x = rng.normal(size=(n, d))

    if spec.propensity == "constant":
        e = np.full(n, spec.treat_prob)
    else:
        logit0 = math.log(spec.treat_prob / (1.0 - spec.treat_prob))
        e = 1.0 / (1.0 + np.exp(-(logit0 + spec.propensity_strength * x @ gamma)))
    treatment = (rng.uniform(size=n) < e).astype(np.intp)

    rho_bar = np.maximum(0.0, spec.intensity_base + spec.intensity_het * x @ eta)
    rho = np.maximum(0.0, rho_bar + spec.intensity_noise * rng.normal(size=n)) * treatment

    tau_r = spec.gain_base + spec.gain_het * x @ beta_r
    tau_c = spec.cost_base * np.exp(spec.cost_het * x @ beta_c)
    tau_r_obs = tau_r + spec.intensity_effect * (rho - rho_bar)

    t_a, item_x = None, None
    if spec.n_classes:
        k = spec.n_classes
        prefs = x[:, :k] + rng.gumbel(size=(n, k))
        t_a = np.where(treatment == 1, np.argmax(prefs, axis=1), -1)
        match = np.where(treatment == 1, x[np.arange(n), np.maximum(t_a, 0)], 0.0)
        tau_r_obs = tau_r_obs + spec.assignment_effect * match
        # expected match under the preference model, for the ground truth
        tau_r = tau_r + spec.assignment_effect * _expected_match(x[:, :k])
        items = rng.normal(size=(k, spec.item_dim)) if spec.item_dim else np.zeros((k, 0))
        item_x = np.where(treatment[:, None] == 1, items[np.maximum(t_a, 0)], 0.0)

    noise = spec.noise
    y_r = spec.baseline * x @ base_r + spec.confounding * (x @ gamma) ** 2 + treatment * tau_r_obs + noise * rng.normal(size=n)
    y_c = spec.baseline * x @ base_c + treatment * tau_c + noise * rng.normal(size=n)
    data = CohortDataset(x, treatment, rho, y_r, y_c, t_a=t_a, item_x=item_x, n_classes=spec.n_classes)
    return data, GroundTruth(tau_r, tau_c, e)


def _expected_match(prefs):
    """E[prefs_chosen] when the chosen class is argmax(prefs + Gumbel noise).

    The Gumbel-max choice probabilities are softmax(prefs).
    """
    w = np.exp(prefs - prefs.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    return np.sum(w * prefs, axis=1)
