"""Neural-augmented naive Bayes layers over treatment-policy factors.

The effectiveness posterior of a treated subject factorises into a prior
network ``f(x)`` and one likelihood per observed policy variable
(continuous intensity, discrete assignment, ...). Each likelihood comes
from its own network; the product is normalised over the cohort by an
explicit partition sum, so the whole stack is differentiable end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import ContractError

HEADS = ("sigmoid", "linear", "logits", "tanh")
CHECKPOINT_FORMAT = "policyrank-checkpoint"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

@dataclass
class MlpModel:
    """Feed-forward network with tanh hidden layers and a configurable head.

    Parameters are stored flat in declaration order: for every layer the
    weight matrix (row-major, fan_in x fan_out) followed by its bias.
    """

    widths: tuple
    head: str = "sigmoid"
    params: np.ndarray = None

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ContractError(f"invalid layer widths {self.widths}")
        if self.head not in HEADS:
            raise ContractError(f"unknown head {self.head!r}; expected one of {HEADS}")
        if self.head in ("sigmoid", "linear", "tanh") and self.widths[-1] != 1:
            raise ContractError(f"{self.head} head needs output width 1, got {self.widths[-1]}")
        if self.params is None:
            self.params = np.zeros(self.param_count)
        self.params = np.asarray(self.params, dtype=np.float64).copy()
        if self.params.shape != (self.param_count,):
            raise ContractError(
                f"expected {self.param_count} parameters, got {self.params.shape}")

    @property
    def input_dim(self):
        return self.widths[0]

    @property
    def param_count(self):
        return int(np.sum([a * b + b for a, b in zip(self.widths[:-1], self.widths[1:])]))

    def init(self, rng):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        chunks = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out + fan_out))
        self.params = np.concatenate(chunks)
        return self

    def forward(self, x, theta=None):
        """Network output for rows ``x``.

        ``theta`` may be a :class:`~policyrank.diffcore.Var` slice holding
        this model's parameters, in which case the computation is recorded
        for differentiation; otherwise the stored parameters are used.
        Returns shape (n,) for single-output heads and (n, K) for logits.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.input_dim:
            raise ContractError(f"input has {x.shape[1]} columns, model expects {self.input_dim}")
        theta = self.params if theta is None else theta
        h = x
        offset = 0
        n_layers = len(self.widths) - 1
        for layer, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            w = dc.reshape(dc.take(theta, slice(offset, offset + fan_in * fan_out)), (fan_in, fan_out))
            offset += fan_in * fan_out
            b = dc.take(theta, slice(offset, offset + fan_out))
            offset += fan_out
            h = dc.add(dc.matmul(h, w), b)
            if layer < n_layers - 1:
                h = dc.tanh(h)
        if self.head != "logits":
            h = dc.take(h, (slice(None), 0))
        if self.head == "sigmoid":
            return dc.sigmoid(h)
        if self.head == "tanh":
            return dc.tanh(h)
        return h

    def predict(self, x):
        return np.asarray(self.forward(x))


def build_mlp(input_dim, hidden, head, out_dim=1, rng=None):
    """MLP with hidden widths ``hidden`` (an int or a sequence)."""
    hidden = [hidden] if np.isscalar(hidden) else list(hidden)
    model = MlpModel((input_dim, *[h for h in hidden if h], out_dim), head)
    if rng is not None:
        model.init(rng)
    return model


# ---------------------------------------------------------------------------
# Factor likelihoods
# ---------------------------------------------------------------------------

def bell(u):
    """sigmoid(u) * (1 - sigmoid(u)): symmetric, peak 0.25 at u = 0."""
    s = dc.sigmoid(u)
    return dc.mul(s, dc.sub(1.0, s))


def prior_prob(f, x, theta=None):
    """p(I_x | x) = f(x) for a sigmoid-headed network."""
    if f.head != "sigmoid":
        raise ContractError(f"prior network needs a sigmoid head, got {f.head!r}")
    return f.forward(x, theta)


def intensity_likelihood(g_hat, x, rho, theta=None):
    """p(rho | x) = bell(rho - g_hat(x)); g_hat predicts the intensity centre."""
    if g_hat.head != "linear":
        raise ContractError(f"intensity network needs a linear head, got {g_hat.head!r}")
    return bell(dc.sub(np.asarray(rho, dtype=np.float64), g_hat.forward(x, theta)))


def assignment_likelihood(f_ta, x, t_a, theta=None):
    """Softmax probability of the observed assignment class."""
    if f_ta.head != "logits":
        raise ContractError(f"assignment network needs a class-logit head, got {f_ta.head!r}")
    t_a = np.atleast_1d(np.asarray(t_a))
    k = f_ta.widths[-1]
    if t_a.size and (t_a.min() < 0 or t_a.max() >= k):
        raise ContractError(f"assignment class out of range 0..{k - 1}")
    logits = f_ta.forward(x, theta)
    shift = np.max(dc.value_of(logits), axis=1, keepdims=True)
    e = dc.exp(dc.sub(logits, shift))
    rows = np.arange(len(t_a))
    return dc.div(dc.take(e, (rows, t_a.astype(np.intp))), dc.sum(e, axis=1))


def nanbl_posterior(prior, likelihood):
    """Normalised product l_i * f_i / sum_j l_j * f_j over one cohort."""
    pv, lv = dc.value_of(prior), dc.value_of(likelihood)
    if pv.shape != lv.shape or pv.ndim != 1 or pv.size == 0:
        raise ContractError(f"prior {pv.shape} and likelihood {lv.shape} must be equal non-empty vectors")
    if np.any(pv <= 0) or np.any(lv <= 0):
        raise ContractError("prior and likelihood values must be strictly positive")
    d = dc.mul(likelihood, prior)
    return dc.div(d, dc.sum(d))


# ---------------------------------------------------------------------------
# Policy factors and cohorts
# ---------------------------------------------------------------------------

@dataclass
class CohortView:
    """Rows of one cohort: covariates plus the observed policy variables."""

    indices: np.ndarray
    x: np.ndarray
    rho: np.ndarray = None
    t_a: np.ndarray = None
    item_x: np.ndarray = None
    treated: bool = True

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.intp)
        n = len(self.indices)
        if n == 0:
            raise ContractError("cohort view is empty")
        if len(np.unique(self.indices)) != n:
            raise ContractError("cohort view has duplicate indices")
        if self.x.shape[0] != n:
            raise ContractError("covariate rows do not match cohort size")
        if not self.treated and self.rho is not None and np.any(self.rho != 0):
            raise ContractError("control cohort must have zero intensity")

    def __len__(self):
        return len(self.indices)

    @classmethod
    def from_dataset(cls, data, indices, treated=True):
        indices = np.asarray(indices, dtype=np.intp)
        return cls(indices, data.x[indices],
                   rho=data.rho[indices],
                   t_a=None if data.t_a is None else data.t_a[indices],
                   item_x=None if data.item_x is None else data.item_x[indices],
                   treated=treated)


class Factor:
    """One policy variable: a network plus how it reads the cohort."""

    kind = "factor"

    def __init__(self, model):
        self.model = model

    def covariates(self, cohort):
        return cohort.x

    def values(self, cohort, theta=None):
        raise NotImplementedError


class Prior(Factor):
    kind = "prior"

    def values(self, cohort, theta=None):
        return prior_prob(self.model, self.covariates(cohort), theta)


class ContinuousIntensity(Factor):
    """Bell likelihood of the observed intensity, on a standardised scale."""

    kind = "intensity"

    def __init__(self, model, rho_mean=0.0, rho_std=1.0):
        super().__init__(model)
        self.rho_mean = float(rho_mean)
        self.rho_std = float(rho_std) if rho_std > 0 else 1.0

    def values(self, cohort, theta=None):
        if cohort.rho is None:
            raise ContractError("cohort has no intensity column")
        rho = (cohort.rho - self.rho_mean) / self.rho_std
        return intensity_likelihood(self.model, self.covariates(cohort), rho, theta)


class DiscreteAssignment(Factor):
    kind = "assignment"

    def covariates(self, cohort):
        if cohort.item_x is None:
            return cohort.x
        return np.concatenate([cohort.x, cohort.item_x], axis=1)

    def values(self, cohort, theta=None):
        if cohort.t_a is None:
            raise ContractError("cohort has no assignment column")
        return assignment_likelihood(self.model, self.covariates(cohort), cohort.t_a, theta)


_FACTOR_TYPES = {cls.kind: cls for cls in (Prior, ContinuousIntensity, DiscreteAssignment)}


@dataclass
class PolicyFactorSet:
    """Ordered factors; the prior comes first and appears exactly once."""

    factors: list = field(default_factory=list)

    def __post_init__(self):
        kinds = [f.kind for f in self.factors]
        if not kinds:
            raise ContractError("factor set is empty")
        if kinds[0] != "prior" or kinds.count("prior") != 1:
            raise ContractError(f"exactly one prior factor, placed first, is required; got {kinds}")

    def __len__(self):
        return len(self.factors)

    def __iter__(self):
        return iter(self.factors)

    @property
    def prior(self):
        return self.factors[0]

    @property
    def models(self):
        return [f.model for f in self.factors]

    def split_params(self, theta):
        """Slice a packed parameter vector (Var or array) into per-factor pieces."""
        out, offset = [], 0
        for m in self.models:
            out.append(dc.take(theta, slice(offset, offset + m.param_count)))
            offset += m.param_count
        return out

    def pack(self):
        return np.concatenate([m.params for m in self.models])

    def unpack(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        offset = 0
        for m in self.models:
            m.params = flat[offset:offset + m.param_count].copy()
            offset += m.param_count


def recursive_forward(factors, cohort, thetas=None):
    """Stacked NANBL posterior over ``cohort``.

    With one factor the raw forward values are returned (unnormalised);
    each further factor multiplies in its likelihood and renormalises over
    the cohort.
    """
    factors = list(factors)
    if not factors:
        raise ContractError("factor set is empty")
    if thetas is None:
        thetas = [None] * len(factors)
    *rest, last = factors
    *rest_thetas, last_theta = thetas
    if not rest:
        return last.values(cohort, last_theta)
    p = last.values(cohort, last_theta)
    l = recursive_forward(rest, cohort, rest_thetas)
    d = dc.mul(l, p)
    return dc.div(d, dc.sum(d))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, models, meta=None):
    """Write named models plus string metadata to a text checkpoint.

    Floats are written with ``repr`` so save -> load -> save is byte-identical.
    """
    lines = [f"{CHECKPOINT_FORMAT} {CHECKPOINT_VERSION}"]
    for key, val in sorted((meta or {}).items()):
        lines.append(f"meta {key}={val}")
    for name, model in models.items():
        lines.append(f"model {name}")
        lines.append("widths " + " ".join(str(w) for w in model.widths))
        lines.append(f"head {model.head}")
        lines.append(f"params {model.param_count}")
        lines.extend(repr(float(p)) for p in model.params)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns (models, meta)."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith(CHECKPOINT_FORMAT):
        raise ContractError(f"{path}: not a checkpoint file")
    version = int(lines[0].split()[1])
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    models, meta = {}, {}
    i = 1
    while i < len(lines):
        line = lines[i]
        if line.startswith("meta "):
            key, _, val = line[5:].partition("=")
            meta[key] = val
            i += 1
        elif line.startswith("model "):
            name = line[6:]
            widths = tuple(int(w) for w in lines[i + 1].split()[1:])
            head = lines[i + 2].split()[1]
            count = int(lines[i + 3].split()[1])
            params = np.array([float(v) for v in lines[i + 4:i + 4 + count]])
            models[name] = MlpModel(widths, head, params)
            i += 4 + count
        elif not line.strip():
            i += 1
        else:
            raise ContractError(f"{path}:{i + 1}: unexpected line {line!r}")
    return models, meta
