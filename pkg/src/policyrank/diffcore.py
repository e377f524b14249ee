"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

A :class:`Graph` records every operation in creation order (a tape), so
the node list is topologically sorted by construction. Each node holds a
numpy array; element-wise primitives broadcast like numpy. Values are
computed eagerly as the graph is built and can be recomputed for new leaf
values with :meth:`Graph.forward_eval`.

The module-level functions (``exp``, ``sigmoid``, ``softplus``, ...) accept
either :class:`Var` or plain arrays. With plain arrays they simply evaluate
the forward rule, which lets model code run unchanged for prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, NumericDomainError

__all__ = [
    "Graph", "Var", "AdamState", "adam_step", "finite_diff_grad", "max_relative_error",
    "add", "sub", "mul", "div", "neg", "exp", "log", "tanh", "sigmoid", "softplus",
    "maximum", "sum", "matmul", "take", "reshape", "segment_sum", "concat", "value_of",
]


# ---------------------------------------------------------------------------
# Primitive rules
# ---------------------------------------------------------------------------

def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def _softplus(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _segment_sum(x, segment_ids, num_segments):
    out = np.zeros((num_segments,) + x.shape[1:], dtype=np.float64)
    np.add.at(out, segment_ids, x)
    return out


_FORWARD = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
    "neg": lambda a: -a,
    "exp": np.exp,
    "log": np.log,
    "tanh": np.tanh,
    "sigmoid": _sigmoid,
    "softplus": _softplus,
    "maximum": np.maximum,
    "sum": lambda a, axis=None: np.sum(a, axis=axis),
    "matmul": lambda a, b: a @ b,
    "getitem": lambda a, index: a[index],
    "reshape": lambda a, shape: np.reshape(a, shape),
    "segment_sum": _segment_sum,
    "concat": lambda *xs: np.concatenate([np.atleast_1d(x) for x in xs]),
}


def _vjp_getitem(g, out, a, index):
    grad = np.zeros_like(a)
    np.add.at(grad, index, g)
    return (grad,)


def _vjp_sum(g, out, a, axis=None):
    if axis is None:
        return (np.broadcast_to(g, a.shape),)
    return (np.broadcast_to(np.expand_dims(g, axis), a.shape),)


def _vjp_matmul(g, out, a, b):
    if b.ndim == 1:
        return np.outer(g, b), a.T @ g
    return g @ b.T, a.T @ g


def _vjp_concat(g, out, *xs):
    sizes = [np.atleast_1d(x).shape[0] for x in xs]
    parts = np.split(g, np.cumsum(sizes)[:-1])
    return tuple(p.reshape(np.shape(x)) for p, x in zip(parts, xs))


# Each rule maps (upstream grad, node value, *operand values, **attrs) to
# one gradient per operand; None marks a non-differentiable operand.
_VJP = {
    "add": lambda g, out, a, b: (g, g),
    "sub": lambda g, out, a, b: (g, -g),
    "mul": lambda g, out, a, b: (g * b, g * a),
    "div": lambda g, out, a, b: (g / b, -g * a / (b * b)),
    "neg": lambda g, out, a: (-g,),
    "exp": lambda g, out, a: (g * out,),
    "log": lambda g, out, a: (g / a,),
    "tanh": lambda g, out, a: (g * (1.0 - out * out),),
    "sigmoid": lambda g, out, a: (g * out * (1.0 - out),),
    "softplus": lambda g, out, a: (g * _sigmoid(a),),
    "maximum": lambda g, out, a, b: (g * (a >= b), g * (a < b)),
    "sum": _vjp_sum,
    "matmul": _vjp_matmul,
    "getitem": _vjp_getitem,
    "reshape": lambda g, out, a, shape: (np.reshape(g, np.shape(a)),),
    "segment_sum": lambda g, out, x, segment_ids, num_segments: (g[segment_ids],),
    "concat": _vjp_concat,
}

PRIMITIVES = tuple(_FORWARD)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Graph and Var
# ---------------------------------------------------------------------------

@dataclass
class Node:
    op: str
    args: tuple
    attrs: dict = field(default_factory=dict)


class Graph:
    """Tape of operations built by running model code on :class:`Var` values.

    Single-writer: build, evaluate and differentiate one graph from one
    thread. Separate graphs share no mutable state.
    """

    def __init__(self):
        self.nodes = []
        self.values = []
        self.leaf_ids = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, node, value):
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericDomainError(len(self.nodes), node.op)
        self.nodes.append(node)
        self.values.append(value)
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value):
        """Register a differentiable input (parameters or data)."""
        var = self._push(Node("leaf", ()), np.array(value, dtype=np.float64))
        self.leaf_ids.append(var.index)
        return var

    def const(self, value):
        """Register a non-differentiable input."""
        return self._push(Node("const", ()), np.array(value, dtype=np.float64))

    def apply(self, op, *args, **attrs):
        ids = tuple(self._lift(a).index for a in args)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            value = _FORWARD[op](*(self.values[i] for i in ids), **attrs)
        return self._push(Node(op, ids, attrs), value)

    def _lift(self, x):
        if isinstance(x, Var):
            if x.graph is not self:
                raise ContractError("operand belongs to a different graph")
            return x
        return self.const(x)

    def forward_eval(self, leaf_values=None):
        """Recompute every node in tape order.

        Args:
            leaf_values: optional sequence of new values, one per leaf in
                registration order. Shapes must match the originals.

        Returns:
            list of node values.
        """
        if leaf_values is not None:
            if len(leaf_values) != len(self.leaf_ids):
                raise ContractError(
                    f"expected {len(self.leaf_ids)} leaf values, got {len(leaf_values)}")
            for idx, val in zip(self.leaf_ids, leaf_values):
                val = np.array(val, dtype=np.float64)
                if val.shape != self.values[idx].shape:
                    raise ContractError(f"leaf {idx}: shape {val.shape} != {self.values[idx].shape}")
                if not np.all(np.isfinite(val)):
                    raise NumericDomainError(idx, "leaf", f"leaf {idx} is not finite")
                self.values[idx] = val
        for i, node in enumerate(self.nodes):
            if node.op in ("leaf", "const"):
                continue
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                value = np.asarray(
                    _FORWARD[node.op](*(self.values[j] for j in node.args), **node.attrs),
                    dtype=np.float64)
            if not np.all(np.isfinite(value)):
                raise NumericDomainError(i, node.op)
            self.values[i] = value
        return list(self.values)

    def backward(self, output):
        """Gradients of a scalar node with respect to every leaf.

        Returns:
            list of arrays, one per leaf in registration order; unused
            leaves get zeros.
        """
        out_idx = output.index if isinstance(output, Var) else int(output)
        if self.values[out_idx].size != 1:
            raise ContractError(
                f"backward needs a scalar output, node {out_idx} has shape {self.values[out_idx].shape}")
        adjoints = [None] * len(self.nodes)
        adjoints[out_idx] = np.ones_like(self.values[out_idx])
        for i in range(out_idx, -1, -1):
            g = adjoints[i]
            node = self.nodes[i]
            if g is None or node.op in ("leaf", "const"):
                continue
            operands = [self.values[j] for j in node.args]
            grads = _VJP[node.op](g, self.values[i], *operands, **node.attrs)
            for j, gj in zip(node.args, grads):
                if gj is None or self.nodes[j].op == "const":
                    continue
                gj = _unbroadcast(gj, self.values[j].shape)
                adjoints[j] = gj if adjoints[j] is None else adjoints[j] + gj
        return [np.zeros_like(self.values[i]) if adjoints[i] is None else adjoints[i]
                for i in self.leaf_ids]


class Var:
    """Handle to a node of a :class:`Graph`."""

    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, graph, index):
        self.graph = graph
        self.index = index

    @property
    def value(self):
        return self.graph.values[self.index]

    @property
    def shape(self):
        return self.value.shape

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(node={self.index}, shape={self.shape})"

    def __add__(self, other):
        return self.graph.apply("add", self, other)

    def __radd__(self, other):
        return self.graph.apply("add", other, self)

    def __sub__(self, other):
        return self.graph.apply("sub", self, other)

    def __rsub__(self, other):
        return self.graph.apply("sub", other, self)

    def __mul__(self, other):
        return self.graph.apply("mul", self, other)

    def __rmul__(self, other):
        return self.graph.apply("mul", other, self)

    def __truediv__(self, other):
        return self.graph.apply("div", self, other)

    def __rtruediv__(self, other):
        return self.graph.apply("div", other, self)

    def __neg__(self):
        return self.graph.apply("neg", self)

    def __matmul__(self, other):
        return self.graph.apply("matmul", self, other)

    def __rmatmul__(self, other):
        return self.graph.apply("matmul", other, self)

    def __getitem__(self, index):
        return self.graph.apply("getitem", self, index=index)

    def sum(self, axis=None):
        return self.graph.apply("sum", self, axis=axis)


# ---------------------------------------------------------------------------
# Functional API: works on Var (records) or arrays (evaluates)
# ---------------------------------------------------------------------------

def _graph_of(args):
    for a in args:
        if isinstance(a, Var):
            return a.graph
    return None


def _call(op, *args, **attrs):
    graph = _graph_of(args)
    if graph is not None:
        return graph.apply(op, *args, **attrs)
    return _FORWARD[op](*(np.asarray(a, dtype=np.float64) for a in args), **attrs)


def value_of(x):
    """Numeric value of a Var or array-like."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def add(a, b):
    return _call("add", a, b)


def sub(a, b):
    return _call("sub", a, b)


def mul(a, b):
    return _call("mul", a, b)


def div(a, b):
    return _call("div", a, b)


def neg(a):
    return _call("neg", a)


def exp(x):
    return _call("exp", x)


def log(x):
    return _call("log", x)


def tanh(x):
    return _call("tanh", x)


def sigmoid(x):
    return _call("sigmoid", x)


def softplus(x):
    """Rectifier ln(1 + e^x), evaluated as ln(1 + e^-|x|) + max(x, 0)."""
    return _call("softplus", x)


def maximum(a, b):
    return _call("maximum", a, b)


def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    return _call("sum", x, axis=axis)


def matmul(a, b):
    return _call("matmul", a, b)


def take(x, index):
    return _call("getitem", x, index=index)


def reshape(x, shape):
    return _call("reshape", x, shape=tuple(shape))


def segment_sum(x, segment_ids, num_segments):
    """Sum entries of ``x`` that share a segment id."""
    segment_ids = np.asarray(segment_ids, dtype=np.intp)
    return _call("segment_sum", x, segment_ids=segment_ids, num_segments=int(num_segments))


def concat(parts):
    return _call("concat", *parts)


# ---------------------------------------------------------------------------
# Optimizer and gradient oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, size, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(np.zeros(size), np.zeros(size), 0, lr, beta1, beta2, eps)


def adam_step(params, grads, state):
    """One bias-corrected Adam update (ascent callers pass negated gradients).

    Returns:
        (new_params, new_state); inputs are not modified.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ContractError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, t=t)


def finite_diff_grad(fn, point, h=1e-5):
    """Central-difference gradient of a scalar function of a vector."""
    point = np.array(point, dtype=np.float64)
    flat = point.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(fn(point))
        flat[i] = orig - h
        f_minus = float(fn(point))
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(point.shape)


def max_relative_error(analytic, numeric, floor=1e-6):
    """Largest per-coordinate |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
