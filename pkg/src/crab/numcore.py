"""Small define-by-run reverse-mode differentiation engine on float64 numpy arrays.

Only the primitives the stance model needs are provided. Every primitive checks
its output for NaN/Inf and raises :class:`NumericError` instead of letting bad
values propagate.
"""

from __future__ import annotations

import itertools
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_ids = itertools.count()


class Tensor:
    """A dense float64 array with an optional position in a computation graph."""

    __slots__ = ("data", "parents", "kind", "node_id", "grad", "requires_grad", "name", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents: tuple[Tensor, ...] = ()
        self.kind = "leaf"
        self.node_id = next(_ids)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(kind={self.kind}, shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _make(kind, data, parents, backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{kind} produced non-finite values")
    out = Tensor(data)
    out.kind = kind
    out.parents = tuple(parents)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- primitives ---------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _make("scale", x.data * factor, (x,), lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make("matmul", a.data @ b.data, (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: no inputs")
    ref = tensors[0].shape
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(other, ref)) if i != axis % len(ref)
        ):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def mean_rows(x: Tensor) -> Tensor:
    """Average over the rows (axis 0), keeping a leading dimension of 1."""
    n = x.shape[0]
    if n == 0:
        raise DimensionError(f"mean_rows: empty input of shape {x.shape}")
    return _make(
        "mean_rows",
        x.data.mean(axis=0, keepdims=True),
        (x,),
        lambda g: (np.broadcast_to(g / n, x.shape).copy(),),
    )


def sum_all(x: Tensor) -> Tensor:
    return _make(
        "sum_all",
        np.array([x.data.sum()]),
        (x,),
        lambda g: (np.full(x.shape, g.reshape(-1)[0]),),
    )


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log received non-positive input")
    return _make("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) evaluated as -softplus(-x)."""
    z = x.data
    out = np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))
    return _make("log_sigmoid", out, (x,), lambda g: (g * _sigmoid(-z),))


def softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("softmax_rows", out, (x,), backward)


def log_softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax_rows", out, (x,), backward)


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity when ``train`` is false."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a random generator")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def grl(x: Tensor, lambda_grl: float = 1.0) -> Tensor:
    """Gradient reversal: identity forward, ``-lambda_grl * grad`` backward."""
    lam = float(lambda_grl)
    if not np.isfinite(lam):
        raise NumericError("grl: lambda must be finite")
    return _make("grl", x.data.copy(), (x,), lambda g: (-lam * g,))


# -- graph and backward -------------------------------------------------------


@dataclass
class Graph:
    """Topologically ordered view of every node that feeds a given output."""

    nodes: list[Tensor]
    gradients: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for parent in node.parents:
                if parent.node_id not in seen:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a size-1 ``loss``.

    Returns a mapping from each tensor reachable from ``loss`` that requires a
    gradient to its accumulated gradient; leaf parameters also get ``.grad``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph.trace(loss)
    grads = graph.gradients
    grads[loss.node_id] = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        g = grads.get(node.node_id)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg
    out = {}
    for node in graph.nodes:
        if node.requires_grad and node.node_id in grads:
            out[node] = grads[node.node_id]
            if not node.parents:
                node.grad = grads[node.node_id]
    return out


def grad_check(f: Callable[[Tensor], Tensor], x, epsilon: float = 1e-5) -> float:
    """Max relative error between the analytic gradient of ``f`` and central differences."""
    x0 = np.array(x, dtype=np.float64)
    leaf = parameter(x0.copy())
    out = f(leaf)
    analytic = backward(out).get(leaf, np.zeros_like(x0))

    def value(arr):
        y = f(constant(arr)).data
        if not np.all(np.isfinite(y)):
            raise NumericError("grad_check: objective is not finite")
        return float(y.reshape(-1)[0])

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        plus, minus = x0.copy(), x0.copy()
        plus.reshape(-1)[i] += epsilon
        minus.reshape(-1)[i] -= epsilon
        flat[i] = (value(plus) - value(minus)) / (2.0 * epsilon)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update of ``params`` (rebinds each ``.data``)."""
    for name in params:
        if name not in grads:
            raise ContractError(f"adam_step: no gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"adam_step: gradient {g.shape} vs parameter {p.shape} for {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params, state


# -- random streams -----------------------------------------------------------


class RngStreams:
    """Named, independently seeded generators derived from one seed.

    ``streams.get("dropout")`` always returns the same generator object, so
    drawing from one stream never shifts another.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            key = zlib.crc32(name.encode("utf-8"))
            self._streams[name] = np.random.default_rng([self.seed, key])
        return self._streams[name]


def as_tensors(arrays: Iterable) -> list[Tensor]:
    return [a if isinstance(a, Tensor) else constant(a) for a in arrays]
