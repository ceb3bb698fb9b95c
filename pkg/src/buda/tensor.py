"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only what the models and losses need is here: elementwise arithmetic with
scalar broadcast, 2-D matmul, row-vector bias add, row softmax, a few
activations, row gathering, column concatenation and pairwise squared
distances.  Every primitive checks shapes when it is built and refuses to
produce non-finite values.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], tuple] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("division by a tensor is not supported; multiply by a constant instead")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DTYPE))


def _finite(values: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(values).all():
        raise NumericError(f"{op} produced non-finite values")
    return values


def _make(values: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _finite(values, op)
    if any(p.requires_grad for p in parents):
        return Tensor(values, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(values, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _binary_shape_check(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if a.size == 1 and a.data.ndim == 0 or b.size == 1 and b.data.ndim == 0:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ and neither is a 0-d scalar")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shape_check(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shape_check(a, b, "sub")
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shape_check(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward, "mul")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log of a non-positive value")
    out = np.log(x.data)
    return _make(out, (x,), lambda g: (g / x.data,), "log")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    keep = x.data >= floor
    out = np.where(keep, x.data, floor)
    return _make(out, (x,), lambda g: (g * keep,), "clamp_min")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)
    return _make(out, (x,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(x: Tensor) -> Tensor:
    """log(logistic(x)) = -softplus(-x), evaluated without overflow."""
    v = x.data
    out = np.minimum(v, 0.0) - np.log1p(np.exp(-np.abs(v)))
    return _make(out, (x,), lambda g: (g * _stable_sigmoid(-v),), "log_sigmoid")


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------- reductions

def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    if axis is None:
        out = np.asarray(x.data.sum())

        def backward(g):
            return (np.broadcast_to(g, x.shape).copy(),)
    else:
        out = x.data.sum(axis=axis)

        def backward(g):
            return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(out, (x,), backward, "sum")


def mean(x: Tensor) -> Tensor:
    return mul(sum(x), 1.0 / x.size)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), backward, "matmul")


def add_rowvec(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-m vector to every row of an n x m matrix."""
    x, b = _lift(x), _lift(b)
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_rowvec: cannot add {b.shape} to rows of {x.shape}")
    out = x.data + b.data
    return _make(out, (x, b), lambda g: (g, g.sum(axis=0)), "add_rowvec")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add_rowvec(matmul(x, w), b)


def softmax_rows(x: Tensor) -> Tensor:
    x = _lift(x)
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects 2-D input, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make(out, (x,), backward, "softmax_rows")


def log_softmax_rows(x: Tensor) -> Tensor:
    x = _lift(x)
    if x.data.ndim != 2:
        raise ShapeError(f"log_softmax_rows expects 2-D input, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax_rows")


def pairwise_sq_dist(a: Tensor, b: Tensor) -> Tensor:
    """Matrix of squared Euclidean distances between rows of a and rows of b."""
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_sq_dist: incompatible {a.shape} and {b.shape}")
    sa = (a.data * a.data).sum(axis=1)
    sb = (b.data * b.data).sum(axis=1)
    out = np.maximum(sa[:, None] + sb[None, :] - 2.0 * (a.data @ b.data.T), 0.0)

    def backward(g):
        ga = 2.0 * (g.sum(axis=1)[:, None] * a.data - g @ b.data)
        gb = 2.0 * (g.sum(axis=0)[:, None] * b.data - g.T @ a.data)
        return ga, gb

    return _make(out, (a, b), backward, "pairwise_sq_dist")


def gaussian_kernel_sum(d2: Tensor, sigmas: Sequence[float]) -> Tensor:
    """sum over sigma and all entries of exp(-d2 / (2 sigma^2)), as one node."""
    scales = [-0.5 / (s * s) for s in sigmas]
    ks = [np.exp(d2.data * c) for c in scales]
    out = np.asarray(float(np.sum([k.sum() for k in ks])))

    def backward(g):
        return (g * np.sum([c * k for c, k in zip(scales, ks)], axis=0),)

    return _make(out, (d2,), backward, "gaussian_kernel_sum")


# ---------------------------------------------------------------- structure

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def take_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim < 1 or (idx.size and (idx.min() < 0 or idx.max() >= x.shape[0])):
        raise ShapeError(f"take_rows: index out of range for {x.shape}")
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (x,), backward, "take_rows")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_lift(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.data.ndim != 2 for p in parts):
        raise ShapeError(f"concat_cols: shapes {[p.shape for p in parts]}")
    out = np.concatenate([p.data for p in parts], axis=1)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(out, parts, backward, "concat_cols")


# ---------------------------------------------------------------- reverse mode

@dataclass
class Tape:
    """Topologically ordered record of the nodes feeding an output."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]


def backward(output: Tensor, params: Sequence[Tensor] | None = None, tape: Tape | None = None) -> Tape:
    """Populate ``.grad`` of every leaf that ``output`` depends on.

    Gradients are overwritten, not accumulated.  Leaves listed in ``params``
    that are not on the tape receive an all-zero gradient.
    """
    if output.data.ndim != 0 and output.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    if tape is None:
        tape = Tape.record(output)
    grads: dict[int, np.ndarray] = {id(output): np.ones(output.shape, dtype=DTYPE)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None) if not node.is_leaf else grads.get(id(node))
        if g is None or node.is_leaf:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=DTYPE)
    for leaf in tape.leaves():
        leaf.grad = grads.get(id(leaf), np.zeros(leaf.shape, dtype=DTYPE))
    on_tape = {id(n) for n in tape.nodes}
    for p in params or ():
        if p.requires_grad and id(p) not in on_tape:
            p.grad = np.zeros(p.shape, dtype=DTYPE)
    return tape


def finite_diff_gradient(fn: Callable[[np.ndarray], float], x, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if step <= 0:
        raise ContractError("finite-difference step must be positive")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(fn(x))
        flat[i] = orig - step
        lo = float(fn(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8, rel_floor: float = 1e-3) -> float:
    """Largest per-coordinate |a-b| / max(|a|, |b|, floor').

    floor' = max(floor, rel_floor * largest |entry|), so coordinates that are
    numerically zero next to the rest of the gradient do not dominate.
    """
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    if not a.size:
        return 0.0
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), max(floor, rel_floor * scale))
    return float(np.max(np.abs(a - b) / denom))


# ---------------------------------------------------------------- randomness

class Rng:
    """Seeded counter-based random source (Philox) with named sub-streams.

    A stream is identified by the master seed and a tag path, so
    ``Rng(7).child("pretrain")`` yields the same draws regardless of what
    other stages consumed.
    """

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(path)
        digest = hashlib.sha256(("%d/" % self.seed + "/".join(self.path)).encode()).digest()
        key = np.frombuffer(digest[:16], dtype="<u8")
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, *tags) -> "Rng":
        return Rng(self.seed, self.path + tuple(str(t) for t in tags))

    def normal(self, shape) -> np.ndarray:
        return self.gen.standard_normal(shape)

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0):
        return self.gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, size=None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self.gen.choice(n, size=size, replace=replace)

    def dirichlet(self, alpha) -> np.ndarray:
        return self.gen.dirichlet(alpha)


def rng_gaussian(rng: Rng, shape) -> Tensor:
    return Tensor(rng.normal(shape))
