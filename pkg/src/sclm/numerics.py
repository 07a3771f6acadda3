"""Dense tensors with reverse-mode automatic differentiation.

Every op records a node carrying a monotonically increasing sequence number,
its input tensors and a closure mapping the output gradient to input
gradients. ``backward`` gathers the nodes reachable from a scalar output and
replays them in decreasing sequence order, which is a reverse topological
order because an op's inputs always exist before the op runs.

Broadcasting is limited to the case where one operand's shape is a suffix of
the other's (bias rows, position tables); anything else is a shape error.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "ContractError", "NonFiniteError",
    "tensor", "parameter", "no_grad", "precision", "default_dtype", "set_debug",
    "add", "sub", "mul", "scale", "matmul", "transpose", "reshape",
    "masked_softmax", "layer_norm", "gelu", "embedding_lookup", "take_rows",
    "place_rows", "cross_entropy", "total", "dropout", "backward",
    "gaussian", "uniform", "zeros", "ones", "log_softmax",
]


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class ContractError(RuntimeError):
    """A documented precondition of an op was violated."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf while debug checks were enabled."""


_state = {"grad": True, "dtype": np.float32, "debug": False}
_counter = itertools.count()


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype of newly created tensors."""
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def set_debug(enabled: bool) -> None:
    """Turn the per-op finiteness assertion on or off."""
    _state["debug"] = bool(enabled)


@dataclass(eq=False)
class _Node:
    seq: int
    inputs: tuple
    backward: Callable[[np.ndarray], tuple]
    op: str


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _state["dtype"])
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    arr = np.array(data, dtype=dtype or _state["dtype"])
    return Tensor(arr, requires_grad=True, dtype=arr.dtype)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracks(*inputs: Tensor) -> bool:
    return _state["grad"] and any(t.requires_grad or t._node is not None for t in inputs)


def _emit(data: np.ndarray, inputs: tuple, grad_fn, op: str) -> Tensor:
    if _state["debug"] and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._node = None
    if _tracks(*inputs):
        out._node = _Node(next(_counter), inputs, grad_fn, op)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead < 0 or g.shape[lead:] != shape:
        raise ShapeError(f"cannot reduce gradient {g.shape} to {shape}")
    return g.sum(axis=tuple(range(lead)))


def _check_suffix(a: tuple, b: tuple, op: str) -> None:
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: shapes {a} and {b} are not suffix-compatible")


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix(a.shape, b.shape, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix(a.shape, b.shape, "sub")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _emit(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix(a.shape, b.shape, "mul")

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit(a.data * b.data, (a, b), grad_fn, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    v = x.data
    c = v.dtype.type
    k, a = c(math.sqrt(2.0 / math.pi)), c(0.044715)
    v2 = v * v
    th = np.tanh(k * v * (1 + a * v2))
    out = c(0.5) * v * (1 + th)

    def grad_fn(g):
        dinner = k * (1 + 3 * a * v2)
        return (g * (c(0.5) * (1 + th) + c(0.5) * v * (1 - th * th) * dinner),)

    return _emit(out, (x,), grad_fn, "gelu")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or ``rng`` is None."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _emit(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# -- shape -------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched with identical leading extents."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    if a.ndim < b.ndim:
        raise ShapeError("matmul left operand must carry the batch dimensions")

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            lhs = a.data.reshape(-1, a.shape[-1])
            gb = lhs.T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _emit(a.data @ b.data, (a, b), grad_fn, "matmul")


# -- normalisation and attention ---------------------------------------------

def masked_softmax(scores: Tensor, allow: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``allow``.

    ``allow`` is boolean and must broadcast to the shape of ``scores``.
    Blocked entries get exactly zero probability and the max used for
    stabilisation is taken over allowed entries only, so blocked scores can
    never influence the result numerically.
    """
    allow = np.asarray(allow, dtype=bool)
    try:
        full = np.broadcast_shapes(scores.shape, allow.shape)
    except ValueError:
        full = None
    if full != scores.shape:
        raise ShapeError(f"mask {allow.shape} does not broadcast to scores {scores.shape}")
    if not allow.any(axis=-1).all():
        raise ContractError("masked_softmax: a query row has no allowed key")
    s = scores.data
    masked = np.where(allow, s, -np.inf)
    m = masked.max(axis=-1, keepdims=True)
    e = np.exp(masked - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y.astype(s.dtype, copy=False), (scores,), grad_fn, "masked_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},)")
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit(out.astype(v.dtype, copy=False), (x, gain, bias), grad_fn, "layer_norm")


# -- indexing ----------------------------------------------------------------

def take_rows(table: Tensor, index) -> Tensor:
    """Gather rows of a 2-D table; gradient is a scatter-add."""
    if table.ndim != 2:
        raise ShapeError("take_rows expects a 2-D table")
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("row index out of range")

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _emit(table.data[idx], (table,), grad_fn, "take_rows")


embedding_lookup = take_rows


def place_rows(base: Tensor, src: Tensor, dst_index, src_index) -> Tensor:
    """Copy of ``base`` with ``base[dst_index[i]] = src[src_index[i]]``.

    Both operands are 2-D with equal widths; ``dst_index`` must not repeat.
    """
    if base.ndim != 2 or src.ndim != 2 or base.shape[1] != src.shape[1]:
        raise ShapeError(f"place_rows: incompatible {base.shape} and {src.shape}")
    dst = np.asarray(dst_index, dtype=np.int64)
    srci = np.asarray(src_index, dtype=np.int64)
    if dst.shape != srci.shape:
        raise ShapeError("place_rows: index lists differ in length")
    if len(np.unique(dst)) != len(dst):
        raise ContractError("place_rows: destination rows repeat")
    out = base.data.copy()
    out[dst] = src.data[srci]

    def grad_fn(g):
        gb = g.copy()
        gb[dst] = 0
        gs = np.zeros_like(src.data)
        np.add.at(gs, srci, g[dst])
        return gb, gs

    return _emit(out, (base, src), grad_fn, "place_rows")


# -- reductions and losses ---------------------------------------------------

def total(x: Tensor) -> Tensor:
    return _emit(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Plain numpy log-softmax over the last axis (no tape)."""
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets, target_mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over masked-in rows."""
    if logits.ndim != 2:
        raise ShapeError("cross_entropy expects [T, V] logits")
    T, V = logits.shape
    tgt = np.asarray(targets, dtype=np.int64)
    mask = np.ones(T, dtype=bool) if target_mask is None else np.asarray(target_mask, dtype=bool)
    if tgt.shape != (T,) or mask.shape != (T,):
        raise ShapeError("targets and mask must have one entry per logits row")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= V):
        raise ShapeError("target id outside the vocabulary")
    count = int(mask.sum())
    if count == 0:
        raise ContractError("cross_entropy: every position is masked out")
    lp = log_softmax(logits.data)
    rows = np.arange(T)
    picked = np.where(mask, lp[rows, tgt], 0.0)
    loss = -picked.sum() / count

    def grad_fn(g):
        p = np.exp(lp)
        p[rows, tgt] -= 1.0
        p *= (mask[:, None] * (g / count))
        return (p.astype(logits.dtype, copy=False),)

    return _emit(np.asarray(loss, dtype=logits.dtype), (logits,), grad_fn, "cross_entropy")


# -- backward ----------------------------------------------------------------

@dataclass
class Tape:
    """Ordered op records reachable from one output, earliest first."""

    records: list = field(default_factory=list)

    @classmethod
    def collect(cls, output: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes = []
        stack = [output]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append((node, t))
            stack.extend(node.inputs)
        nodes.sort(key=lambda pair: pair[0].seq)
        return cls(nodes)


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into every reachable ``requires_grad`` leaf."""
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    if output._node is None:
        if output.requires_grad:
            output.grad += 1.0
            return
        raise ContractError("backward: output was not produced on a gradient tape")
    tape = Tape.collect(output)
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node, out in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None:
                continue
            if inp._node is not None:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
            elif inp.requires_grad:
                inp.grad += gi.astype(inp.dtype, copy=False)


# -- initialisers ------------------------------------------------------------

def gaussian(shape, std: float, rng: np.random.Generator, dtype=None) -> Tensor:
    return parameter(rng.normal(0.0, std, size=shape), dtype=dtype)


def uniform(shape, low: float, high: float, rng: np.random.Generator, dtype=None) -> Tensor:
    return parameter(rng.uniform(low, high, size=shape), dtype=dtype)


def zeros(shape, dtype=None) -> Tensor:
    return parameter(np.zeros(shape), dtype=dtype)


def ones(shape, dtype=None) -> Tensor:
    return parameter(np.ones(shape), dtype=dtype)
