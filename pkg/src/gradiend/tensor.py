"""Dense tensors with a single-use reverse-mode tape.

Storage is 32-bit by default; every primitive computes in 64-bit and casts
the result back, so reductions (dot products, softmax sums) accumulate in
double precision.  Broadcasting is limited to scalars; row-wise bias and
scale are explicit primitives (:func:`add_bias`, :func:`mul_bias`).

Typical use::

    tape = Tape()
    w = tape.watch("w", np.ones((3, 2)))
    loss = softmax_cross_entropy(row(matmul(x, w), 0), target=1)
    grads = tape.backward(loss)        # {"w": ndarray}
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "GradMap", "ShapeError", "DomainError", "NumericError", "TapeError",
    "precision", "get_dtype", "matmul", "add", "sub", "mul", "add_scalar", "add_bias",
    "mul_bias", "apply_unary", "tanh", "exp", "log", "scale", "negate", "gelu", "square",
    "bmatmul", "reshape", "transpose", "take_rows", "row", "slice_cols", "concat_cols", "masked_softmax",
    "layer_norm", "softmax_cross_entropy", "cross_entropy_rows", "sum_all", "mean_all",
    "backward", "finite_diff_gradient",
]

_F64 = np.float64
_dtype = np.float32


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype (used by finite-difference checks)."""
    global _dtype
    old, _dtype = _dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = old


class GradMap(dict):
    """Parameter name -> gradient array with the parameter's shape."""


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        arr = np.array(data, dtype=_dtype, copy=True)
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite values in tensor of shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tracked = "tracked" if self.tape is not None else "const"
        return f"Tensor(shape={self.shape}, {tracked})"


def _raise_item(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Nodes are appended in execution order, so reverse iteration is a valid
    topological order and each node is visited exactly once.
    """

    def __init__(self):
        self._backward_fns: list[Callable | None] = []
        self._parents: list[tuple[int | None, ...]] = []
        self._shapes: list[tuple[int, ...]] = []
        self._watched: dict[str, int] = {}
        self._consumed = False

    def __len__(self) -> int:
        return len(self._backward_fns)

    def watch(self, name: str, value) -> Tensor:
        if self._consumed:
            raise TapeError("tape already consumed")
        if name in self._watched:
            raise KeyError(f"parameter {name!r} already watched")
        t = Tensor(value, tape=self, node=self._new_node(None, (), np.shape(value)))
        self._watched[name] = t.node
        return t

    def watch_all(self, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {name: self.watch(name, value) for name, value in params.items()}

    def _new_node(self, fn, parents, shape) -> int:
        self._backward_fns.append(fn)
        self._parents.append(parents)
        self._shapes.append(tuple(shape))
        return len(self._backward_fns) - 1

    def record(self, out: np.ndarray, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
        if self._consumed:
            raise TapeError("tape already consumed")
        parents = tuple(t.node if t.tape is self else None for t in inputs)
        return Tensor(out, tape=self, node=self._new_node(fn, parents, np.shape(out)))

    def backward(self, loss: Tensor) -> GradMap:
        if self._consumed:
            raise TapeError("backward called twice on a consumed tape")
        if loss.tape is not self:
            raise TapeError("loss was not produced on this tape")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        grads: list[np.ndarray | None] = [None] * len(self._backward_fns)
        grads[loss.node] = np.ones(loss.shape, dtype=_F64)
        for node in range(loss.node, -1, -1):
            g = grads[node]
            fn = self._backward_fns[node]
            if g is None or fn is None:
                continue
            for parent, pg in zip(self._parents[node], fn(g)):
                if parent is None or pg is None:
                    continue
                grads[parent] = pg if grads[parent] is None else grads[parent] + pg
            if node != loss.node:
                grads[node] = None
        out = GradMap()
        for name, node in self._watched.items():
            g = grads[node]
            out[name] = (np.zeros(self._shapes[node], dtype=_dtype) if g is None
                         else np.asarray(g, dtype=_dtype).reshape(self._shapes[node]))
            if not np.isfinite(out[name]).all():
                raise NumericError(f"non-finite gradient for {name!r}")
        # release saved activations
        self._backward_fns = [None] * len(self._backward_fns)
        return out


def backward(loss: Tensor) -> GradMap:
    if loss.tape is None:
        raise TapeError("loss is not tape-tracked")
    return loss.tape.backward(loss)


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise TapeError("inputs belong to different tapes")
            tape = t.tape
    return tape


def _emit(out64: np.ndarray, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out64)
    return tape.record(out64, inputs, fn)


def _f64(t: Tensor) -> np.ndarray:
    return t.data.astype(_F64)


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ShapeError(f"matmul needs rank-2 inputs, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    a64, b64 = _f64(a), _f64(b)
    return _emit(a64 @ b64, (a, b), lambda g: (g @ b64.T, a64.T @ g))


def bmatmul(a, b, transpose_b: bool = False) -> Tensor:
    """Batched product of rank-3 tensors: (B, m, k) x (B, k, n), or x (B, n, k)^T."""
    a, b = _as_tensor(a), _as_tensor(b)
    if len(a.shape) != 3 or len(b.shape) != 3 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"bmatmul needs matching rank-3 inputs, got {a.shape} and {b.shape}")
    a64, b64 = _f64(a), _f64(b)
    if transpose_b:
        if a.shape[2] != b.shape[2]:
            raise ShapeError(f"bmatmul: cannot multiply {a.shape} by {b.shape}^T")
        return _emit(a64 @ b64.transpose(0, 2, 1), (a, b), lambda g: (g @ b64, g.transpose(0, 2, 1) @ a64))
    if a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmatmul: cannot multiply {a.shape} by {b.shape}")
    return _emit(a64 @ b64, (a, b),
                 lambda g: (g @ b64.transpose(0, 2, 1), a64.transpose(0, 2, 1) @ g))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return _emit(_f64(x).reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    if len(x.shape) != 2:
        raise ShapeError(f"transpose needs rank 2, got {x.shape}")
    return _emit(_f64(x).T, (x,), lambda g: (g.T,))


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")
    return _emit(_f64(a) + _f64(b), (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")
    return _emit(_f64(a) - _f64(b), (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")
    a64, b64 = _f64(a), _f64(b)
    return _emit(a64 * b64, (a, b), lambda g: (g * b64, g * a64))


def add_scalar(x, s) -> Tensor:
    """x + s where s is a python float or a single-element tensor."""
    x = _as_tensor(x)
    if isinstance(s, Tensor):
        if s.size != 1:
            raise ShapeError(f"add_scalar: scalar operand has shape {s.shape}")
        sv = float(s.data.reshape(-1)[0])
        return _emit(_f64(x) + sv, (x, s), lambda g: (g, np.full(s.shape, g.sum())))
    return _emit(_f64(x) + float(s), (x,), lambda g: (g,))


def add_bias(x, b) -> Tensor:
    """Add a length-n vector to every row of an (m, n) matrix."""
    x, b = _as_tensor(x), _as_tensor(b)
    if len(x.shape) != 2 or b.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: {x.shape} with bias {b.shape}")
    return _emit(_f64(x) + _f64(b), (x, b), lambda g: (g, g.sum(axis=0)))


def mul_bias(x, s) -> Tensor:
    """Scale every row of an (m, n) matrix by a length-n vector."""
    x, s = _as_tensor(x), _as_tensor(s)
    if len(x.shape) != 2 or s.shape != (x.shape[1],):
        raise ShapeError(f"mul_bias: {x.shape} with scale {s.shape}")
    x64, s64 = _f64(x), _f64(s)
    return _emit(x64 * s64, (x, s), lambda g: (g * s64, (g * x64).sum(axis=0)))


_GELU_C = math.sqrt(2.0 / math.pi)


def apply_unary(op: str, x, c: float | None = None) -> Tensor:
    """Elementwise tanh, exp, log, scale (by ``c``), negate, gelu or square."""
    x = _as_tensor(x)
    v = _f64(x)
    if op == "tanh":
        y = np.tanh(v)
        return _emit(y, (x,), lambda g: (g * (1.0 - y * y),))
    if op == "exp":
        y = np.exp(v)
        return _emit(y, (x,), lambda g: (g * y,))
    if op == "log":
        if (v <= 0).any():
            raise DomainError("log of non-positive value")
        return _emit(np.log(v), (x,), lambda g: (g / v,))
    if op == "scale":
        if c is None:
            raise ValueError("scale needs a constant")
        return _emit(v * c, (x,), lambda g: (g * c,))
    if op == "negate":
        return _emit(-v, (x,), lambda g: (-g,))
    if op == "square":
        return _emit(v * v, (x,), lambda g: (2.0 * g * v,))
    if op == "gelu":
        u = _GELU_C * (v + 0.044715 * v ** 3)
        t = np.tanh(u)
        y = 0.5 * v * (1.0 + t)
        du = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return _emit(y, (x,), lambda g: (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du),))
    raise ValueError(f"unknown unary op {op!r}")


def tanh(x): return apply_unary("tanh", x)
def exp(x): return apply_unary("exp", x)
def log(x): return apply_unary("log", x)
def scale(x, c: float): return apply_unary("scale", x, c)
def negate(x): return apply_unary("negate", x)
def gelu(x): return apply_unary("gelu", x)
def square(x): return apply_unary("square", x)


# ---------------------------------------------------------------- indexing

def take_rows(table, ids) -> Tensor:
    """Gather rows of a rank-2 tensor; gradient scatters back with accumulation."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if len(table.shape) != 2 or ids.ndim != 1:
        raise ShapeError(f"take_rows: table {table.shape}, ids {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def fn(g):
        out = np.zeros(shape, dtype=_F64)
        np.add.at(out, ids, g)
        return (out,)

    return _emit(_f64(table)[ids], (table,), fn)


def row(x, i: int) -> Tensor:
    """Row ``i`` of a rank-2 tensor as a rank-1 tensor."""
    x = _as_tensor(x)
    if len(x.shape) != 2:
        raise ShapeError(f"row needs rank 2, got {x.shape}")
    if not 0 <= i < x.shape[0]:
        raise IndexError(f"row {i} out of range for shape {x.shape}")
    shape = x.shape

    def fn(g):
        out = np.zeros(shape, dtype=_F64)
        out[i] = g
        return (out,)

    return _emit(_f64(x)[i], (x,), fn)


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    if len(x.shape) != 2 or not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_cols[{start}:{stop}] on {x.shape}")
    shape = x.shape

    def fn(g):
        out = np.zeros(shape, dtype=_F64)
        out[:, start:stop] = g
        return (out,)

    return _emit(_f64(x)[:, start:stop], (x,), fn)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if any(len(p.shape) != 2 or p.shape[0] != parts[0].shape[0] for p in parts):
        raise ShapeError(f"concat_cols: incompatible shapes {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    return _emit(np.concatenate([_f64(p) for p in parts], axis=1), parts,
                 lambda g: tuple(g[:, bounds[k]:bounds[k + 1]] for k in range(len(parts))))


# ---------------------------------------------------------------- normalisation

def masked_softmax(x, allowed: np.ndarray) -> Tensor:
    """Softmax along the last axis over entries where ``allowed`` is True.

    Disallowed entries get probability exactly 0.
    """
    x = _as_tensor(x)
    allowed = np.asarray(allowed, dtype=bool)
    if allowed.shape != x.shape or len(x.shape) < 1:
        raise ShapeError(f"masked_softmax: scores {x.shape}, mask {allowed.shape}")
    if not allowed.any(axis=-1).all():
        raise ValueError("masked_softmax: a row has no allowed entries")
    v = np.where(allowed, _f64(x), -np.inf)
    v = v - v.max(axis=-1, keepdims=True)
    e = np.exp(v)
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (x,), fn)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if len(x.shape) != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    v = _f64(x)
    mu = v.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(v.var(axis=1, keepdims=True) + eps)
    xhat = (v - mu) * inv
    g64 = _f64(gain)

    def fn(g):
        dxhat = g * g64
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _emit(xhat * g64 + _f64(bias), (x, gain, bias), fn)


# ---------------------------------------------------------------- losses & reductions

def _log_softmax(v: np.ndarray) -> np.ndarray:
    m = v.max(axis=-1, keepdims=True)
    return v - m - np.log(np.exp(v - m).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, target: int) -> Tensor:
    """-log softmax(logits)[target] for a rank-1 logit vector."""
    logits = _as_tensor(logits)
    if len(logits.shape) != 1:
        raise ShapeError(f"softmax_cross_entropy needs rank 1 logits, got {logits.shape}")
    if not 0 <= target < logits.shape[0]:
        raise IndexError(f"target {target} out of range for {logits.shape[0]} classes")
    lsm = _log_softmax(_f64(logits))
    p = np.exp(lsm)

    def fn(g):
        d = p.copy()
        d[target] -= 1.0
        return (g * d,)

    return _emit(np.array(-lsm[target]), (logits,), fn)


def cross_entropy_rows(logits, targets, weights=None) -> Tensor:
    """Weighted mean over rows of the per-row cross-entropy.

    ``weights`` defaults to uniform; they are normalised to sum to one.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if len(logits.shape) != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy_rows: logits {logits.shape}, targets {targets.shape}")
    if targets.size == 0:
        raise ValueError("cross_entropy_rows: no rows")
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise IndexError("target index out of range")
    w = np.ones(len(targets)) if weights is None else np.asarray(weights, dtype=_F64)
    w = w / w.sum()
    lsm = _log_softmax(_f64(logits))
    rows = np.arange(len(targets))
    p = np.exp(lsm)

    def fn(g):
        d = p.copy()
        d[rows, targets] -= 1.0
        return (g * w[:, None] * d,)

    return _emit(np.array(-(w * lsm[rows, targets]).sum()), (logits,), fn)


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _emit(np.array(_f64(x).sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean_all(x) -> Tensor:
    x = _as_tensor(x)
    shape, n = x.shape, x.size
    return _emit(np.array(_f64(x).mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


# ---------------------------------------------------------------- test oracle

def finite_diff_gradient(loss_fn: Callable[[dict[str, np.ndarray]], float],
                         params: Mapping[str, np.ndarray], eps: float = 1e-3,
                         coords: Iterable[tuple[str, int]] | None = None):
    """Central differences ``(f(p+eps) - f(p-eps)) / (2 eps)``.

    With ``coords=None`` every scalar is perturbed and a :class:`GradMap` is
    returned.  Otherwise only the listed ``(name, flat_index)`` pairs are
    evaluated and a dict keyed by those pairs is returned.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    work = {k: np.array(v, dtype=_F64, copy=True) for k, v in params.items()}

    def probe(name, i):
        flat = work[name].reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(loss_fn(work))
        flat[i] = orig - eps
        lo = float(loss_fn(work))
        flat[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise NumericError(f"non-finite loss when perturbing {name}[{i}]")
        return (hi - lo) / (2 * eps)

    if coords is not None:
        return {(name, int(i)): probe(name, int(i)) for name, i in coords}
    out = GradMap()
    for name, value in work.items():
        g = np.empty(value.size, dtype=_F64)
        for i in range(value.size):
            g[i] = probe(name, i)
        out[name] = g.reshape(value.shape)
    return out
