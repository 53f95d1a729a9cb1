"""Dense 2-D tensors with reverse-mode automatic differentiation.

Every value is a row-major real matrix (scalars are 1x1, vectors are row or
column matrices). Operations build an implicit DAG: each op output records
its parent tensors plus a closure that scatters the output gradient back to
them, saving whatever forward activations the closure needs (softmax output,
sigmoid/tanh output). ``backward`` walks the DAG once in reverse topological
order; gradients accumulate additively, so fan-out is handled naturally.

Storage is float64 by default and may be float32; reductions (matmul, sums)
always accumulate in float64. There is no broadcasting except the explicit
row-vector bias addition in ``add_bias``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

DEFAULT_DTYPE = np.float64

_ALLOWED_DTYPES = (np.float32, np.float64)


def _as_matrix(data, dtype) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D; got array of shape {arr.shape}")
    if arr.size == 0:
        raise ShapeError(f"tensor dimensions must be positive; got shape {arr.shape}")
    return np.ascontiguousarray(arr)


class Tensor:
    """A matrix value, optionally participating in gradient computation.

    Leaves are created directly; op outputs are created by the module-level
    functions below. ``grad`` is lazily allocated during ``backward`` and has
    the same shape and dtype as ``data``. Data is treated as immutable while
    a graph referencing it is alive; the training loop mutates parameter data
    only between steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            src = np.asarray(data)
            dtype = src.dtype if src.dtype in _ALLOWED_DTYPES else DEFAULT_DTYPE
        if dtype not in _ALLOWED_DTYPES:
            raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
        self.data = _as_matrix(data, dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype.type

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = "param" if self.requires_grad and self._op == "leaf" else self._op
        return f"Tensor({tag}, shape={self.data.shape}, dtype={self.data.dtype})"


def _make_node(data: np.ndarray, parents: Sequence[Tensor], op: str,
               backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    else:
        # constant subtree: keep it a leaf so backward never visits it
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out._op = op
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operand shapes {a.data.shape} and {b.data.shape} differ")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: operand dtypes {a.data.dtype} and {b.data.dtype} differ")


def _mm64(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # float64 accumulation even when storage is float32
    if a.dtype == np.float64:
        return a @ b
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(a.dtype)


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions disagree, {a.data.shape} x {b.data.shape}")
    out_data = _mm64(a.data, b.data)
    a_data, b_data = a.data, b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_mm64(g, b_data.T))
        if b.requires_grad:
            b._accumulate(_mm64(a_data.T, g))

    return _make_node(out_data, (a, b), "matmul", backward_fn)


def transpose(a: Tensor) -> Tensor:
    out_data = np.ascontiguousarray(a.data.T)

    def backward_fn(g):
        a._accumulate(g.T)

    return _make_node(out_data, (a,), "transpose", backward_fn)


def softmax_rows(a: Tensor) -> Tensor:
    if np.isnan(a.data).any():
        raise NumericError("softmax_rows: input contains NaN")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    if a.data.dtype == np.float64:
        out_data = e / e.sum(axis=1, keepdims=True)
    else:
        out_data = (e.astype(np.float64)
                    / e.sum(axis=1, keepdims=True, dtype=np.float64)).astype(a.data.dtype)
    y = out_data

    def backward_fn(g):
        # dL/dx = y * (g - rowsum(g * y))
        inner = (g * y).sum(axis=1, keepdims=True, dtype=np.float64).astype(g.dtype)
        a._accumulate(y * (g - inner))

    return _make_node(out_data, (a,), "softmax_rows", backward_fn)


def sigmoid(a: Tensor) -> Tensor:
    # stable for large |x|: never exponentiates a positive argument
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    y = out_data

    def backward_fn(g):
        a._accumulate(g * y * (1.0 - y))

    return _make_node(out_data, (a,), "sigmoid", backward_fn)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)
    y = out_data

    def backward_fn(g):
        a._accumulate(g * (1.0 - y * y))

    return _make_node(out_data, (a,), "tanh", backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make_node(a.data + b.data, (a, b), "add", backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _make_node(a.data - b.data, (a, b), "sub", backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    a_data, b_data = a.data, b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g * b_data)
        if b.requires_grad:
            b._accumulate(g * a_data)

    return _make_node(a_data * b_data, (a, b), "mul", backward_fn)


def square(a: Tensor) -> Tensor:
    a_data = a.data

    def backward_fn(g):
        a._accumulate(g * (2.0 * a_data))

    return _make_node(a_data * a_data, (a,), "square", backward_fn)


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NumericError("log: input must be strictly positive")
    a_data = a.data

    def backward_fn(g):
        a._accumulate(g / a_data)

    return _make_node(np.log(a_data), (a,), "log", backward_fn)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out_data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def backward_fn(g):
        a._accumulate(g * inside)

    return _make_node(out_data, (a,), "clamp", backward_fn)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward_fn(g):
        a._accumulate(g * c)

    return _make_node(a.data * c, (a,), "scale", backward_fn)


_POINTWISE_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "square": square}
_POINTWISE_BINARY = {"add": add, "sub": sub, "mul": mul}


def pointwise(a: Tensor, kind: str, b: Tensor | None = None) -> Tensor:
    """Dispatch to an elementwise op by name: sigmoid|tanh|square|add|sub|mul."""
    if kind in _POINTWISE_UNARY:
        if b is not None:
            raise ValueError(f"pointwise {kind!r} is unary")
        return _POINTWISE_UNARY[kind](a)
    if kind in _POINTWISE_BINARY:
        if b is None:
            raise ValueError(f"pointwise {kind!r} needs two operands")
        return _POINTWISE_BINARY[kind](a, b)
    raise ValueError(f"unknown pointwise kind {kind!r}")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_cols: need at least one part")
    rows = parts[0].data.shape[0]
    for p in parts[1:]:
        if p.data.shape[0] != rows:
            raise ShapeError(
                f"concat_cols: row counts differ, {parts[0].data.shape} vs {p.data.shape}")
    out_data = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.data.shape[1] for p in parts])

    def backward_fn(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accumulate(g[:, lo:hi])

    return _make_node(out_data, parts, "concat_cols", backward_fn)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_rows: need at least one part")
    cols = parts[0].data.shape[1]
    for p in parts[1:]:
        if p.data.shape[1] != cols:
            raise ShapeError(
                f"concat_rows: column counts differ, {parts[0].data.shape} vs {p.data.shape}")
    out_data = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def backward_fn(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accumulate(g[lo:hi, :])

    return _make_node(out_data, parts, "concat_rows", backward_fn)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= a.data.shape[0]):
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for shape {a.data.shape}")
    out_data = np.ascontiguousarray(a.data[start:stop, :])

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[start:stop, :] = g
        a._accumulate(full)

    return _make_node(out_data, (a,), "slice_rows", backward_fn)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= a.data.shape[1]):
        raise ShapeError(f"slice_cols: [{start}:{stop}] out of range for shape {a.data.shape}")
    out_data = np.ascontiguousarray(a.data[:, start:stop])

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        a._accumulate(full)

    return _make_node(out_data, (a,), "slice_cols", backward_fn)


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    """Add a 1 x n bias row to every row of an m x n tensor.

    This is the only broadcast in the engine.
    """
    if bias.data.shape[0] != 1 or bias.data.shape[1] != a.data.shape[1]:
        raise ShapeError(
            f"add_bias: bias shape {bias.data.shape} does not broadcast over {a.data.shape}")

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g)
        if bias.requires_grad:
            bias._accumulate(
                g.sum(axis=0, keepdims=True, dtype=np.float64).astype(g.dtype))

    return _make_node(a.data + bias.data, (a, bias), "add_bias", backward_fn)


def sum_all(a: Tensor) -> Tensor:
    out_data = np.array([[a.data.sum(dtype=np.float64)]], dtype=a.data.dtype)

    def backward_fn(g):
        a._accumulate(np.full_like(a.data, g[0, 0]))

    return _make_node(out_data, (a,), "sum_all", backward_fn)


# ---------------------------------------------------------------------------
# graph traversal


def toposort(root: Tensor) -> list:
    """Nodes of the DAG under ``root``, parents before children, each once."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad tensor reachable from ``loss``.

    ``loss`` must be scalar (1x1). Each node's backward closure runs exactly
    once, after the node's full output gradient has accumulated.
    """
    if loss.data.shape != (1, 1):
        raise ShapeError(f"backward: loss must be scalar 1x1, got {loss.data.shape}")
    order = toposort(loss)
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# validation harness


def grad_check(f: Callable[[], Tensor], leaves: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` re-evaluates the scalar objective from the leaves' current data;
    it is called 2x per leaf coordinate. Relative error per coordinate is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    leaves = list(leaves)
    zero_grads(toposort(out := f()))
    if out.data.shape != (1, 1):
        raise ShapeError(f"grad_check: objective must be scalar, got {out.data.shape}")
    backward(out)
    analytic = [None if leaf.grad is None else leaf.grad.copy() for leaf in leaves]

    worst = 0.0
    for leaf, a_grad in zip(leaves, analytic):
        if a_grad is None:
            a_grad = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        a_flat = a_grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().item()
            flat[i] = orig - eps
            f_minus = f().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(1.0, abs(a_flat[i]), abs(numeric))
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# construction helpers


def zeros(rows: int, cols: int, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros((rows, cols)), requires_grad=requires_grad, dtype=dtype)


def uniform_matrix(rows: int, cols: int, rng: np.random.Generator, dtype=None) -> Tensor:
    """Trainable matrix drawn U(-sqrt(3/rows), +sqrt(3/rows)).

    Rows are the input dimension under the row-vector convention used
    throughout; the bound gives the map unit output variance for unit-
    variance inputs. That matters here: the encoder stacks three linear
    maps per layer with no residual path, so a bound that shrinks variance
    (e.g. 1/sqrt(rows), a factor 3 per map) collapses the signal by ~27x
    per layer and stalls training at small learning rates.
    """
    bound = np.sqrt(3.0 / rows)
    data = rng.uniform(-bound, bound, size=(rows, cols))
    return Tensor(data, requires_grad=True, dtype=dtype)
