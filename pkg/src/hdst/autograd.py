"""Reverse-mode automatic differentiation over dense numpy arrays.

A small eager tape: each op returns a ``Tensor`` holding the forward value
and, while gradients are enabled, a closure that routes the upstream
gradient to the op's inputs. ``backward()`` on a scalar output walks the
tape in reverse topological order and accumulates into ``.grad``.

Arrays are float32 by default; the finite-difference checker runs the same
graph in float64 for headroom. Integer data (token ids, scatter indices)
and boolean masks are passed around as plain numpy arrays, never tensors,
so the recorded graph stays purely floating point.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "GraphError",
    "ShapeError",
    "Tensor",
    "no_grad",
    "constant",
    "add",
    "sub",
    "neg",
    "mul",
    "matmul",
    "transpose",
    "concat",
    "slice_rows",
    "slice_cols",
    "row",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "tsum",
    "mean",
    "softmax",
    "masked_softmax",
    "max_pool_rows",
    "embedding_lookup",
    "take_per_row",
    "scatter_add_cols",
    "lstm_gates",
    "dropout",
    "grad_check",
]


class GraphError(RuntimeError):
    """Invalid tape use: reused backward pass, non-scalar root, bad values."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float array plus optional gradient and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "_spent")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable[[np.ndarray], tuple] | None = None
        self._spent = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable tensor.

        A tape may be walked once; rerun the forward pass to differentiate
        again (rejected-reuse contract).
        """
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar output, got shape {self.shape}")
        if self._spent:
            raise GraphError("backward() already ran on this graph; rebuild the forward pass")
        self._spent = True
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bwd is None or node.grad is None:
                continue
            grads = node._bwd(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar, mostly for tests
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._spent = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
    else:
        out.requires_grad = False
        out._parents = ()
        out._bwd = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from e

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def sub(a: Tensor, b) -> Tensor:
    return add(a, neg(_lift(b, a)))


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from e

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(data, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _node(data, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d tensor, got shape {a.shape}")
    return _node(a.data.T, (a,), lambda g: (g.T,))


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not parts:
        raise ShapeError("concat: empty part list")
    if axis not in (0, 1):
        raise ShapeError(f"concat: axis must be 0 or 1, got {axis}")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}") from e
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        if axis == 0:
            return tuple(g[offsets[i]:offsets[i + 1], ...] for i in range(len(parts)))
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _node(data, tuple(parts), bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= a.shape[0]):
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for shape {a.shape}")
    data = a.data[start:stop]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _node(data, (a,), bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2 or not (0 <= start < stop <= a.shape[1]):
        raise ShapeError(f"slice_cols: [{start}:{stop}] out of range for shape {a.shape}")
    data = a.data[:, start:stop]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _node(data, (a,), bwd)


def row(a: Tensor, i: int) -> Tensor:
    return slice_rows(a, i, i + 1)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_stable(a.data)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _node(out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _node(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise GraphError("log: non-positive input")
    out = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _node(out, (a,), bwd)


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        gg = g if (axis is None or keepdims) else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _node(np.asarray(data), (a,), bwd)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = tsum(a)
    return mul(out, 1.0 / n)


def masked_softmax(a: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise softmax with masked positions pinned to exactly zero.

    `mask` is a boolean array broadcastable to `a`; masked entries get zero
    probability and zero gradient. A row with no valid entry is an error.
    """
    if a.ndim != 2:
        raise ShapeError(f"masked_softmax: expected 2-d tensor, got shape {a.shape}")
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    if not m.any(axis=1).all():
        raise ShapeError("masked_softmax: a row has no unmasked entry")
    x = np.where(m, a.data, -np.inf)
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    e = np.where(m, e, 0.0)
    out = e / e.sum(axis=1, keepdims=True)
    out = out.astype(a.dtype, copy=False)

    def bwd(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (a,), bwd)


def softmax(a: Tensor) -> Tensor:
    return masked_softmax(a, np.ones(a.shape, dtype=bool))


def max_pool_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Column-wise max over (unmasked) rows; returns shape (1, n_cols).

    Gradient is routed to the first row attaining each column maximum.
    """
    if a.ndim != 2:
        raise ShapeError(f"max_pool_rows: expected 2-d tensor, got shape {a.shape}")
    x = a.data
    if mask is not None:
        valid = np.asarray(mask, dtype=bool)
        if valid.shape != (a.shape[0],):
            raise ShapeError(f"max_pool_rows: mask shape {valid.shape} != ({a.shape[0]},)")
        if not valid.any():
            raise ShapeError("max_pool_rows: no unmasked row")
        x = np.where(valid[:, None], x, -np.inf)
    argmax = x.argmax(axis=0)
    out = x[argmax, np.arange(a.shape[1])].reshape(1, -1)

    def bwd(g):
        full = np.zeros_like(a.data)
        full[argmax, np.arange(a.shape[1])] = g[0]
        return (full,)

    return _node(out, (a,), bwd)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"embedding_lookup: ids must be 1-d, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding_lookup: id out of range")
    data = table.data[ids]

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _node(data, (table,), bwd)


def take_per_row(a: Tensor, cols: np.ndarray) -> Tensor:
    """Pick one column per row; returns shape (n_rows, 1)."""
    cols = np.asarray(cols, dtype=np.int64)
    if a.ndim != 2 or cols.shape != (a.shape[0],):
        raise ShapeError(f"take_per_row: cols shape {cols.shape} for tensor {a.shape}")
    if cols.size and (cols.min() < 0 or cols.max() >= a.shape[1]):
        raise ShapeError("take_per_row: column index out of range")
    rows = np.arange(a.shape[0])
    data = a.data[rows, cols].reshape(-1, 1)

    def bwd(g):
        full = np.zeros_like(a.data)
        full[rows, cols] = g[:, 0]
        return (full,)

    return _node(data, (a,), bwd)


def scatter_add_cols(a: Tensor, cols: np.ndarray, n_cols: int) -> Tensor:
    """Sum column p of `a` into output column cols[p]; output (n_rows, n_cols)."""
    cols = np.asarray(cols, dtype=np.int64)
    if a.ndim != 2 or cols.shape != (a.shape[1],):
        raise ShapeError(f"scatter_add_cols: cols shape {cols.shape} for tensor {a.shape}")
    if cols.size and (cols.min() < 0 or cols.max() >= n_cols):
        raise ShapeError("scatter_add_cols: target column out of range")
    data = np.zeros((a.shape[0], n_cols), dtype=a.dtype)
    np.add.at(data.T, cols, a.data.T)

    def bwd(g):
        return (g[:, cols],)

    return _node(data, (a,), bwd)


def lstm_gates(z: Tensor, c_prev: Tensor) -> Tensor:
    """Fused LSTM gate activation: one node for the whole cell update.

    ``z`` holds the four pre-activation gate blocks [input, forget, cell,
    output] side by side, shape (batch, 4h). Returns [h ; c] as (batch, 2h);
    callers slice the halves apart. Fusing keeps the per-token tape short.
    """
    if z.ndim != 2 or z.shape[1] % 4 != 0:
        raise ShapeError(f"lstm_gates: z must be (batch, 4*hidden), got {z.shape}")
    hidden = z.shape[1] // 4
    if c_prev.shape != (z.shape[0], hidden):
        raise ShapeError(f"lstm_gates: c_prev shape {c_prev.shape} != ({z.shape[0]}, {hidden})")
    x = z.data
    i = _sigmoid_stable(x[:, :hidden])
    f = _sigmoid_stable(x[:, hidden:2 * hidden])
    g = np.tanh(x[:, 2 * hidden:3 * hidden])
    o = _sigmoid_stable(x[:, 3 * hidden:])
    c = f * c_prev.data + i * g
    tc = np.tanh(c)
    h = o * tc
    out = np.concatenate([h, c], axis=1)

    def bwd(grad):
        dh = grad[:, :hidden]
        dc = grad[:, hidden:] + dh * o * (1.0 - tc * tc)
        dz = np.empty_like(x)
        dz[:, :hidden] = dc * g * i * (1.0 - i)
        dz[:, hidden:2 * hidden] = dc * c_prev.data * f * (1.0 - f)
        dz[:, 2 * hidden:3 * hidden] = dc * i * (1.0 - g * g)
        dz[:, 3 * hidden:] = dh * tc * o * (1.0 - o)
        return dz, dc * f

    return _node(out, (z, c_prev), bwd)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def dropout(a: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity when not training or rate is zero."""
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout: rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return a
    if rng is None:
        raise ShapeError("dropout: training mode needs a random generator")
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)

    def bwd(g):
        return (g * keep,)

    return _node(a.data * keep, (a,), bwd)


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[tuple[str, Tensor]],
    epsilon: float = 1e-4,
) -> float:
    """Compare reverse-mode gradients of ``f()`` against central differences.

    ``f`` must rebuild its graph from the current parameter values on every
    call and be deterministic (dropout off). Returns the max over all
    parameter entries of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
    """
    if not 1e-5 <= epsilon <= 1e-3:
        raise ValueError(f"grad_check: epsilon must be in [1e-5, 1e-3], got {epsilon}")
    params = list(params)
    for _, p in params:
        p.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        raise GraphError("grad_check: non-finite forward value")
    out.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for name, p in params}

    worst = 0.0
    for name, p in params:
        flat = p.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = f().item()
            flat[i] = orig - epsilon
            lo = f().item()
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise GraphError(f"grad_check: non-finite value while perturbing {name}[{i}]")
            fd = (hi - lo) / (2.0 * epsilon)
            err = abs(ga[i] - fd) / max(1.0, abs(ga[i]), abs(fd))
            if err > worst:
                worst = err
    return worst
