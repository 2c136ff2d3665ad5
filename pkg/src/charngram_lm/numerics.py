"""Dense numpy arrays with reverse-mode gradients.

Only the operations the language model needs are provided.  Shapes are
explicit: the sole broadcasting rule is adding a bias vector to the rows
of a matrix (:func:`add_bias`).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Build no backward graph inside the block (evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    def __init__(self, data, requires_grad=False, parents=(), backward=None, op=""):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            g = g.reshape(self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward: implicit gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        # iterative topological order; graphs over long sequences overflow recursion
        order, seen, stack = [], set(), [(self, False)]
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
        # intermediate grads are transient; leaves keep accumulating
        pending = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
            else:
                node._backward(g, pending)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


class Parameter(Tensor):
    """A named leaf tensor owned by a model."""

    def __init__(self, name: str, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _send(pending, t, g):
    if not t.requires_grad:
        return
    key = id(t)
    if t._backward is None:
        # leaf: accumulate directly so repeated uses sum up
        t._accumulate(g)
        return
    if key in pending:
        pending[key] = pending[key] + g
    else:
        pending[key] = g


def _result(data, parents, backward, op):
    parents = tuple(parents)
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward, op)
    return Tensor(data, op=op)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g, pending):
        _send(pending, a, g @ b.data.T)
        _send(pending, b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)

    def backward(g, pending):
        _send(pending, a, g)
        _send(pending, b, g)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)

    def backward(g, pending):
        _send(pending, a, g)
        _send(pending, b, -g)

    return _result(a.data - b.data, (a, b), backward, "sub")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x[i, :] + b`` for every row of a 2-d ``x``."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: incompatible shapes {x.shape} and {b.shape}")

    def backward(g, pending):
        _send(pending, x, g)
        _send(pending, b, g.sum(axis=0))

    return _result(x.data + b.data, (x, b), backward, "add_bias")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)

    def backward(g, pending):
        _send(pending, a, g * b.data)
        _send(pending, b, g * a.data)

    return _result(a.data * b.data, (a, b), backward, "mul")


mul_elementwise = mul


def scale(x: Tensor, c: float) -> Tensor:
    def backward(g, pending):
        _send(pending, x, g * c)

    return _result(x.data * c, (x,), backward, "scale")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g, pending):
        _send(pending, x, g * (1.0 - y * y))

    return _result(y, (x,), backward, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    # tanh form avoids overflow in exp for large |x|
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g, pending):
        _send(pending, x, g * y * (1.0 - y))

    return _result(y, (x,), backward, "sigmoid")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_rows: nothing to concatenate")
    tail = parts[0].shape[1:]
    for p in parts:
        if p.shape[1:] != tail:
            raise ShapeError(f"concat_rows: shape mismatch {parts[0].shape} vs {p.shape}")
    sizes = [p.shape[0] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g, pending):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _send(pending, p, g[lo:hi])

    return _result(np.concatenate([p.data for p in parts], axis=0), parts, backward, "concat_rows")


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    n = x.shape[0]
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"slice_rows: range [{start}, {stop}) outside shape {x.shape}")

    def backward(g, pending):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        _send(pending, x, full)

    return _result(x.data[start:stop], (x,), backward, "slice_rows")


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not 0 <= start <= stop <= x.shape[1]:
        raise ShapeError(f"slice_cols: range [{start}, {stop}) outside shape {x.shape}")

    def backward(g, pending):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        _send(pending, x, full)

    return _result(x.data[:, start:stop], (x,), backward, "slice_cols")


def scatter_add_rows(n_rows: int, ids: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Dense ``out[ids[k]] += values[k]`` via a sparse product (much faster than ``np.add.at``)."""
    ids = np.asarray(ids).ravel()
    values = values.reshape(len(ids), -1)
    if len(ids) == 0:
        return np.zeros((n_rows, values.shape[1]), dtype=values.dtype)
    P = sparse.csr_matrix(
        (np.ones(len(ids), dtype=values.dtype), (ids, np.arange(len(ids)))), shape=(n_rows, len(ids))
    )
    return np.asarray(P @ values)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of a 2-d ``table`` selected by an integer array of any shape."""
    ids = np.asarray(ids)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: ids outside [0, {table.shape[0]})")

    def backward(g, pending):
        n, d = table.shape
        _send(pending, table, scatter_add_rows(n, ids, g.reshape(-1, d)).astype(table.dtype, copy=False))

    return _result(table.data[ids], (table,), backward, "embedding_lookup")


take_rows = embedding_lookup


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None

    def backward(g, pending):
        _send(pending, x, g.reshape(x.shape))

    return _result(y, (x,), backward, "reshape")


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d, got {x.shape}")

    def backward(g, pending):
        _send(pending, x, g.T)

    return _result(x.data.T, (x,), backward, "transpose")


def sum_over_axis(x: Tensor, axis=None) -> Tensor:
    y = x.data.sum(axis=axis)

    def backward(g, pending):
        if axis is None:
            full = np.broadcast_to(g, x.shape)
        else:
            full = np.broadcast_to(np.expand_dims(g, axis), x.shape)
        _send(pending, x, np.array(full))

    return _result(y, (x,), backward, "sum")


def _check_finite(op, arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite input")


def _softmax_np(x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_over_axis(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite("softmax_over_axis", x.data)
    y = _softmax_np(x.data, axis)

    def backward(g, pending):
        _send(pending, x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (x,), backward, "softmax")


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-probability of ``targets`` under row-wise softmax."""
    targets = np.asarray(targets).ravel()
    if logits.data.ndim != 2 or logits.shape[0] != len(targets):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets ({len(targets)},)")
    v = logits.shape[1]
    if len(targets) and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"cross_entropy: target outside [0, {v})")
    _check_finite("cross_entropy", logits.data)
    logp = log_softmax_np(logits.data, axis=1)
    rows = np.arange(len(targets))
    n = len(targets)
    loss = -logp[rows, targets].sum() / n

    def backward(g, pending):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        _send(pending, logits, p * (g / n))

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


class Segments:
    """Contiguous row groups: group ``k`` is ``lengths[k]`` consecutive rows."""

    def __init__(self, lengths):
        lengths = np.asarray(lengths, dtype=np.int64).reshape(-1)
        if len(lengths) == 0 or lengths.min() < 1:
            raise ShapeError("segment ops need at least one row per segment")
        self.lengths = lengths
        self.starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        self.n_rows = int(lengths.sum())
        self._matrix = None

    def __len__(self):
        return len(self.lengths)

    def matrix(self, dtype):
        # sparse 0/1 membership matrix; a product with it sums each group
        if self._matrix is None or self._matrix.dtype != dtype:
            seg = np.repeat(np.arange(len(self.lengths)), self.lengths)
            self._matrix = sparse.csr_matrix(
                (np.ones(self.n_rows, dtype=dtype), (seg, np.arange(self.n_rows))),
                shape=(len(self.lengths), self.n_rows),
            )
        return self._matrix

    def sum(self, x):
        return np.asarray(self.matrix(x.dtype) @ x)

    def max(self, x):
        m = x[self.starts].copy()
        for k in range(1, int(self.lengths.max())):
            live = np.flatnonzero(self.lengths > k)
            m[live] = np.maximum(m[live], x[self.starts[live] + k])
        return m

    def spread(self, y):
        return np.repeat(y, self.lengths, axis=0)


def _segments(lengths, x, op):
    seg = lengths if isinstance(lengths, Segments) else Segments(lengths)
    if x.data.ndim != 2 or seg.n_rows != x.shape[0]:
        raise ShapeError(f"{op}: segments cover {seg.n_rows} rows, input {x.shape}")
    return seg


def segment_softmax(x: Tensor, lengths) -> Tensor:
    """Softmax down the rows of each contiguous segment, separately per column."""
    seg = _segments(lengths, x, "segment_softmax")
    _check_finite("segment_softmax", x.data)
    e = np.exp(x.data - seg.spread(seg.max(x.data)))
    y = e / seg.spread(seg.sum(e))

    def backward(g, pending):
        _send(pending, x, y * (g - seg.spread(seg.sum(g * y))))

    return _result(y, (x,), backward, "segment_softmax")


def segment_sum(x: Tensor, lengths) -> Tensor:
    seg = _segments(lengths, x, "segment_sum")

    def backward(g, pending):
        _send(pending, x, seg.spread(g))

    return _result(seg.sum(x.data), (x,), backward, "segment_sum")


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    if p <= 0.0:
        return x
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, Tensor(mask))


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, W_ih: Tensor, W_hh: Tensor, b: Tensor):
    """One LSTM step on a batch of rows.

    Gate columns are laid out as ``[input, forget, candidate, output]``.
    """
    hidden = h_prev.shape[1]
    if W_ih.shape != (x.shape[1], 4 * hidden) or W_hh.shape != (hidden, 4 * hidden) or b.shape != (4 * hidden,):
        raise ShapeError(
            f"lstm_cell: x {x.shape}, h {h_prev.shape}, W_ih {W_ih.shape}, W_hh {W_hh.shape}, b {b.shape}"
        )
    _same_shape("lstm_cell", h_prev, c_prev)
    z = add_bias(add(matmul(x, W_ih), matmul(h_prev, W_hh)), b)
    i = sigmoid(slice_cols(z, 0, hidden))
    f = sigmoid(slice_cols(z, hidden, 2 * hidden))
    g = tanh(slice_cols(z, 2 * hidden, 3 * hidden))
    o = sigmoid(slice_cols(z, 3 * hidden, 4 * hidden))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c


def grad_check(
    fn: Callable[..., Tensor],
    x: Tensor | Iterable[Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Largest relative gap between backprop and central differences.

    ``fn`` is called with no arguments when ``x`` is a list of tensors, else
    with ``x``.  Entries whose gradients are both below ``floor`` in
    magnitude are compared on an absolute scale.  ``max_entries`` samples
    coordinates per tensor to bound the cost on larger parameter sets.
    """
    tensors = [x] if isinstance(x, Tensor) else list(x)
    call = (lambda: fn(x)) if isinstance(x, Tensor) else fn
    for t in tensors:
        t.grad = None
    out = call()
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for k in idx:
            orig = flat[k]
            flat[k] = orig + eps
            up = float(call().data)
            flat[k] = orig - eps
            down = float(call().data)
            flat[k] = orig
            num = (up - down) / (2 * eps)
            an = float(a.reshape(-1)[k])
            err = abs(an - num) / max(abs(an), abs(num), floor)
            worst = max(worst, err)
    for t in tensors:
        t.grad = None
    return worst
