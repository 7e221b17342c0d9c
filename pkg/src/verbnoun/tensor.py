"""Dense float64 tensors with a single-use reverse-mode tape.

Only the handful of primitives the attention pipeline needs are provided:
matrix multiply, broadcast add/sub/mul, ReLU, sigmoid, row softmax,
log-sum-exp, element pick, row reductions, and a sum. Every primitive
records a backward closure on the active tape; `Tape.backprop` replays
the closures in exact reverse execution order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NonFiniteError, OracleInvalidError, UsageError

_ACTIVE_TAPE = None


class Tensor:
    """Row-major float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 3:
            raise DimensionError(f"rank {arr.ndim} tensor not supported (max 3)")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor holds non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of executed primitives; consumed by one backward pass."""

    def __init__(self):
        self._ops = []          # (output tensor, backward closure)
        self._produced = set()  # ids of tensors created under this tape
        self._adjoints = {}     # id(tensor) -> accumulated upstream gradient
        self._spent = False

    def __enter__(self):
        global _ACTIVE_TAPE
        self._outer = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._outer
        return False

    def _record(self, out: Tensor, backward) -> None:
        self._produced.add(id(out))
        self._ops.append((out, backward))

    def _accumulate(self, x: Tensor, g: np.ndarray) -> None:
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad += g
        if id(x) in self._produced:
            prev = self._adjoints.get(id(x))
            self._adjoints[id(x)] = g if prev is None else prev + g

    def _needs(self, x: Tensor) -> bool:
        return x.requires_grad or id(x) in self._produced

    def backprop(self, loss: Tensor) -> None:
        """Fill grad buffers of every requires_grad leaf reachable from loss."""
        if self._spent:
            raise UsageError("tape already consumed by a previous backward pass")
        if loss.data.shape != ():
            raise UsageError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if id(loss) not in self._produced:
            raise UsageError("loss was not produced on this tape")
        self._spent = True
        self._adjoints = {id(loss): np.ones(())}
        for out, backward in reversed(self._ops):
            g = self._adjoints.pop(id(out), None)
            if g is not None:
                backward(g)
        self._adjoints = {}


def _tape() -> Tape | None:
    return _ACTIVE_TAPE


def _make(data: np.ndarray) -> Tensor:
    """Wrap an op result without re-validating: primitives preserve finiteness
    of finite inputs (softmax and sigmoid are max-shifted / sign-split)."""
    t = Tensor.__new__(Tensor)
    t.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 \
        else np.asarray(data, dtype=np.float64)
    t.requires_grad = False
    t.grad = None
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient g down to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _binary_shapes(a: Tensor, b: Tensor, opname: str) -> None:
    if a.data.shape == b.data.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"{opname}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")
    out = _make(a.data + b.data)
    t = _tape()
    if t is not None:
        na, nb = t._needs(a), t._needs(b)

        def backward(g):
            if na:
                t._accumulate(a, _unbroadcast(g, a.shape))
            if nb:
                t._accumulate(b, _unbroadcast(g, b.shape))

        t._record(out, backward)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "sub")
    out = _make(a.data - b.data)
    t = _tape()
    if t is not None:
        na, nb = t._needs(a), t._needs(b)

        def backward(g):
            if na:
                t._accumulate(a, _unbroadcast(g, a.shape))
            if nb:
                t._accumulate(b, _unbroadcast(-g, b.shape))

        t._record(out, backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")
    out = _make(a.data * b.data)
    t = _tape()
    if t is not None:
        na, nb = t._needs(a), t._needs(b)
        ad, bd = a.data, b.data

        def backward(g):
            if na:
                t._accumulate(a, _unbroadcast(g * bd, a.shape))
            if nb:
                t._accumulate(b, _unbroadcast(g * ad, b.shape))

        t._record(out, backward)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = _make(a.data * c)
    t = _tape()
    if t is not None and t._needs(a):
        t._record(out, lambda g: t._accumulate(a, g * c))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix/vector product for ranks (2,2), (2,1), (1,2) and (1,1)."""
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise DimensionError(f"matmul: ranks {a.data.ndim} x {b.data.ndim} unsupported")
    a2 = a.data if a.data.ndim == 2 else a.data[None, :]
    b2 = b.data if b.data.ndim == 2 else b.data[:, None]
    if a2.shape[1] != b2.shape[0]:
        raise DimensionError(f"matmul: inner dims of {a.shape} and {b.shape} disagree")
    out2 = a2 @ b2
    out_data = out2
    if a.data.ndim == 1:
        out_data = out_data[0]
    if b.data.ndim == 1:
        out_data = out_data[..., 0] if a.data.ndim == 2 else out_data[0]
    out = _make(out_data)
    t = _tape()
    if t is not None:
        na, nb = t._needs(a), t._needs(b)

        def backward(g):
            g2 = np.asarray(g, dtype=np.float64).reshape(a2.shape[0], b2.shape[1])
            if na:
                t._accumulate(a, (g2 @ b2.T).reshape(a.shape))
            if nb:
                t._accumulate(b, (a2.T @ g2).reshape(b.shape))

        t._record(out, backward)
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a rank-2 tensor, got {a.shape}")
    out = _make(a.data.T.copy())
    t = _tape()
    if t is not None and t._needs(a):
        t._record(out, lambda g: t._accumulate(a, np.asarray(g).T))
    return out


def relu(a: Tensor) -> Tensor:
    out = _make(np.maximum(a.data, 0.0))
    t = _tape()
    if t is not None and t._needs(a):
        mask = a.data > 0.0  # derivative at exactly 0 is taken as 0
        t._record(out, lambda g: t._accumulate(a, g * mask))
    return out


def _sigmoid_grad(y: np.ndarray) -> np.ndarray:
    return y * (1.0 - y)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither exp overflows
    pos = x >= 0
    y = np.empty_like(x)
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = _make(y)
    t = _tape()
    if t is not None and t._needs(a):
        t._record(out, lambda g: t._accumulate(a, g * _sigmoid_grad(out.data)))
    return out


def softmax_rows(a: Tensor) -> Tensor:
    """Max-shifted softmax along the last axis of a rank-1 or rank-2 tensor."""
    if a.data.ndim not in (1, 2):
        raise DimensionError(f"softmax_rows needs rank 1 or 2, got {a.shape}")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _make(y)
    t = _tape()
    if t is not None and t._needs(a):

        def backward(g):
            yv = out.data
            t._accumulate(a, yv * (g - (g * yv).sum(axis=-1, keepdims=True)))

        t._record(out, backward)
    return out


def logsumexp(a: Tensor) -> Tensor:
    """Max-shifted log-sum-exp of a rank-1 tensor, as a scalar."""
    if a.data.ndim != 1:
        raise DimensionError(f"logsumexp needs a rank-1 tensor, got {a.shape}")
    m = a.data.max()
    out = _make(m + np.log(np.exp(a.data - m).sum()))
    t = _tape()
    if t is not None and t._needs(a):

        def backward(g):
            e = np.exp(a.data - out.data)  # softmax of the input
            t._accumulate(a, g * e)

        t._record(out, backward)
    return out


def pick(a: Tensor, index: int) -> Tensor:
    """Select one element of a rank-1 tensor, as a scalar."""
    if a.data.ndim != 1:
        raise DimensionError(f"pick needs a rank-1 tensor, got {a.shape}")
    if not 0 <= index < a.data.shape[0]:
        raise IndexError(f"index {index} out of range for length {a.data.shape[0]}")
    out = _make(a.data[index])
    t = _tape()
    if t is not None and t._needs(a):

        def backward(g):
            buf = np.zeros_like(a.data)
            buf[index] = g
            t._accumulate(a, buf)

        t._record(out, backward)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = _make(a.data.sum())
    t = _tape()
    if t is not None and t._needs(a):
        t._record(out, lambda g: t._accumulate(a, np.broadcast_to(g, a.shape).copy()))
    return out


def mean_rows(a: Tensor) -> Tensor:
    """Column-wise mean over the rows of a rank-2 tensor."""
    if a.data.ndim != 2:
        raise DimensionError(f"mean_rows needs a rank-2 tensor, got {a.shape}")
    n = a.data.shape[0]
    out = _make(a.data.mean(axis=0))
    t = _tape()
    if t is not None and t._needs(a):
        t._record(out, lambda g: t._accumulate(a, np.broadcast_to(g / n, a.shape).copy()))
    return out


def max_rows(a: Tensor) -> Tensor:
    """Column-wise max over the rows of a rank-2 tensor.

    Ties route the gradient to the lowest row index, mirroring argmax.
    """
    if a.data.ndim != 2:
        raise DimensionError(f"max_rows needs a rank-2 tensor, got {a.shape}")
    idx = a.data.argmax(axis=0)
    out = _make(a.data.max(axis=0))
    t = _tape()
    if t is not None and t._needs(a):

        def backward(g):
            buf = np.zeros_like(a.data)
            buf[idx, np.arange(a.data.shape[1])] = g
            t._accumulate(a, buf)

        t._record(out, backward)
    return out


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = _make(a.data.reshape(shape))
    t = _tape()
    if t is not None and t._needs(a):
        t._record(out, lambda g: t._accumulate(a, np.asarray(g).reshape(a.shape)))
    return out


def matmul_rows(a: Tensor, w: Tensor) -> Tensor:
    """Batched row transform: (B, N, C) x (C, D) -> (B, N, D)."""
    if a.data.ndim != 3 or w.data.ndim != 2:
        raise DimensionError(f"matmul_rows needs ranks (3, 2), got {a.shape}, {w.shape}")
    if a.data.shape[2] != w.data.shape[0]:
        raise DimensionError(f"matmul_rows: inner dims of {a.shape} and {w.shape} disagree")
    out = _make(a.data @ w.data)
    t = _tape()
    if t is not None:
        na, nw = t._needs(a), t._needs(w)

        def backward(g):
            if na:
                t._accumulate(a, g @ w.data.T)
            if nw:
                flat = a.data.reshape(-1, a.data.shape[2])
                t._accumulate(w, flat.T @ g.reshape(-1, g.shape[2]))

        t._record(out, backward)
    return out


def rows_affine_relu(rows: Tensor, w: Tensor, shift: Tensor) -> Tensor:
    """relu(rows @ w.T + shift[:, None, :]): the fused integration stage.

    rows is (B, N, C), w is (D, C), shift is (B, D); one primitive instead
    of a matmul/add/add/relu chain to avoid three (B, N, D) temporaries.
    """
    if rows.data.ndim != 3 or w.data.ndim != 2 or shift.data.ndim != 2:
        raise DimensionError(
            f"rows_affine_relu needs ranks (3, 2, 2), got {rows.shape}, "
            f"{w.shape}, {shift.shape}")
    if rows.data.shape[2] != w.data.shape[1] \
            or shift.data.shape != (rows.data.shape[0], w.data.shape[0]):
        raise DimensionError(
            f"rows_affine_relu: shapes {rows.shape}, {w.shape}, {shift.shape} disagree")
    y = rows.data @ w.data.T
    y += shift.data[:, None, :]
    np.maximum(y, 0.0, out=y)
    out = _make(y)
    t = _tape()
    if t is not None:
        nr, nw, ns = t._needs(rows), t._needs(w), t._needs(shift)

        def backward(g):
            gm = g * (y > 0)
            if nr:
                t._accumulate(rows, gm @ w.data)
            if nw:
                gflat = gm.reshape(-1, gm.shape[2])
                t._accumulate(w, gflat.T @ rows.data.reshape(-1, rows.data.shape[2]))
            if ns:
                t._accumulate(shift, gm.sum(axis=1))

        t._record(out, backward)
    return out


def rows_dot(a: Tensor, q: Tensor) -> Tensor:
    """Per-sample row/query dot products: (B, N, C) x (B, C) -> (B, N)."""
    if a.data.ndim != 3 or q.data.ndim != 2 or a.data.shape[::2] != q.data.shape:
        raise DimensionError(f"rows_dot: shapes {a.shape} and {q.shape} disagree")
    out = _make((a.data @ q.data[:, :, None])[:, :, 0])
    t = _tape()
    if t is not None:
        na, nq = t._needs(a), t._needs(q)

        def backward(g):
            if na:
                t._accumulate(a, g[:, :, None] * q.data[:, None, :])
            if nq:
                t._accumulate(q, (g[:, None, :] @ a.data)[:, 0, :])

        t._record(out, backward)
    return out


def weighted_rows(w: Tensor, a: Tensor) -> Tensor:
    """Per-sample weighted row sums: (B, N) x (B, N, C) -> (B, C)."""
    if w.data.ndim != 2 or a.data.ndim != 3 or w.data.shape != a.data.shape[:2]:
        raise DimensionError(f"weighted_rows: shapes {w.shape} and {a.shape} disagree")
    out = _make((w.data[:, None, :] @ a.data)[:, 0, :])
    t = _tape()
    if t is not None:
        nw, na = t._needs(w), t._needs(a)

        def backward(g):
            if nw:
                t._accumulate(w, (a.data @ g[:, :, None])[:, :, 0])
            if na:
                t._accumulate(a, w.data[:, :, None] * g[:, None, :])

        t._record(out, backward)
    return out


def mean_mid(a: Tensor) -> Tensor:
    """Mean over the middle axis: (B, N, C) -> (B, C)."""
    if a.data.ndim != 3:
        raise DimensionError(f"mean_mid needs a rank-3 tensor, got {a.shape}")
    n = a.data.shape[1]
    out = _make(a.data.mean(axis=1))
    t = _tape()
    if t is not None and t._needs(a):
        t._record(out, lambda g: t._accumulate(
            a, np.broadcast_to(g[:, None, :] / n, a.shape).copy()))
    return out


def max_mid(a: Tensor) -> Tensor:
    """Max over the middle axis: (B, N, C) -> (B, C); ties go to the lowest row."""
    if a.data.ndim != 3:
        raise DimensionError(f"max_mid needs a rank-3 tensor, got {a.shape}")
    idx = a.data.argmax(axis=1)
    out = _make(a.data.max(axis=1))
    t = _tape()
    if t is not None and t._needs(a):

        def backward(g):
            buf = np.zeros_like(a.data)
            b, c = np.ogrid[:a.data.shape[0], :a.data.shape[2]]
            buf[b, idx, c] = g
            t._accumulate(a, buf)

        t._record(out, backward)
    return out


def ce_rows(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row cross-entropy: (B, K) logits, length-B targets -> (B,) losses."""
    if logits.data.ndim != 2:
        raise DimensionError(f"ce_rows needs rank-2 logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    b, k = logits.data.shape
    if targets.shape != (b,):
        raise DimensionError(f"ce_rows: {b} logit rows but targets shape {targets.shape}")
    if targets.min() < 0 or targets.max() >= k:
        raise IndexError(f"target out of range for {k} classes")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(b)
    out = _make(lse - shifted[rows, targets])
    t = _tape()
    if t is not None and t._needs(logits):

        def backward(g):
            soft = np.exp(shifted)
            soft /= soft.sum(axis=1, keepdims=True)
            soft[rows, targets] -= 1.0
            t._accumulate(logits, g[:, None] * soft)

        t._record(out, backward)
    return out


@dataclass
class GradCheckReport:
    """Central-difference comparison of an analytic gradient."""

    rel_errors: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    worst_index: tuple
    worst_rel: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.worst_rel < self.tol


def grad_check(f, theta: Tensor, h: float = 1e-6, tol: float = 1e-6) -> GradCheckReport:
    """Compare the taped gradient of scalar f(theta) against central differences.

    f must be deterministic; it is called with a fresh Tensor each time and
    must return a scalar Tensor built from taped primitives.
    """
    if h <= 0:
        raise UsageError("grad_check needs h > 0")

    def value_at(arr: np.ndarray) -> float:
        return f(Tensor(arr)).item()

    base = theta.data.copy()
    v1 = value_at(base)
    v2 = value_at(base)
    if v1 != v2:
        raise OracleInvalidError("function is not deterministic: two evaluations differ")

    param = Tensor(base, requires_grad=True)
    with Tape() as tape:
        loss = f(param)
        tape.backprop(loss)
    analytic = param.grad.copy() if param.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = value_at(base)
        flat[i] = orig - h
        down = value_at(base)
        flat[i] = orig
        num_flat[i] = (up - down) / (2.0 * h)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    rel = np.abs(analytic - numeric) / denom
    worst_flat = int(rel.argmax()) if rel.size else 0
    worst_index = np.unravel_index(worst_flat, rel.shape) if rel.size else ()
    worst = float(rel.reshape(-1)[worst_flat]) if rel.size else 0.0
    return GradCheckReport(
        rel_errors=rel,
        analytic=analytic,
        numeric=numeric,
        worst_index=tuple(int(i) for i in worst_index),
        worst_rel=worst,
        tol=tol,
    )
