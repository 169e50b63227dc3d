"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

Ops record themselves on the active tape (a thread-local stack); calling
``Tape.backward`` replays the records in reverse execution order, which is a
valid topological order, accumulating gradients by summation. With no active
tape, ops run plain numpy and record nothing (inference mode).

Broadcasting is deliberately restricted: elementwise ops demand identical
shapes, and the only broadcasts are a bias vector over rows, a row matrix
over a leading batch axis, and a prepended per-batch row. Everything else is
a ShapeError so each backward rule stays a one-liner that can be audited.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import DegenerateInputError, NumericError, ShapeError

NORM_EPS = 1e-12

_state = threading.local()


def _tape_stack():
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = []
        _state.stack = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Row-major float64 array, optionally participating in a tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Operator sugar; scalars go through scale/shift so the rule set stays small.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    def __radd__(self, other):
        return shift(self, float(other))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered op log; context manager making it the active tape."""

    def __init__(self):
        self._records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out, backward):
        self._records.append((out, backward))

    def backward(self, loss):
        """Seed d(loss)/d(loss)=1 and replay records in reverse order."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, bwd in reversed(self._records):
            if out.grad is not None:
                bwd(out.grad)


class no_tape:
    """Context manager suspending recording (e.g. teacher targets)."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False


def _accum(t, g, fresh=False):
    # fresh=True: g is a newly allocated array this closure exclusively owns,
    # so it can be adopted as the grad buffer without copying. Views of the
    # upstream grad (or the grad itself) must be copied.
    if t.grad is None:
        t.grad = g if fresh else np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _make(data, inputs, backward):
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, backward)
    return out


def _check_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and scalar ops


def add(a, b):
    _check_same_shape("add", a, b)

    def backward(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    _check_same_shape("sub", a, b)

    def backward(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, -g, fresh=True)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    _check_same_shape("mul", a, b)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * b.data, fresh=True)
        if b.requires_grad:
            _accum(b, g * a.data, fresh=True)

    return _make(a.data * b.data, (a, b), backward)


def scale(a, s):
    s = float(s)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * s, fresh=True)

    return _make(a.data * s, (a,), backward)


def shift(a, c):
    c = float(c)

    def backward(g):
        if a.requires_grad:
            _accum(a, g)

    return _make(a.data + c, (a,), backward)


def log(a):
    if np.any(a.data <= 0.0):
        raise NumericError("log: non-positive input; clamp first")

    def backward(g):
        if a.requires_grad:
            _accum(a, g / a.data, fresh=True)

    return _make(np.log(a.data), (a,), backward)


def exp(a):
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * out_data, fresh=True)

    return _make(out_data, (a,), backward)


def clamp_min(a, lo):
    lo = float(lo)
    mask = a.data >= lo

    def backward(g):
        if a.requires_grad:
            _accum(a, g * mask, fresh=True)

    return _make(np.maximum(a.data, lo), (a,), backward)


def unary_from_values(x, values, derivative):
    """Taped elementwise op with precomputed forward values and derivative.

    Lets callers (the activation table) supply exact closed-form derivatives
    without the engine knowing each function.
    """
    values = np.asarray(values, dtype=np.float64)
    derivative = np.asarray(derivative, dtype=np.float64)
    if values.shape != x.data.shape or derivative.shape != x.data.shape:
        raise ShapeError(
            f"unary_from_values: value/derivative shapes {values.shape}/{derivative.shape} "
            f"do not match input {x.data.shape}"
        )

    def backward(g):
        if x.requires_grad:
            _accum(x, g * derivative, fresh=True)

    return _make(values, (x,), backward)


def dropout(x, rate, rng):
    """Inverted dropout; identity when rate == 0."""
    if rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.data.shape) < keep) / keep

    def backward(g):
        if x.requires_grad:
            _accum(x, g * mask, fresh=True)

    return _make(x.data * mask, (x,), backward)


# ---------------------------------------------------------------------------
# structured broadcasts


def add_bias(x, b):
    """x[..., d] + b[d], broadcast over all leading axes."""
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"add_bias: {x.data.shape} + {b.data.shape}")
    lead = tuple(range(x.data.ndim - 1))

    def backward(g):
        if x.requires_grad:
            _accum(x, g)
        if b.requires_grad:
            _accum(b, g.sum(axis=lead), fresh=True) if lead else _accum(b, g)

    return _make(x.data + b.data, (x, b), backward)


def add_rowmat(x, m):
    """x[B, L, d] + m[L, d], broadcast over the batch axis."""
    if x.data.ndim != 3 or m.data.ndim != 2 or x.data.shape[1:] != m.data.shape:
        raise ShapeError(f"add_rowmat: {x.data.shape} + {m.data.shape}")

    def backward(g):
        if x.requires_grad:
            _accum(x, g)
        if m.requires_grad:
            _accum(m, g.sum(axis=0), fresh=True)

    return _make(x.data + m.data, (x, m), backward)


def prepend_row(x, row):
    """Prepend a shared row vector to every sequence: [B, L, d] -> [B, L+1, d]."""
    if x.data.ndim != 3 or row.data.ndim != 1 or x.data.shape[2] != row.data.shape[0]:
        raise ShapeError(f"prepend_row: {x.data.shape} with row {row.data.shape}")
    batch = x.data.shape[0]
    out_data = np.concatenate(
        [np.broadcast_to(row.data, (batch, 1, row.data.shape[0])), x.data], axis=1
    )

    def backward(g):
        if row.requires_grad:
            _accum(row, g[:, 0, :].sum(axis=0), fresh=True)
        if x.requires_grad:
            _accum(x, g[:, 1:, :])

    return _make(out_data, (x, row), backward)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: needs 2-D operands, got {a.data.shape} x {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.data.shape} x {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T, fresh=True)
        if b.requires_grad:
            _accum(b, a.data.T @ g, fresh=True)

    return _make(a.data @ b.data, (a, b), backward)


def bmm(a, b):
    """Batched matmul: [n, l, k] @ [n, k, m] -> [n, l, m]."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError(f"bmm: needs 3-D operands, got {a.data.shape} x {b.data.shape}")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2] != b.data.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.data.shape} x {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.transpose(0, 2, 1), fresh=True)
        if b.requires_grad:
            _accum(b, a.data.transpose(0, 2, 1) @ g, fresh=True)

    return _make(a.data @ b.data, (a, b), backward)


def affine(x, w, b):
    """Fused linear layer x @ w.T + b for 2-D or 3-D x; w is (out, in).

    Same semantics as reshape+matmul+add_bias, one tape record instead of
    four; this is the hot path of every projection in the model.
    """
    if w.data.ndim != 2 or b.data.ndim != 1 or w.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"affine: weight {w.data.shape} and bias {b.data.shape} mismatch")
    if x.data.ndim not in (2, 3) or x.data.shape[-1] != w.data.shape[1]:
        raise ShapeError(f"affine: input {x.data.shape} does not match weight {w.data.shape}")
    in_dim = w.data.shape[1]
    out_dim = w.data.shape[0]
    lead = x.data.shape[:-1]
    # one big GEMM instead of a stack of per-row GEMMs
    out_data = (x.data.reshape(-1, in_dim) @ w.data.T + b.data).reshape(lead + (out_dim,))

    def backward(g):
        gf = g.reshape(-1, out_dim)
        if x.requires_grad:
            _accum(x, (gf @ w.data).reshape(lead + (in_dim,)), fresh=True)
        if w.requires_grad:
            _accum(w, gf.T @ x.data.reshape(-1, in_dim), fresh=True)
        if b.requires_grad:
            _accum(b, gf.sum(axis=0), fresh=True)

    return _make(out_data, (x, w, b), backward)


def split_heads(x, num_heads):
    """[B, L, d] -> [B*H, L, d/H] for batched per-head attention."""
    if x.data.ndim != 3 or x.data.shape[2] % num_heads != 0:
        raise ShapeError(f"split_heads: bad shape {x.data.shape} for {num_heads} heads")
    b, l, d = x.data.shape
    dh = d // num_heads
    out_data = np.ascontiguousarray(
        x.data.reshape(b, l, num_heads, dh).transpose(0, 2, 1, 3)
    ).reshape(b * num_heads, l, dh)

    def backward(g):
        grad = np.ascontiguousarray(
            g.reshape(b, num_heads, l, dh).transpose(0, 2, 1, 3)
        ).reshape(b, l, d)
        _accum(x, grad, fresh=True)

    return _make(out_data, (x,), backward)


def merge_heads(x, num_heads):
    """[B*H, L, d/H] -> [B, L, d], the inverse of split_heads."""
    if x.data.ndim != 3 or x.data.shape[0] % num_heads != 0:
        raise ShapeError(f"merge_heads: bad shape {x.data.shape} for {num_heads} heads")
    bh, l, dh = x.data.shape
    b = bh // num_heads
    out_data = np.ascontiguousarray(
        x.data.reshape(b, num_heads, l, dh).transpose(0, 2, 1, 3)
    ).reshape(b, l, num_heads * dh)

    def backward(g):
        grad = np.ascontiguousarray(
            g.reshape(b, l, num_heads, dh).transpose(0, 2, 1, 3)
        ).reshape(bh, l, dh)
        _accum(x, grad, fresh=True)

    return _make(out_data, (x,), backward)


def transpose(a):
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: needs a 2-D tensor, got {a.data.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, g.T)

    return _make(a.data.T, (a,), backward)


def permute(a, axes):
    axes = tuple(axes)
    inv = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            _accum(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), backward)


def reshape(a, shape):
    shape = tuple(shape)
    old = a.data.shape

    def backward(g):
        if a.requires_grad:
            _accum(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), backward)


def slice_rows(a, start, stop):
    """Contiguous slice along axis 0."""

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[start:stop] = g
            _accum(a, full, fresh=True)

    return _make(a.data[start:stop], (a,), backward)


def concat_rows(a, b):
    if a.data.shape[1:] != b.data.shape[1:]:
        raise ShapeError(f"concat_rows: trailing dims differ, {a.data.shape} vs {b.data.shape}")
    split = a.data.shape[0]

    def backward(g):
        if a.requires_grad:
            _accum(a, g[:split])
        if b.requires_grad:
            _accum(b, g[split:])

    return _make(np.concatenate([a.data, b.data], axis=0), (a, b), backward)


def take_token(a, index):
    """Select one position along axis 1 of a [B, L, d] tensor -> [B, d]."""
    if a.data.ndim != 3:
        raise ShapeError(f"take_token: needs a 3-D tensor, got {a.data.shape}")

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, index, :] = g
            _accum(a, full, fresh=True)

    return _make(a.data[:, index, :], (a,), backward)


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None):
    if axis is None:

        def backward(g):
            if a.requires_grad:
                _accum(a, np.full_like(a.data, float(g)), fresh=True)

        return _make(a.data.sum(), (a,), backward)

    def backward_axis(g):
        if a.requires_grad:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape))

    return _make(a.data.sum(axis=axis), (a,), backward_axis)


def tmean(a, axis=None):
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# fused row-wise ops (last axis), each with a handwritten exact backward


def softmax(x):
    """Row-wise softmax with max-subtraction; rows sum to 1."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            _accum(x, p * (g - (g * p).sum(axis=-1, keepdims=True)), fresh=True)

    return _make(p, (x,), backward)


def logsumexp(x):
    """Row-wise log-sum-exp over the last axis (fused, stable)."""
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out_data = (m + np.log(s)).squeeze(-1)
    p = e / s

    def backward(g):
        if x.requires_grad:
            _accum(x, p * np.expand_dims(g, -1), fresh=True)

    return _make(out_data, (x,), backward)


def log_softmax(x):
    """Fused log(softmax(x)) via log-sum-exp; never evaluates log(0)."""
    m = x.data.max(axis=-1, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = shifted - lse
    p = np.exp(out_data)

    def backward(g):
        if x.requires_grad:
            _accum(x, g - p * g.sum(axis=-1, keepdims=True), fresh=True)

    return _make(out_data, (x,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    d = x.data.shape[-1]
    if d == 0:
        raise ShapeError("layer_norm: last dimension is 0")
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma/beta shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match feature dim {d}"
        )
    if eps <= 0:
        raise NumericError("layer_norm: eps must be positive")
    from . import kernels  # deferred: kernels pulls in numba at import time

    lead = x.data.shape[:-1]
    out2, xhat2, inv = kernels.layer_norm_forward(
        x.data.reshape(-1, d), gamma.data, beta.data, eps
    )

    def backward(g):
        g2 = g.reshape(-1, d)
        if gamma.requires_grad:
            _accum(gamma, (g2 * xhat2).sum(axis=0), fresh=True)
        if beta.requires_grad:
            _accum(beta, g2.sum(axis=0), fresh=True)
        if x.requires_grad:
            dx = kernels.layer_norm_backward_x(g2, xhat2, inv, gamma.data)
            _accum(x, dx.reshape(x.data.shape), fresh=True)

    return _make(out2.reshape(lead + (d,)), (x, gamma, beta), backward)


def l2_normalize(x):
    """Scale each row (last axis) to unit Euclidean norm."""
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norms <= NORM_EPS):
        raise DegenerateInputError("l2_normalize: near-zero row norm")
    y = x.data / norms

    def backward(g):
        if x.requires_grad:
            _accum(x, (g - y * (g * y).sum(axis=-1, keepdims=True)) / norms, fresh=True)

    return _make(y, (x,), backward)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, x, h=1e-5):
    """Max relative error between the tape gradient of f at x and central differences.

    f must be a deterministic scalar-valued function of x. The analytic
    gradient is taken from a fresh tape; each coordinate is then probed with
    (f(x+h e) - f(x-h e)) / 2h.
    """
    x = Tensor(x.data, requires_grad=True) if not x.requires_grad else x
    x.zero_grad()
    with Tape() as tape:
        out = f(x)
        tape.backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.ravel()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * h)
    numeric = numeric.reshape(x.data.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom))
