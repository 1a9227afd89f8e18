"""Dense tensors with tape-based reverse-mode differentiation.

Operations on tensors that require gradients append a record to the current
thread's :class:`Tape`; :func:`backward` replays the adjoints in exact reverse
recording order. Storage is float32 by default. Reductions accumulate in
float64 and the loss primitives (softmax, cross-entropy, KL divergence) are
evaluated in float64 internally before casting back to the storage dtype.

A tensor may also be created with ``dtype=np.float64``; all operations keep
the dtype of their inputs, which is what the finite-difference checks use.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from crld import kernels


class TapeError(RuntimeError):
    """Raised for misuse of the tape: stale tapes, non-scalar losses."""


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.records = []
        self.consumed = False

    def __len__(self):
        return len(self.records)

    def __enter__(self):
        _state().stack.append(self)
        return self

    def __exit__(self, *exc):
        _state().stack.pop()
        return False


class _State(threading.local):
    def __init__(self):
        self.stack = [Tape()]
        self.enabled = True
        # gradient checks: relu appends its activation pattern to relu_trace and,
        # when relu_replay is set, gates with the recorded patterns instead
        self.relu_trace = None
        self.relu_replay = None


_local = _State()


def _state():
    return _local


def current_tape() -> Tape:
    stack = _local.stack
    if stack[-1].consumed:
        stack[-1] = Tape()
    return stack[-1]


def grad_enabled() -> bool:
    return _local.enabled


@contextmanager
def trace_relu(replay=None):
    """Collect the boolean activation pattern of every relu evaluated inside.

    With ``replay`` (a list of patterns from an earlier trace) each relu gates
    its input with the next recorded pattern instead of its own sign.
    """
    prev = _local.relu_trace, _local.relu_replay
    _local.relu_trace = trace = []
    _local.relu_replay = None if replay is None else list(replay)
    try:
        yield trace
    finally:
        _local.relu_trace, _local.relu_replay = prev


@contextmanager
def no_grad():
    prev = _local.enabled
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad=False, dtype=np.float32):
        self.data = np.array(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise TapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by scalars")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, dtype=np.float32):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(data, inputs, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._tape = None
    out.requires_grad = _local.enabled and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape = current_tape()
        tape.records.append((out, inputs, backward_fn))
        out._tape = tape
    return out


def backward(loss: Tensor):
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not recorded on a tape (no input requires grad)")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward call")
    grads = {id(loss): np.ones_like(loss.data)}
    for out, inputs, fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._tape is tape:
                key = id(t)
                grads[key] = gi if key not in grads else grads[key] + gi
            elif t.grad is None:
                t.grad = np.array(gi, dtype=t.data.dtype).reshape(t.shape)
            else:
                t.grad = t.grad + gi.astype(t.data.dtype, copy=False)
    tape.consumed = True
    tape.records = []


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), back)


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def tsum(a, axis=None, keepdims=False):
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out), (a,), back)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def relu(a):
    if _local.relu_replay is not None:
        pos = _local.relu_replay.pop(0)
    else:
        pos = a.data > 0
    if _local.relu_trace is not None:
        _local.relu_trace.append(pos)
    return _result(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


def exp(a):
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    d = a.data
    return _result(np.log(d), (a,), lambda g: (g / d,))


def concat(tensors, axis=0):
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------------------
# network layers
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, stride=1) -> Tensor:
    """3x3 cross-correlation with zero padding 1; output extent ceil(H / stride)."""
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if x.data.ndim != 4 or w.data.ndim != 4 or w.shape[2:] != (3, 3):
        raise ValueError(f"conv2d expects NxCxHxW input and KxCx3x3 kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    k = w.shape[0]
    if w.shape[1] != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {w.shape[1]}")
    ho, wo = kernels.conv_out_size(h, stride), kernels.conv_out_size(wd, stride)
    cols = kernels.im2col(np.ascontiguousarray(x.data), stride)
    wmat = w.data.reshape(k, c * 9)
    out = (cols @ wmat.T).reshape(n, ho, wo, k).transpose(0, 3, 1, 2)

    def back(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, k)
        gw = (g2.T @ cols).reshape(w.shape)
        gx = kernels.col2im(np.ascontiguousarray(g2 @ wmat), n, c, h, wd, stride) if x.requires_grad else None
        return gx, gw

    return _result(np.ascontiguousarray(out), (x, w), back)


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels):
        return cls(np.zeros(channels, np.float32), np.ones(channels, np.float32))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, train: bool) -> Tensor:
    n, c, h, w = x.shape
    m = n * h * w
    xd = x.data
    dt = xd.dtype
    if train:
        if m < 2:
            raise ValueError("batchnorm in train mode needs N*H*W >= 2")
        mu = xd.mean(axis=(0, 2, 3), dtype=np.float64)
        xc = xd - mu.astype(dt)[None, :, None, None]
        var = np.mean(np.square(xc), axis=(0, 2, 3), dtype=np.float64)
        state.running_mean[...] = (1 - state.momentum) * state.running_mean + state.momentum * mu
        state.running_var[...] = (1 - state.momentum) * state.running_var + state.momentum * var * m / (m - 1)
    else:
        xc = xd - state.running_mean.astype(dt)[None, :, None, None]
        var = state.running_var.astype(np.float64)
    invstd = (1.0 / np.sqrt(var + state.eps)).astype(dt)
    xhat = xc * invstd[None, :, None, None]
    gd, bd = gamma.data, beta.data
    out = xhat * gd[None, :, None, None] + bd[None, :, None, None]

    def back(g):
        ggamma = np.sum(g * xhat, axis=(0, 2, 3), dtype=np.float64).astype(dt)
        gbeta = np.sum(g, axis=(0, 2, 3), dtype=np.float64).astype(dt)
        dxhat = g * gd[None, :, None, None]
        if train:
            s1 = np.sum(dxhat, axis=(0, 2, 3), dtype=np.float64).astype(dt)[None, :, None, None]
            s2 = np.sum(dxhat * xhat, axis=(0, 2, 3), dtype=np.float64).astype(dt)[None, :, None, None]
            gx = (invstd / m)[None, :, None, None] * (m * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * invstd[None, :, None, None]
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), back)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.mean(x.data, axis=(2, 3), dtype=np.float64).astype(x.dtype)
    return _result(out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


# ---------------------------------------------------------------------------
# probability and loss primitives
# ---------------------------------------------------------------------------


def _check_temperature(t):
    if not t > 0:
        raise ValueError(f"temperature must be positive, got {t}")


def _log_softmax64(z, t=1.0):
    # non-finite logits surface as FloatingPointError in the losses below
    with np.errstate(invalid="ignore", over="ignore"):
        z = z.astype(np.float64) / t
        z = z - z.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_t(logits: Tensor, T: float = 1.0) -> Tensor:
    """Row-wise temperature softmax."""
    _check_temperature(T)
    p = np.exp(_log_softmax64(logits.data, T))
    dt = logits.dtype

    def back(g):
        g = g.astype(np.float64)
        return ((p * (g - (g * p).sum(axis=1, keepdims=True))) / T).astype(dt),

    return _result(p.astype(dt), (logits,), back)


def log_softmax(logits: Tensor, T: float = 1.0) -> Tensor:
    _check_temperature(T)
    lp = _log_softmax64(logits.data, T)
    dt = logits.dtype

    def back(g):
        g = g.astype(np.float64)
        return ((g - np.exp(lp) * g.sum(axis=1, keepdims=True)) / T).astype(dt),

    return _result(lp.astype(dt), (logits,), back)


def _finite_or_raise(value, what):
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"{what} produced a non-finite value")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    lp = _log_softmax64(logits.data)
    rows = np.arange(b)
    value = -lp[rows, labels].mean()
    _finite_or_raise(value, "cross_entropy")
    dt = logits.dtype

    def back(g):
        d = np.exp(lp)
        d[rows, labels] -= 1.0
        return (d * (float(g) / b)).astype(dt),

    return _result(np.asarray(value, dtype=dt), (logits,), back)


def kld(student_logits: Tensor, teacher_logits, T: float = 1.0, mask=None) -> Tensor:
    """Masked, T^2-scaled KL(softmax_T(teacher) || softmax_T(student)).

    The masked per-instance sum is divided by the full batch size. The teacher
    side is a constant; only ``student_logits`` receives a gradient.
    """
    _check_temperature(T)
    s = student_logits
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if s.shape != t.shape or s.data.ndim != 2:
        raise ValueError(f"kld shape mismatch: student {s.shape}, teacher {t.shape}")
    b = s.shape[0]
    m = np.ones(b) if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1)
    if m.shape != (b,):
        raise ValueError(f"mask has {m.size} entries for a batch of {b}")
    lps = _log_softmax64(s.data, T)
    lpt = _log_softmax64(t, T)
    pt = np.exp(lpt)
    per = np.maximum((pt * (lpt - lps)).sum(axis=1), 0.0) * (T * T)
    value = (per * m).sum() / b
    _finite_or_raise(value, "kld")
    dt = s.dtype

    def back(g):
        d = (np.exp(lps) - pt) * (m[:, None] * (T * float(g) / b))
        return (d.astype(dt),)

    return _result(np.asarray(value, dtype=dt), (s,), back)


def masked_mse(pred: Tensor, target, mask=None) -> Tensor:
    """Per-instance mean squared error over the feature dimension, masked, summed, / B."""
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != tgt.shape or pred.data.ndim != 2:
        raise ValueError(f"masked_mse shape mismatch: {pred.shape} vs {tgt.shape}")
    b, d = pred.shape
    m = np.ones(b) if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1)
    diff = pred.data.astype(np.float64) - tgt
    value = ((diff * diff).mean(axis=1) * m).sum() / b
    _finite_or_raise(value, "masked_mse")
    dt = pred.dtype

    def back(g):
        return ((2.0 * float(g) / (b * d)) * diff * m[:, None]).astype(dt),

    return _result(np.asarray(value, dtype=dt), (pred,), back)
