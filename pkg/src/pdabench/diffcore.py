"""Dense float64 tensors with a reverse-mode tape, SGD/Nesterov and the LR schedule.

Every op builds a node that remembers its parents and a closure mapping the
upstream gradient to one gradient per parent. ``backward`` visits the nodes
reachable from a scalar loss in reverse creation order, each exactly once.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .config import TOL, ConfigError, NumericError

_ids = itertools.count()
_state = threading.local()


def _grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate ops without recording them on the tape."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_id")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _size_error(self)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, c):
        if isinstance(c, Tensor):
            raise ConfigError("division is only defined by a python scalar")
        return scale(self, 1.0 / c)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _size_error(t):
    raise ConfigError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op, out, parents, backward_fn):
    if not np.all(np.isfinite(out)):
        raise NumericError(f"op '{op}' produced non-finite values")
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(out, op=op)
    return Tensor(out, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, op=op)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigError(f"op '{op}': shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise NumericError("op 'div' received a zero denominator")
    return _make("div", ad / bd, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * ad / (bd * bd), bd.shape)))


def scale(x, c):
    x = as_tensor(x)
    c = float(c)
    return _make("scale", x.data * c, (x,), lambda g: (g * c,))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericError("op 'log' received non-positive input")
    xd = x.data
    return _make("log", np.log(xd), (x,), lambda g: (g / xd,))


def square(x):
    x = as_tensor(x)
    xd = x.data
    return _make("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


def sigmoid(x):
    x = as_tensor(x)
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ez = np.exp(xd[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def clamp(x, lo=None, hi=None):
    x = as_tensor(x)
    xd = x.data
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    inside = (xd >= lo_) & (xd <= hi_)
    return _make("clamp", np.clip(xd, lo_, hi_), (x,), lambda g: (g * inside,))


def stop_gradient(x):
    return Tensor(as_tensor(x).data.copy(), op="stop_gradient")


def grad_reverse(x, coeff):
    """Identity forward; multiplies the upstream gradient by ``-coeff``."""
    x = as_tensor(x)
    if coeff < 0:
        raise ConfigError("grad_reverse coefficient must be >= 0")
    c = float(coeff)
    return _make("grad_reverse", x.data.copy(), (x,), lambda g: (-c * g,))


# ------------------------------------------------------------------ reshaping


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigError(f"op 'matmul': incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(x):
    x = as_tensor(x)
    return _make("transpose", x.data.T.copy(), (x,), lambda g: (g.T,))


def concat_rows(xs):
    xs = [as_tensor(x) for x in xs]
    cols = {x.shape[1:] for x in xs}
    if len(cols) != 1:
        raise ConfigError(f"op 'concat_rows': trailing shapes differ {sorted(cols)}")
    bounds = np.cumsum([0] + [x.shape[0] for x in xs])
    return _make("concat_rows", np.concatenate([x.data for x in xs], axis=0), tuple(xs),
                 lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(xs))))


# ----------------------------------------------------------------- reductions


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", out, (x,), bw)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis, keepdims), 1.0 / n)


def row_l2_norm(x):
    x = as_tensor(x)
    xd = x.data
    nrm = np.sqrt((xd * xd).sum(axis=1))
    safe = np.where(nrm > 0, nrm, 1.0)
    return _make("row_l2_norm", nrm, (x,), lambda g: ((g / safe)[:, None] * xd,))


# ------------------------------------------------------------ softmax family


def _softmax_np(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax_np(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def row_softmax(x):
    x = as_tensor(x)
    p = _softmax_np(x.data)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make("row_softmax", p, (x,), bw)


def log_softmax(x):
    x = as_tensor(x)
    ls = _log_softmax_np(x.data)
    p = np.exp(ls)
    return _make("log_softmax", ls, (x,),
                 lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def softmax_cross_entropy(logits, labels, weights=None):
    """Weighted mean of ``-sum_k label_k * log softmax(logits)_k``.

    ``labels`` are one-hot or soft rows; the mean is normalized by the sum of
    the per-sample weights, so zero-weight rows are masked out entirely.
    """
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != logits.shape:
        raise ConfigError(f"softmax_cross_entropy: labels {y.shape} vs logits {logits.shape}")
    n = y.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or np.any(w < 0):
        raise ConfigError("per-sample weights must be a nonnegative n-vector")
    wsum = w.sum()
    if wsum <= 0:
        raise ConfigError("per-sample weights sum to zero")
    ls = _log_softmax_np(logits.data)
    per = -(y * ls).sum(axis=1)
    out = np.array((w * per).sum() / wsum)
    p = np.exp(ls)

    def bw(g):
        return (g * (w / wsum)[:, None] * (p * y.sum(axis=1, keepdims=True) - y),)

    return _make("softmax_cross_entropy", out, (logits,), bw)


def bce_with_logits(logits, targets, weights=None):
    """Mean over samples of ``w_i * BCE(sigmoid(logit_i), t_i)`` (divided by n, not sum w)."""
    logits = as_tensor(logits)
    s = logits.data.reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if t.shape != s.shape:
        raise ConfigError(f"bce_with_logits: targets {t.shape} vs logits {s.shape}")
    w = np.ones_like(s) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    n = s.size
    # log(1 + exp(-|s|)) + max(s, 0) - t*s
    per = np.logaddexp(0.0, s) - t * s
    out = np.array((w * per).sum() / n)
    sig = 1.0 / (1.0 + np.exp(-np.clip(s, -700, 700)))
    shape = logits.shape
    return _make("bce_with_logits", out, (logits,),
                 lambda g: ((g * w * (sig - t) / n).reshape(shape),))


# --------------------------------------------------------------- backward


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ConfigError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes, seen, stack = [], set(), [loss]
    while stack:
        n = stack.pop()
        if n._id in seen:
            continue
        seen.add(n._id)
        nodes.append(n)
        stack.extend(p for p in n._parents if p.requires_grad)
    nodes.sort(key=lambda n: n._id, reverse=True)
    grads = {loss._id: np.ones_like(loss.data)}
    for n in nodes:
        g = grads.pop(n._id, None)
        if g is None:
            continue
        if n.is_leaf:
            n.grad = g.copy() if n.grad is None else n.grad + g
            continue
        for p, pg in zip(n._parents, n._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            grads[p._id] = grads[p._id] + pg if p._id in grads else pg


def numeric_grad(fn, params, h=TOL.fd_step):
    """Central finite differences of scalar ``fn()`` w.r.t. each tensor in ``params``."""
    out = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            with no_grad():
                fp = fn().item()
            flat[k] = orig - h
            with no_grad():
                fm = fn().item()
            flat[k] = orig
            gflat[k] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def grad_rel_error(analytic, numeric):
    """Norm-wise relative error ``|a - n| / max(|a| + |n|, 1e-12)`` across all arrays."""
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12))


def gradcheck(fn, params, h=TOL.fd_step):
    """Relative error between tape gradients and central differences of ``fn``."""
    for p in params:
        p.zero_grad()
    backward(fn())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    return grad_rel_error(analytic, numeric_grad(fn, params, h))


# ------------------------------------------------------------------ optimizer


@dataclass
class OptimState:
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = True
    lr_multiplier: dict = field(default_factory=dict)
    velocity: dict = field(default_factory=dict)


def sgd_nesterov_step(params, lr, state):
    """One SGD step over ``params`` (name -> Tensor), reading gradients from ``.grad``.

    ``v <- m v + (g + wd p)``; with Nesterov ``p <- p - lr_g lr (g + wd p + m v)``,
    otherwise ``p <- p - lr_g lr v``. Parameters with no gradient get ``g = 0``.
    """
    if lr < 0:
        raise ConfigError("learning rate must be >= 0")
    m, wd = state.momentum, state.weight_decay
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if g.shape != p.data.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        mult = state.lr_multiplier.get(name, 1.0)
        if mult not in (1.0, 10.0):
            raise ConfigError(f"lr multiplier for {name} must be 1 or 10, got {mult}")
        d = g + wd * p.data
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.data.shape:
            raise ConfigError(f"velocity shape mismatch for {name}")
        v = m * v + d
        state.velocity[name] = v
        step = d + m * v if state.nesterov else v
        p.data = p.data - mult * lr * step


@dataclass(frozen=True)
class ScheduleConfig:
    mu0: float = 0.01
    alpha: float = 0.001
    beta: float = 0.75
    total_iters: int = 5000

    def __post_init__(self):
        if self.mu0 <= 0 or self.alpha < 0 or self.beta < 0:
            raise ConfigError("schedule needs mu0 > 0, alpha >= 0, beta >= 0")


def lr_at(i, cfg):
    """``mu0 * (1 + alpha * i) ** -beta``."""
    return cfg.mu0 * (1.0 + cfg.alpha * i) ** (-cfg.beta)


def grl_coeff(i, total_iters):
    """Annealed reversal strength ``2 / (1 + exp(-10 p)) - 1`` with ``p = i / total``."""
    p = i / total_iters if total_iters > 0 else 1.0
    return 2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0
