"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Arrays are plain numpy buffers. Operations run eagerly; when a :class:`Tape`
is active and some input requires a gradient, the op is appended to the tape
together with a closure computing its vector-Jacobian product. Recording in
execution order means the tape is already topologically sorted, so backward is
a single reverse sweep.

Without an active tape nothing is recorded, which is how inference runs.
"""
from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32
LN_EPS = 1e-5


class NumericError(ArithmeticError):
    """Raised when a NaN/Inf shows up where finite values are required."""


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def is_finite(self):
        return bool(np.all(np.isfinite(self.data)))

    def check_finite(self, what="tensor"):
        if not self.is_finite():
            raise NumericError(f"non-finite values in {what}")
        return self

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


@dataclass
class _Op:
    out: Tensor
    inputs: tuple
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the block are recorded.
    """

    ops: list = field(default_factory=list)
    _token: object = field(default=None, repr=False)

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.ops)

    def backward(self, loss):
        backward(loss, self)


_ACTIVE_TAPE: contextvars.ContextVar = contextvars.ContextVar("relnov_tape", default=None)


def no_tape():
    """Context manager that suspends recording (e.g. for finite differences)."""
    return _Suspend()


class _Suspend:
    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(None)

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        return False


def backward(loss, tape):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on ``tape``.

    Intermediate gradients live only for the duration of the sweep, so calling
    this twice on the same tape adds the leaf gradients twice.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    produced = set()
    leaves = {}
    for op in reversed(tape.ops):
        produced.add(id(op.out))
        g = grads.pop(id(op.out), None)
        if g is None:
            continue
        for t, gi in zip(op.inputs, op.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            leaves[key] = t
    for key, g in grads.items():
        t = leaves.get(key)
        if t is None or key in produced:
            continue
        g = g.astype(t.data.dtype, copy=False)
        t.grad = g.copy() if t.grad is None else t.grad + g
    if id(loss) not in produced and loss.requires_grad:
        # loss is itself a leaf
        one = np.ones_like(loss.data)
        loss.grad = one if loss.grad is None else loss.grad + one


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, inputs, vjp):
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape = _ACTIVE_TAPE.get()
        if tape is not None:
            tape.ops.append(_Op(out, tuple(inputs), vjp))
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), vjp)


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a):
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sigmoid(a):
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus(a):
    """log(1 + exp(a)), stable for large |a|."""
    ad = a.data
    out = np.maximum(ad, 0) + np.log1p(np.exp(-np.abs(ad)))
    return _make(out, (a,), lambda g: (g * _sigmoid(ad),))


def maximum(a, b):
    """Elementwise max; ties send half the gradient to each side."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = np.maximum(ad, bd)

    def vjp(g):
        wa = (ad > bd) + 0.5 * (ad == bd)
        return _unbroadcast(g * wa, ad.shape), _unbroadcast(g * (1.0 - wa), bd.shape)

    return _make(out, (a, b), vjp)


def gelu(a):
    """Exact GELU: x * Phi(x) with the Gaussian CDF written via erf."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    out = (x * cdf).astype(x.dtype, copy=False)

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x * pdf),)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------- reductions / shapes


def tsum(a, axis=None, keepdims=False):
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(np.transpose(a.data, axes)), (a,),
                 lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def swap_last(a):
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def getitem(a, idx):
    shape, dtype = a.shape, a.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), vjp)


def concat(tensors, axis=-1):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def stack(tensors, axis=0):
    tensors = list(tensors)

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, vjp)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Matrix product with numpy broadcasting over leading batch dimensions."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    flat = bd.ndim == 2 and ad.ndim > 2
    if flat:
        # one large GEMM beats numpy's batched loop for a shared weight
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + bd.shape[-1:])
    else:
        out = np.matmul(ad, bd)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(ad.shape)
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                # weight shared across the batch: fold batch dims into one GEMM
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


def linear(x, weight, bias=None):
    """x @ weight + bias, weight stored as (fan_in, fan_out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def layer_norm(x, gain, bias, eps=LN_EPS):
    """Normalize over the last axis using the population variance."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: last dim {d} vs gain {gain.shape}, bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def vjp(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gain.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _make(out, (x, gain, bias), vjp)


def softmax(x, axis=-1):
    xd = x.data
    if np.isnan(xd).any():
        raise NumericError("softmax input contains NaN")
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), vjp)


def softmax_np(x, axis=-1):
    """Plain-array softmax with max subtraction, no tape involvement."""
    x = np.asarray(x)
    if np.isnan(x).any():
        raise NumericError("softmax input contains NaN")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict
    rel_tol: float

    @property
    def passed(self):
        return self.max_rel_error <= self.rel_tol


def finite_diff_check(f, params, rel_tol=1e-4, floor=1e-6):
    """Compare tape gradients of the scalar ``f()`` against central differences.

    ``params`` is a mapping name -> Tensor (or an iterable of tensors); they
    should hold float64 data. Each coordinate w is perturbed by
    h = 1e-5 * max(1, |w|). The relative error of a coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, floor).
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
        p.requires_grad = True

    with Tape() as tape:
        loss = f()
    if not loss.is_finite():
        raise NumericError("loss is non-finite at the unperturbed point")
    backward(loss, tape)

    per_param = {}
    worst = 0.0
    with no_tape():
        for name, p in params.items():
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            errs = np.zeros(flat.size)
            for k in range(flat.size):
                w = flat[k]
                h = 1e-5 * max(1.0, abs(float(w)))
                flat[k] = w + h
                fp = float(f().data)
                flat[k] = w - h
                fm = float(f().data)
                flat[k] = w
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NumericError(f"non-finite loss while perturbing {name}[{k}]")
                num = (fp - fm) / (2.0 * h)
                ana = float(analytic.reshape(-1)[k])
                errs[k] = abs(ana - num) / max(abs(ana), abs(num), floor)
            per_param[name] = float(errs.max()) if errs.size else 0.0
            worst = max(worst, per_param[name])
    return GradCheckReport(worst, per_param, rel_tol)


def parameters_finite(params: Iterable[Tensor]):
    return all(p.is_finite() for p in params)
