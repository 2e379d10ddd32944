"""Differentiable ops on Tensors.

Every op computes its result eagerly with numpy and registers a backward
closure via tensor.record(). Broadcasting follows numpy; gradients are
summed back down to each input's shape. Mixing float32 and float64 tensors
in one op is an error; python scalars adopt the tensor operand's dtype.
"""

import numpy as np

from .tensor import Tensor, record


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.data.dtype != b.data.dtype:
            raise TypeError(f"mixed dtypes {a.data.dtype} vs {b.data.dtype}")
        return a, b
    if isinstance(a, Tensor):
        return a, _wrap(b, a.data.dtype)
    return _wrap(a, b.data.dtype), b


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    a, b = _pair(a, b)
    def bw(g, needs):
        return (_unbroadcast(g, a.data.shape) if needs[0] else None,
                _unbroadcast(g, b.data.shape) if needs[1] else None)
    return record(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _pair(a, b)
    def bw(g, needs):
        return (_unbroadcast(g, a.data.shape) if needs[0] else None,
                _unbroadcast(-g, b.data.shape) if needs[1] else None)
    return record(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _pair(a, b)
    def bw(g, needs):
        return (_unbroadcast(g * b.data, a.data.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.data.shape) if needs[1] else None)
    return record(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _pair(a, b)
    def bw(g, needs):
        ga = _unbroadcast(g / b.data, a.data.shape) if needs[0] else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape) if needs[1] else None
        return ga, gb
    return record(a.data / b.data, (a, b), bw)


def neg(x):
    def bw(g, needs):
        return (-g,)
    return record(-x.data, (x,), bw)


def power(x, p):
    p = float(p)
    def bw(g, needs):
        return (g * p * x.data ** (p - 1.0),)
    return record(x.data ** p, (x,), bw)


# --------------------------------------------------------------- elementwise

def exp(x):
    out = np.exp(x.data)
    def bw(g, needs):
        return (g * out,)
    return record(out, (x,), bw)


def log(x):
    def bw(g, needs):
        return (g / x.data,)
    return record(np.log(x.data), (x,), bw)


def sqrt(x):
    out = np.sqrt(x.data)
    def bw(g, needs):
        return (g / (2.0 * out),)
    return record(out, (x,), bw)


def absolute(x):
    def bw(g, needs):
        return (g * np.sign(x.data),)
    return record(np.abs(x.data), (x,), bw)


def tanh(x):
    out = np.tanh(x.data)
    def bw(g, needs):
        return (g * (1.0 - out * out),)
    return record(out, (x,), bw)


def _sigmoid(v):
    # stable both tails
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x):
    out = _sigmoid(x.data)
    def bw(g, needs):
        return (g * out * (1.0 - out),)
    return record(out, (x,), bw)


def silu(x):
    s = _sigmoid(x.data)
    def bw(g, needs):
        return (g * s * (1.0 + x.data * (1.0 - s)),)
    return record(x.data * s, (x,), bw)


def softplus(x):
    out = np.logaddexp(np.zeros((), dtype=x.data.dtype), x.data)
    def bw(g, needs):
        return (g * _sigmoid(x.data),)
    return record(out, (x,), bw)


def clamp(x, lo=None, hi=None):
    out = np.clip(x.data, lo, hi)
    def bw(g, needs):
        mask = np.ones_like(x.data, dtype=bool)
        if lo is not None:
            mask &= x.data >= lo
        if hi is not None:
            mask &= x.data <= hi
        return (g * mask,)
    return record(out, (x,), bw)


def relu(x):
    return clamp(x, lo=0.0)


def gelu(x):
    # tanh-form gaussian error linear unit, composed from primitives
    c = 0.7978845608028654  # sqrt(2/pi)
    inner = mul(add(x, mul(mul(mul(x, x), x), 0.044715)), c)
    return mul(mul(x, add(tanh(inner), 1.0)), 0.5)


def masked_fill(x, mask, value):
    """Replace entries where `mask` (bool ndarray) is True by scalar `value`."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, np.asarray(value, dtype=x.data.dtype), x.data)
    def bw(g, needs):
        return (_unbroadcast(g * ~mask, x.data.shape),)
    return record(out, (x,), bw)


# ---------------------------------------------------------------- reductions

def tsum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)
    def bw(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape),)
    return record(out, (x,), bw)


def tmean(x, axis=None, keepdims=False):
    out = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.data.size / out.size
    def bw(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.data.shape),)
    return record(out, (x,), bw)


def cumsum(x, axis):
    def bw(g, needs):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)
    return record(np.cumsum(x.data, axis=axis), (x,), bw)


# ---------------------------------------------------------------- shape ops

def reshape(x, shape):
    def bw(g, needs):
        return (g.reshape(x.data.shape),)
    return record(x.data.reshape(shape), (x,), bw)


def transpose(x, axes):
    inv = tuple(np.argsort(axes))
    def bw(g, needs):
        return (g.transpose(inv),)
    return record(x.data.transpose(axes), (x,), bw)


def flip(x, axis):
    def bw(g, needs):
        return (np.flip(g, axis),)
    return record(np.flip(x.data, axis), (x,), bw)


def broadcast_to(x, shape):
    def bw(g, needs):
        return (_unbroadcast(g, x.data.shape),)
    return record(np.broadcast_to(x.data, shape), (x,), bw)


def cast(x, dtype):
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise TypeError(f"cast target must be float32/float64, got {dtype}")
    src = x.data.dtype
    def bw(g, needs):
        return (g.astype(src),)
    return record(x.data.astype(dtype), (x,), bw)


def concat(parts, axis=0):
    parts = list(parts)
    dt = parts[0].data.dtype
    if any(p.data.dtype != dt for p in parts):
        raise TypeError("mixed dtypes in concat")
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    def bw(g, needs):
        pieces = np.split(g, splits, axis=axis)
        return tuple(p if need else None for p, need in zip(pieces, needs))
    return record(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw)


def stack(parts, axis=0):
    return concat([reshape(p, p.data.shape[:axis] + (1,) + p.data.shape[axis:]) for p in parts], axis=axis)


def getitem(x, key):
    out = x.data[key]
    def bw(g, needs):
        gx = np.zeros_like(x.data)
        gx[key] += g  # basic slicing never repeats elements
        return (gx,)
    return record(out, (x,), bw)


def gather(x, idx, axis=0):
    """Row gather along axis 0; duplicate indices scatter-add in backward."""
    if axis != 0:
        raise ValueError("gather supports axis=0 only")
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise TypeError("gather indices must be integers")
    unique = (idx.ndim == 1 and (idx.size == 0 or (
        idx.min() >= 0
        and np.bincount(idx, minlength=x.data.shape[0]).max() <= 1)))
    def bw(g, needs):
        gx = np.zeros_like(x.data)
        if unique:
            gx[idx] = g  # no duplicates: plain scatter, no accumulation needed
        else:
            np.add.at(gx, idx, g)
        return (gx,)
    return record(x.data[idx], (x,), bw)


# ------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = _pair(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must be at least 2-d")
    def bw(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        if needs[1]:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb
    return record(a.data @ b.data, (a, b), bw)


# ------------------------------------------------------------- fused NN ops

def softmax_lastdim(x):
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=-1, keepdims=True)
    def bw(g, needs):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    return record(y, (x,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last dim to zero mean / unit variance, then scale+shift."""
    if gain.data.shape != x.data.shape[-1:] or bias.data.shape != x.data.shape[-1:]:
        raise ValueError("gain/bias must match the last dim")
    n = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = xc * ivar
    out = xhat * gain.data + bias.data
    def bw(g, needs):
        red = tuple(range(g.ndim - 1))
        dxhat = g * gain.data
        gx = None
        if needs[0]:
            dvar = (dxhat * xc).sum(axis=-1, keepdims=True) * (-0.5) * ivar ** 3
            dmu = -(dxhat * ivar).sum(axis=-1, keepdims=True) + dvar * (-2.0 / n) * xc.sum(axis=-1, keepdims=True)
            gx = dxhat * ivar + dvar * (2.0 / n) * xc + dmu / n
        ggain = (g * xhat).sum(axis=red) if needs[1] else None
        gbias = g.sum(axis=red) if needs[2] else None
        return gx, ggain, gbias
    return record(out, (x, gain, bias), bw)


def conv2x2s2(x, w):
    """2x2 stride-2 dense convolution over disjoint windows.

    x: (n, h, w, c) with even h, w. w: (2, 2, c, c'). Output (n, h/2, w/2, c').
    """
    n, h, wd, c = x.data.shape
    if h % 2 or wd % 2:
        raise ValueError(f"conv2x2s2 needs even spatial dims, got {h}x{wd}")
    if w.data.ndim != 4 or w.data.shape[:3] != (2, 2, c):
        raise ValueError(f"weight shape {w.data.shape} does not match input channels {c}")
    xw = x.data.reshape(n, h // 2, 2, wd // 2, 2, c)
    out = np.einsum("nhiwjc,ijck->nhwk", xw, w.data, optimize=True)
    def bw(g, needs):
        gx = gw = None
        if needs[0]:
            gx = np.einsum("nhwk,ijck->nhiwjc", g, w.data, optimize=True).reshape(n, h, wd, c)
        if needs[1]:
            gw = np.einsum("nhiwjc,nhwk->ijck", xw, g, optimize=True)
        return gx, gw
    return record(out, (x, w), bw)


# --------------------------------------------------- Tensor operator plumbing

def _rsub(x, other):
    return sub(_wrap(other, x.data.dtype), x)


def _rdiv(x, other):
    return div(_wrap(other, x.data.dtype), x)


Tensor.__add__ = add
Tensor.__radd__ = add
Tensor.__sub__ = sub
Tensor.__rsub__ = _rsub
Tensor.__mul__ = mul
Tensor.__rmul__ = mul
Tensor.__truediv__ = div
Tensor.__rtruediv__ = _rdiv
Tensor.__neg__ = neg
Tensor.__pow__ = power
Tensor.__matmul__ = matmul
Tensor.__getitem__ = getitem
Tensor.reshape = reshape
Tensor.transpose = transpose
Tensor.sum = tsum
Tensor.mean = tmean
