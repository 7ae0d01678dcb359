"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``np.ndarray``. Operations on tensors are recorded
on every active :class:`GradTape` whose watched set reaches one of the
operands; ``tape.gradient(loss, sources)`` then replays the record backwards.
Outside a tape nothing is recorded, so inference pays no bookkeeping cost.
"""
from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32

_ACTIVE_TAPES: list["GradTape"] = []


class TapeError(RuntimeError):
    pass


class Tensor:
    """Dense n-d array with an optional trainable flag."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return len(self.data)

    # operator sugar; the real work lives in the functions below
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class GradTape:
    """Records operations for one backward pass.

    Use as a context manager. Parameters (``requires_grad=True``) are watched
    automatically; other tensors, such as an input image, must be passed to
    :meth:`watch`. A tape is single-use: :meth:`gradient` may be called once.
    """

    def __init__(self):
        self._nodes = []
        self._tracked = set()
        self._keep = {}
        self._used = False
        self._open = False

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        self._open = True
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        self._open = False
        return False

    def watch(self, *tensors):
        for t in tensors:
            self._track(t)

    def _track(self, t):
        self._tracked.add(id(t))
        self._keep[id(t)] = t

    def _is_tracked(self, t):
        return id(t) in self._tracked or (t.requires_grad and self._adopt(t))

    def _adopt(self, t):
        self._track(t)
        return True

    def _record(self, out, inputs, vjp):
        self._track(out)
        self._nodes.append((out, inputs, vjp))

    def gradient(self, target, sources):
        """Gradients of scalar ``target`` with respect to each of ``sources``.

        Returns a list of arrays (one per source, zeros where the source does
        not influence the target). Raises :class:`TapeError` for a source the
        tape never saw.
        """
        if self._used:
            raise TapeError("tape already consumed; record a new one")
        if self._open:
            raise TapeError("call gradient() after leaving the tape context")
        single = isinstance(sources, Tensor)
        if single:
            sources = [sources]
        if id(target) not in self._tracked:
            raise TapeError("target was not produced on this tape")
        if target.size != 1:
            raise TapeError(f"target must be scalar, got shape {target.shape}")
        for s in sources:
            if id(s) not in self._tracked:
                raise TapeError(f"{s!r} is not on the tape")
        self._used = True

        keep = {id(s) for s in sources}
        grads = {id(target): np.ones_like(target.data)}
        for out, inputs, vjp in reversed(self._nodes):
            g = grads.get(id(out))
            if g is None:
                continue
            if id(out) not in keep:
                del grads[id(out)]
            for t, gi in zip(inputs, vjp(g)):
                if gi is None or id(t) not in self._tracked:
                    continue
                if id(t) in grads:
                    grads[id(t)] = grads[id(t)] + gi
                else:
                    grads[id(t)] = gi
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(np.zeros_like(s.data) if g is None else g.astype(s.dtype, copy=False))
        self._nodes = []
        self._keep = {}
        return out[0] if single else out


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        dtype = DEFAULT_DTYPE
    return Tensor(np.asarray(x), dtype=dtype)


def _result_dtype(*arrays):
    return np.result_type(*[a.dtype for a in arrays])


def _emit(value, inputs, vjp):
    """Wrap ``value`` and record it on every tape that tracks an input."""
    out = Tensor(value)
    for tape in _ACTIVE_TAPES:
        if any([tape._is_tracked(t) for t in inputs]):
            tape._record(out, inputs, vjp)
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- elementwise -----------------------------------------------------------

def _coerce_pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def add(a, b):
    a, b = _coerce_pair(a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _coerce_pair(a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _coerce_pair(a, b)
    av, bv = a.data, b.data
    return _emit(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    a, b = _coerce_pair(a, b)
    av, bv = a.data, b.data
    return _emit(av / bv, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * av / (bv * bv), bv.shape)))


def neg(a):
    return _emit(-a.data, (a,), lambda g: (-g,))


def square(a):
    av = a.data
    return _emit(av * av, (a,), lambda g: (2 * g * av,))


def sqrt(a):
    r = np.sqrt(a.data)
    return _emit(r, (a,), lambda g: (g / (2 * r),))


def exp(a):
    r = np.exp(a.data)
    return _emit(r, (a,), lambda g: (g * r,))


def log(a):
    av = a.data
    return _emit(np.log(av), (a,), lambda g: (g / av,))


def relu(a):
    mask = a.data > 0
    return _emit(a.data * mask, (a,), lambda g: (g * mask,))


def clip(a, lo, hi):
    """Clamp into [lo, hi]; the gradient is zero where the clamp is active."""
    av = a.data
    inside = (av >= lo) & (av <= hi)
    return _emit(np.clip(av, lo, hi).astype(av.dtype, copy=False), (a,),
                 lambda g: (g * inside,))


def arctanh(a):
    av = a.data
    return _emit(np.arctanh(av), (a,), lambda g: (g / (1 - av * av),))


# --- reductions and shape ---------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape):
    orig = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a, axes=None):
    inv = None if axes is None else np.argsort(axes)
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def _unique_index(index, shape):
    """True when ``index`` addresses every element at most once."""
    if isinstance(index, (int, np.integer, slice)):
        return True
    parts = index if isinstance(index, tuple) else (index,)
    if any(isinstance(p, slice) for p in parts):
        return all(isinstance(p, (slice, int, np.integer)) for p in parts)
    arrays = [np.asarray(p) for p in parts]
    if any(a.dtype == bool for a in arrays):
        return True
    flat = np.ravel_multi_index(np.broadcast_arrays(*arrays), shape[:len(arrays)], mode="wrap")
    return np.unique(flat).size == flat.size


def take(a, index):
    shape, dtype = a.shape, a.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        if _unique_index(index, shape):
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _emit(a.data[index], (a,), vjp)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def matmul(a, b):
    a, b = _coerce_pair(a, b)
    av, bv = a.data, b.data
    return _emit(av @ bv, (a, b), lambda g: (g @ np.swapaxes(bv, -1, -2),
                                             np.swapaxes(av, -1, -2) @ g))


# --- nn primitives -----------------------------------------------------------

def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _emit(s, (a,), vjp)


def log_softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _emit(out, (a,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of ``logits`` (B, K) against int labels (B,)."""
    labels = np.asarray(labels, dtype=np.int64)
    lp = log_softmax(logits, axis=1)
    b = len(labels)
    picked = take(lp, (np.arange(b), labels))
    return neg(mean(picked))


def _im2col(x, kh, kw, stride):
    """(B, C, H, W) -> columns (B, C*kh*kw, Ho*Wo), channel-major like the weights."""
    b, c = x.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B, C, Ho, Wo, kh, kw)
    ho, wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * kh * kw, ho * wo)
    return cols, ho, wo


def _correlate(xp, wv, stride):
    """Valid cross-correlation of padded input with (O, C, kh, kw) weights."""
    o, _, kh, kw = wv.shape
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    out = np.matmul(wv.reshape(o, -1), cols).reshape(xp.shape[0], o, ho, wo)
    return out, cols


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-d cross-correlation, NCHW input, (O, C, kh, kw) weight."""
    xv, wv = x.data, weight.data
    b, c, h, w = xv.shape
    o, cw, kh, kw = wv.shape
    if c != cw:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {cw}")
    if padding:
        xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xv
    out, cols = _correlate(xp, wv, stride)
    if bias is not None:
        out += bias.data[:, None, None]
    ho, wo = out.shape[2], out.shape[3]
    hp, wp = xp.shape[2], xp.shape[3]
    need_gx = any(t._is_tracked(x) for t in _ACTIVE_TAPES)

    def vjp(g):
        g3 = g.reshape(b, o, ho * wo)
        gw = np.zeros((o, c * kh * kw), dtype=g.dtype)
        for i in range(b):
            gw += g3[i] @ cols[i].T
        gw = gw.reshape(wv.shape)
        gb = None if bias is None else g3.sum(axis=(0, 2))
        if not need_gx:
            gx = None
        elif stride == 1 and padding < min(kh, kw):
            # input grad == correlation of the padded output grad with the flipped kernel
            ph, pw = kh - 1 - padding, kw - 1 - padding
            gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
            gx, _ = _correlate(gp, wv[:, :, ::-1, ::-1].transpose(1, 0, 2, 3), 1)
        else:
            gcols = np.matmul(wv.reshape(o, -1).T, g3).reshape(b, c, kh, kw, ho, wo)
            gxp = np.zeros((b, c, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding:hp - padding, padding:wp - padding] if padding else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit(out, inputs, vjp)


def avg_pool2d(x, k):
    xv = x.data
    b, c, h, w = xv.shape
    if h % k or w % k:
        raise ValueError(f"avg_pool2d: spatial size {h}x{w} not divisible by {k}")
    out = xv.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def vjp(g):
        g = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (g.astype(xv.dtype, copy=False),)

    return _emit(out, (x,), vjp)


def linear(x, weight, bias):
    return add(matmul(x, transpose(weight)), bias)
