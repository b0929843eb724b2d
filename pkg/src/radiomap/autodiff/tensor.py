"""Tape-based reverse-mode autodiff over numpy arrays.

Operations record themselves on the innermost active :class:`Tape` whenever an
input requires gradients. Outside a tape nothing is recorded, which is how
inference runs. Arithmetic is float32 by default; wrap gradient checks in
``with precision(np.float64):``.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import expit

_state = {"dtype": np.float32}
_tapes: list["Tape"] = []


class ShapeError(ValueError):
    pass


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, copy: bool = False):
        arr = np.array(data, dtype=_state["dtype"], copy=True) if copy else \
            np.asarray(data, dtype=_state["dtype"])
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numel(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _new(data) -> Tensor:
    # skip dtype coercion for arrays produced by ops
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = False
    t.name = None
    return t


class Tape:
    """Ordered record of operations; ``backward`` replays it in exact reverse."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, object]] = []

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def record(self, out: Tensor, parents: tuple, backward_fn) -> None:
        self.nodes.append((out, parents, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ValueError("loss does not depend on any tensor requiring gradients")
        loss.grad = np.ones_like(loss.data)
        for out, parents, fn in reversed(self.nodes):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for p, g in zip(parents, grads):
                if g is None or not p.requires_grad:
                    continue
                assert g.shape == p.data.shape, (g.shape, p.data.shape)
                p.grad = g if p.grad is None else p.grad + g


def _record(data, parents: tuple, backward_fn) -> Tensor:
    out = _new(data)
    if _tapes and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _tapes[-1].record(out, parents, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Backpropagate through the innermost active tape."""
    if not _tapes:
        raise RuntimeError("backward called outside a Tape context")
    _tapes[-1].backward(loss)


# ---------------------------------------------------------------------------
# elementwise and shape ops

def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, factor: float) -> Tensor:
    f = a.data.dtype.type(factor)
    return _record(a.data * f, (a,), lambda g: (g * f,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb
    return _record(ad @ bd, (a, b), fn)


def concat_channels(tensors) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[1] for t in tensors]
    for t in tensors[1:]:
        if t.shape[0] != tensors[0].shape[0] or t.shape[2:] != tensors[0].shape[2:]:
            raise ShapeError("concat needs matching batch and spatial dims")
    cuts = np.cumsum(sizes)[:-1]
    return _record(np.concatenate([t.data for t in tensors], axis=1), tensors,
                   lambda g: tuple(np.split(g, cuts, axis=1)))


def pad2d(a: Tensor, p: int) -> Tensor:
    """Zero-pad the last two axes by ``p`` on every side."""
    if p == 0:
        return a
    width = [(0, 0)] * (a.ndim - 2) + [(p, p), (p, p)]
    return _record(np.pad(a.data, width), (a,), lambda g: (g[..., p:-p, p:-p],))


# ---------------------------------------------------------------------------
# activations

def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)
    return _record(y, (a,), lambda g: (g * y * (1 - y),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.data
    dt = x.dtype.type
    x2 = x * x
    th = np.tanh(dt(_GELU_C) * x * (1 + dt(0.044715) * x2))
    y = dt(0.5) * x * (1 + th)

    def fn(g):
        inner_d = dt(_GELU_C) * (1 + dt(3 * 0.044715) * x2)
        return (g * (dt(0.5) * (1 + th) + dt(0.5) * x * (1 - th * th) * inner_d),)
    return _record(y, (a,), fn)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _record(y, (a,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _record(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# convolution family (NCHW, cross-correlation)

def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    view = as_strided(xp, shape=(n, ho, wo, c, k, k),
                      strides=(s0, s2 * stride, s3 * stride, s1, s2, s3), writeable=False)
    return view.reshape(n * ho * wo, c * k * k)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int | str = "same") -> Tensor:
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects x[N,C,H,W] and weight[Cout,Cin,k,k]")
    n, c, h, w = x.shape
    cout, cin, k, k2 = weight.shape
    if cin != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {cin}")
    if k != k2 or k % 2 == 0:
        raise ShapeError("conv2d needs square odd kernels")
    p = k // 2 if padding == "same" else int(padding)
    ho = (h + 2 * p - k) // stride + 1
    wo = (w + 2 * p - k) // stride + 1
    wm = weight.data.reshape(cout, cin * k * k)
    if k == 1 and p == 0:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        cols = xs.transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
        cols = _im2col(xp, k, stride, ho, wo)
    out = cols @ wm.T
    if bias is not None:
        out += bias.data
    y = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def fn(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gm.T @ cols).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            if k == 1 and p == 0:
                gcols = gm @ wm
                gx_s = gcols.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
                if stride > 1:
                    gx = np.zeros(x.shape, dtype=g.dtype)
                    gx[:, :, ::stride, ::stride] = gx_s
                else:
                    gx = np.ascontiguousarray(gx_s)
            elif stride == 1 and ho == h and wo == w:
                # input gradient of a 'same' conv is a conv with the flipped, transposed kernel
                gp = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p)))
                wt = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, cout * k * k)
                gx = (_im2col(np.ascontiguousarray(gp), k, 1, h, w) @ wt.T)
                gx = np.ascontiguousarray(gx.reshape(n, h, w, c).transpose(0, 3, 1, 2))
            else:
                gcols = (gm @ wm).reshape(n, ho, wo, c, k, k)
                gxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                            gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)
    return _record(np.ascontiguousarray(y), parents, fn)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 'same' cross-correlation with weight[C, 1, k, k], stride 1."""
    n, c, h, w = x.shape
    if weight.shape[0] != c or weight.shape[1] != 1:
        raise ShapeError(f"depthwise weight {weight.shape} does not fit {c} channels")
    k = weight.shape[2]
    if k % 2 == 0 or weight.shape[3] != k:
        raise ShapeError("depthwise conv needs square odd kernels")
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    wd = weight.data[:, 0]
    out = np.zeros((n, c, h, w), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i:i + h, j:j + w] * wd[:, i, j][None, :, None, None]
    if bias is not None:
        out += bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def fn(g):
        gw = np.empty_like(weight.data)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(k):
            for j in range(k):
                gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[:, :, i:i + h, j:j + w])
                if gxp is not None:
                    gxp[:, :, i:i + h, j:j + w] += g * wd[:, i, j][None, :, None, None]
        gx = None if gxp is None else (gxp[:, :, p:p + h, p:p + w] if p else gxp)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))
    return _record(out, parents, fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x[..., in] @ weight[out, in].T + bias``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight in-features {weight.shape[1]}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        gx = g @ wd
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)
    return _record(out, parents, fn)


def group_norm(x: Tensor, groups: int, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"{c} channels cannot split into {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = (xc * inv).reshape(n, c, h, w)
    gamma = weight.data[None, :, None, None]
    y = xhat * gamma + bias.data[None, :, None, None]

    def fn(g):
        gb = g.sum(axis=(0, 2, 3))
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            dxh = (g * gamma).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            gx = inv * (dxh - dxh.mean(axis=2, keepdims=True)
                        - xh * (dxh * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(n, c, h, w)
        return gx, gg, gb
    return _record(y, (x, weight, bias), fn)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    return _record(y, (x,), lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),))


def avg_pool(x: Tensor, k: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool({k}) needs spatial dims divisible by {k}, got {h}x{w}")
    y = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
    inv = x.data.dtype.type(1.0 / (k * k))
    return _record(y, (x,), lambda g: (np.repeat(np.repeat(g * inv, k, axis=2), k, axis=3),))


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over H, W: [N, C, H, W] -> [N, C]."""
    n, c, h, w = x.shape
    inv = x.data.dtype.type(1.0 / (h * w))
    return _record(x.data.mean(axis=(2, 3)), (x,),
                   lambda g: (np.broadcast_to((g * inv)[:, :, None, None], (n, c, h, w)).copy(),))


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """``x[N, C, H, W] * s[N, C]`` broadcast over space."""
    return mul(x, reshape(s, s.shape + (1, 1)))


# ---------------------------------------------------------------------------
# loss

def mse_loss(pred: Tensor, target, mask=None) -> Tensor:
    """Mean of squared error over unmasked elements."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.data.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"mse_loss: pred {pred.shape} vs target {t.shape}")
    diff = pred.data - t
    if mask is None:
        count = diff.size
        m = None
    else:
        m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=pred.data.dtype)
        count = float(m.sum())
        if count == 0:
            raise ValueError("mse_loss: every element is masked out")
        diff = diff * m
    dt = pred.data.dtype.type
    loss = np.asarray((diff * diff).sum() / dt(count), dtype=pred.data.dtype)
    return _record(loss, (pred,), lambda g: (g * dt(2.0 / count) * diff,))
