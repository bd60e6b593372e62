"""Dense real tensors with reverse-mode automatic differentiation, plus Adam.

Every operation records its inputs and a vector-Jacobian product; backward()
walks the graph once in reverse topological order and accumulates gradients
additively at fan-out. Storage is float32 for training and float64 for
finite-difference checks; ops keep whatever dtype they are fed.
"""

import contextlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "op", "_backward_done")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None
        self.op = "leaf"
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # structural ops as methods, math ops as module functions
    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_over(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_over(self, axis=axis, keepdims=keepdims)

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp, op):
    """Create an op node; drops the graph edges when no parent needs grads."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out.op = op
    return out


def backward(root):
    """Accumulate d(root)/d(leaf) into .grad for every requires_grad leaf."""
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if root._backward_done:
        raise RuntimeError("backward already ran for this root; rebuild the graph")
    root._backward_done = True
    if not root.requires_grad:
        return

    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), vjp, "add")


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(data, (a, b), vjp, "sub")


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), vjp, "mul")


def scale(a, c):
    c = float(c)
    data = a.data * c

    def vjp(g):
        return (g * c,)

    return _make(data, (a,), vjp, "scale")


def absolute(a):
    data = np.abs(a.data)
    sign = np.sign(a.data)

    def vjp(g):
        return (g * sign,)

    return _make(data, (a,), vjp, "abs")


def sqrt(a):
    data = np.sqrt(a.data)

    def vjp(g):
        return (g * (0.5 / data),)

    return _make(data, (a,), vjp, "sqrt")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_over(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(data, (a,), vjp, "sum")


def mean_over(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if a.ndim else 1
    data = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(data, (a,), vjp, "mean")


def reshape(a, shape):
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _make(data, (a,), vjp, "reshape")


def transpose(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def vjp(g):
        return (g.transpose(inverse),)

    return _make(data, (a,), vjp, "transpose")


def concat_channels(tensors, axis=1):
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(data, tuple(tensors), vjp, "concat")


def reshape_patches(x):
    """(B, C, H, W) feature map -> (B, H*W, C) token sequence."""
    b, c, h, w = x.shape
    return reshape(transpose(x, (0, 2, 3, 1)), (b, h * w, c))


def reshape_patches_back(x, hw):
    """(B, H*W, C) token sequence -> (B, C, H, W) feature map."""
    b, _, c = x.shape
    h, w = hw
    return transpose(reshape(x, (b, h, w, c)), (0, 3, 1, 2))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul needs operands with ndim >= 2")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    if ad.ndim > 2 and bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ValueError(f"matmul batch dims differ: {ad.shape} @ {bd.shape}")
    data = ad @ bd

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            a2 = ad.reshape(-1, ad.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            gb = a2.T @ g2
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(data, (a, b), vjp, "matmul")


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def relu(a):
    mask = a.data > 0
    data = np.where(mask, a.data, 0)

    def vjp(g):
        return (g * mask,)

    return _make(data, (a,), vjp, "relu")


def sigmoid(a):
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def vjp(g):
        return (g * data * (1.0 - data),)

    return _make(data, (a,), vjp, "sigmoid")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a):
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    return _make(data, (a,), vjp, "gelu")


def softmax(a):
    """Softmax over the last dimension, max-subtracted for stability."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - inner),)

    return _make(data, (a,), vjp, "softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last dimension and apply the learned affine (gamma, beta)."""
    gamma, beta = _wrap(gamma), _wrap(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError("layer_norm affine params must have shape (last_dim,)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def vjp(g):
        gbeta = g.reshape(-1, d).sum(axis=0)
        ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        ghat = g * gamma.data
        gx = inv * (
            ghat
            - ghat.mean(axis=-1, keepdims=True)
            - xhat * (ghat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return _make(data, (x, gamma, beta), vjp, "layer_norm")


# ---------------------------------------------------------------------------
# spatial ops


def conv2d(x, w, bias=None, stride=1, padding=0):
    """Cross-correlation of (B,C,H,W) with (O,C,kh,kw); optional (O,) bias."""
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError("conv2d expects 4-d input and kernel")
    b, c, h, wdt = xd.shape
    o, c2, kh, kw = wd.shape
    if c2 != c:
        raise ValueError(f"kernel channels {c2} != input channels {c}")
    s, p = int(stride), int(padding)
    if s < 1:
        raise ValueError("stride must be >= 1")
    if h + 2 * p < kh or wdt + 2 * p < kw:
        raise ValueError("kernel larger than padded input")
    if (h + 2 * p - kh) % s or (wdt + 2 * p - kw) % s:
        raise ValueError("conv2d output size is not integral for this stride/padding")
    ho = (h + 2 * p - kh) // s + 1
    wo = (wdt + 2 * p - kw) // s + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    wmat = wd.reshape(o, -1)
    out = (cols @ wmat.T).reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        if bias.shape != (o,):
            raise ValueError("bias must have shape (out_channels,)")
        out = out + bias.data.reshape(1, o, 1, 1)

    def vjp(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * ho * wo, o)
        gw = (gmat.T @ cols).reshape(o, c, kh, kw)
        gwin = (gmat @ wmat).reshape(b, ho, wo, c, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += gwin[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p : p + h, p : p + wdt] if p else gxp
        if bias is not None:
            gb = gmat.sum(axis=0)
            return gx, gw, gb
        return gx, gw

    parents = (x, w, bias) if bias is not None else (x, w)
    return _make(out, parents, vjp, "conv2d")


def avg_pool2(x):
    """2x2 average pooling with stride 2; spatial dims must be even."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    data = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def vjp(g):
        g4 = np.repeat(np.repeat(g * 0.25, 2, axis=2), 2, axis=3)
        return (g4,)

    return _make(data, (x,), vjp, "avg_pool2")


_UPSAMPLE_CACHE = {}


def _upsample_matrix(n):
    """(2n, n) bilinear interpolation weights, align-corners-false convention."""
    m = _UPSAMPLE_CACHE.get(n)
    if m is None:
        m = np.zeros((2 * n, n))
        for i in range(2 * n):
            src = (i + 0.5) / 2.0 - 0.5
            i0 = int(np.floor(src))
            frac = src - i0
            lo = min(max(i0, 0), n - 1)
            hi = min(max(i0 + 1, 0), n - 1)
            m[i, lo] += 1.0 - frac
            m[i, hi] += frac
        _UPSAMPLE_CACHE[n] = m
    return m


def bilinear_upsample2(x):
    """Double both spatial dims with bilinear interpolation (align corners off)."""
    b, c, h, w = x.shape
    mh = _upsample_matrix(h).astype(x.dtype)
    mw = _upsample_matrix(w).astype(x.dtype)
    data = np.einsum("hH,bcHW,wW->bchw", mh, x.data, mw, optimize=True)

    def vjp(g):
        return (np.einsum("hH,bchw,wW->bcHW", mh, g, mw, optimize=True),)

    return _make(data, (x,), vjp, "bilinear_upsample2")


def pad_replicate(x, p=1):
    """Replicate-pad the two spatial dims of a (B,C,H,W) tensor by p."""
    if p < 1:
        raise ValueError("pad width must be >= 1")
    b, c, h, w = x.shape
    data = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge")

    def vjp(g):
        gx = g[:, :, p : p + h, p : p + w].copy()
        gx[:, :, 0, :] += g[:, :, :p, p : p + w].sum(axis=2)
        gx[:, :, -1, :] += g[:, :, p + h :, p : p + w].sum(axis=2)
        gx[:, :, :, 0] += g[:, :, p : p + h, :p].sum(axis=3)
        gx[:, :, :, -1] += g[:, :, p : p + h, p + w :].sum(axis=3)
        gx[:, :, 0, 0] += g[:, :, :p, :p].sum(axis=(2, 3))
        gx[:, :, 0, -1] += g[:, :, :p, p + w :].sum(axis=(2, 3))
        gx[:, :, -1, 0] += g[:, :, p + h :, :p].sum(axis=(2, 3))
        gx[:, :, -1, -1] += g[:, :, p + h :, p + w :].sum(axis=(2, 3))
        return (gx,)

    return _make(data, (x,), vjp, "pad_replicate")


# ---------------------------------------------------------------------------
# optimizer


class NanGradientError(RuntimeError):
    """A parameter gradient contained NaN/inf; training must abort loudly."""


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state, lr=None):
    """One bias-corrected Adam update over {name: Tensor} parameters in place."""
    lr = state.lr if lr is None else float(lr)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NanGradientError(f"non-finite gradient for parameter {name!r}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = p.data - update.astype(p.data.dtype, copy=False)


def lr_at_epoch(base_lr, epoch, decay=0.2, every=20):
    """Step schedule: multiply by `decay` after each block of `every` epochs."""
    return base_lr * decay ** (epoch // every)
