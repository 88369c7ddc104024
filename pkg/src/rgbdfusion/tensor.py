"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Values are numpy float64 arrays. Each operation records its parents and a
closure that maps the upstream gradient to per-parent gradients; ``backward``
replays the tape in reverse topological order and accumulates into the
``grad`` buffer of every tensor that requires gradients.
"""

from __future__ import annotations

import struct
import warnings

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "DetachedGraphWarning",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "relu",
    "gelu",
    "sigmoid",
    "softmax",
    "exp",
    "log",
    "reshape",
    "transpose",
    "concat",
    "split",
    "channel_shuffle",
    "channel_shuffle_inverse",
    "adaptive_avg_pool_global",
    "conv2d",
    "bilinear_upsample",
    "layer_norm_channels",
    "tensor_sum",
    "tensor_mean",
    "zero_grads",
    "numeric_gradient",
    "check_gradients",
    "resize_bilinear",
    "save_tensor",
    "load_tensor",
    "write_tensor_stream",
    "read_tensor_stream",
    "FormatError",
    "BadMagicError",
    "BadVersionError",
    "TruncatedFileError",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class DetachedGraphWarning(UserWarning):
    """Raised as a warning when backward() is called on a detached scalar."""


class Tensor:
    """A dense float64 array plus optional gradient buffer and tape entry."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self.name = name

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() requires a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, _as_tensor(1.0 / other))
        raise TypeError("tensor division only supports scalar divisors")

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    # -- autodiff ------------------------------------------------------------

    def backward(self):
        """Populate ``grad`` on every reachable tensor with requires_grad.

        Repeated calls accumulate. The loss must be scalar. A detached scalar
        (no recorded parents, not itself a leaf parameter) only triggers a
        ``DetachedGraphWarning``; grads of unreachable leaves stay untouched
        (semantically zero).
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.data.shape}")
        if not self._parents and not self.requires_grad:
            warnings.warn("backward() called on a tensor detached from any graph",
                          DetachedGraphWarning)
            return

        order = _toposort(self)
        # transient upstream grads, keyed by id; leaf .grad buffers accumulate
        flowing = {id(self): np.ones_like(self.data)}
        for node in order:
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._backward_fn is None:
                continue
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                acc = flowing.get(id(parent))
                if acc is None:
                    # copy: returned grads may be views into shared buffers
                    flowing[id(parent)] = np.array(pg, dtype=np.float64)
                else:
                    acc += pg


def _needs_grad(t):
    return t.requires_grad or t._parents


def _toposort(root):
    """Reverse-execution order; iterative to avoid recursion limits."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    order.reverse()
    return order


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn):
    out = Tensor(data)
    if any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum gradient g down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def zero_grads(params):
    """Clear grad buffers of an iterable of tensors or (name, tensor) pairs."""
    for p in params:
        t = p[1] if isinstance(p, tuple) else p
        t.zero_grad()


# -- elementwise ops ---------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)))


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,))


def relu(a):
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def gelu(a):
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return _node(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def sigmoid(a):
    x = a.data
    if not np.all(np.isfinite(x)):
        raise ValueError("sigmoid: non-finite input")
    # stable in both tails
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    # keep the open-interval contract even where exp underflows
    y = np.clip(y, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a):
    y = np.exp(a.data)
    return _node(y, (a,), lambda g: (g * y,))


def log(a):
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def softmax(a, axis):
    """Numerically stabilized softmax along ``axis``."""
    x = a.data
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax: non-finite input")
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _node(y, (a,), backward_fn)


# -- shape ops ---------------------------------------------------------------

def reshape(a, shape):
    shape = tuple(shape)
    old = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.data.ndim))[::-1]
    axes = tuple(axes)
    inv = np.argsort(axes)
    return _node(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward_fn)


def split(a, sections, axis=0):
    """Split into ``sections`` equal parts along ``axis``."""
    n = a.data.shape[axis]
    if n % sections:
        raise ValueError(f"split: {n} channels not divisible into {sections} parts")
    pieces = np.split(a.data, sections, axis=axis)
    outs = []
    step = n // sections
    for i, piece in enumerate(pieces):
        lo = i * step

        def backward_fn(g, lo=lo):
            full = np.zeros_like(a.data)
            sl = [slice(None)] * a.data.ndim
            sl[axis] = slice(lo, lo + step)
            full[tuple(sl)] = g
            return (full,)

        outs.append(_node(np.ascontiguousarray(piece), (a,), backward_fn))
    return outs


def _shuffle_perm(c, groups):
    if c % groups:
        raise ValueError(f"channel_shuffle: {c} channels not divisible by {groups} groups")
    # destination g + groups*i takes source i + (c//groups)*g
    return np.arange(c).reshape(groups, c // groups).T.reshape(-1)


def channel_shuffle(a, groups):
    """Interleave channel groups: out[g + groups*i] = in[i + (C/groups)*g]."""
    c = a.data.shape[0]
    perm = _shuffle_perm(c, groups)
    inv = np.argsort(perm)
    return _node(np.ascontiguousarray(a.data[perm]), (a,),
                 lambda g: (np.ascontiguousarray(g[inv]),))


def channel_shuffle_inverse(a, groups):
    """Apply the transposed (inverse) shuffle permutation."""
    c = a.data.shape[0]
    inv = np.argsort(_shuffle_perm(c, groups))
    perm = np.argsort(inv)
    return _node(np.ascontiguousarray(a.data[inv]), (a,),
                 lambda g: (np.ascontiguousarray(g[perm]),))


# -- reductions --------------------------------------------------------------

def tensor_sum(a, axis=None, keepdims=False):
    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward_fn)


def tensor_mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.data.shape[ax] for ax in axes]))

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.data.shape).copy(),)

    return _node(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward_fn)


def adaptive_avg_pool_global(a):
    """(C,H,W) -> (C,1,1) arithmetic mean per channel."""
    if a.data.ndim != 3:
        raise ValueError(f"adaptive_avg_pool_global expects (C,H,W), got {a.data.shape}")
    return tensor_mean(a, axis=(1, 2), keepdims=True)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    """2-D matrix product; 3-D inputs batch over the leading axis (broadcast)."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.ndim > 3 or bd.ndim > 3:
        raise ValueError(f"matmul: unsupported ranks {ad.ndim} and {bd.ndim}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul: inner dims differ, {ad.shape} vs {bd.shape}")
    y = ad @ bd

    def backward_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    return _node(y, (a, b), backward_fn)


# -- convolution -------------------------------------------------------------

def _im2col(xp, k, stride, oh, ow):
    # xp: (Cin, Hp, Wp) padded input; returns (oh*ow, Cin*k*k)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (Cin, oh, ow, k, k)
    return win.transpose(1, 2, 0, 3, 4).reshape(oh * ow, -1)


def conv2d(x, kernel, bias=None, stride=1, pad=0):
    """Zero-padded cross-correlation of a (Cin,H,W) map with (Cout,Cin,k,k)."""
    cin, h, w = x.data.shape
    cout, cin_k, k, k2 = kernel.data.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if cin != cin_k:
        raise ValueError(f"conv2d: input has {cin} channels, kernel expects {cin_k}")
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d: non-positive output size ({oh},{ow})")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, stride, oh, ow)            # (oh*ow, cin*k*k)
    wmat = kernel.data.reshape(cout, -1)             # (cout, cin*k*k)
    out = cols @ wmat.T                              # (oh*ow, cout)
    if bias is not None:
        out = out + bias.data.reshape(1, cout)
    out = np.ascontiguousarray(out.T.reshape(cout, oh, ow))

    def backward_fn(g):
        gmat = g.reshape(cout, -1).T                 # (oh*ow, cout)
        gw = (gmat.T @ cols).reshape(kernel.data.shape)
        gcols = gmat @ wmat                          # (oh*ow, cin*k*k)
        gwin = gcols.reshape(oh, ow, cin, k, k).transpose(2, 0, 1, 3, 4)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += gwin[:, :, :, i, j]
        gx = gxp[:, pad:pad + h, pad:pad + w] if pad else gxp
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(gmat.sum(axis=0))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(out, parents, backward_fn)


# -- bilinear interpolation --------------------------------------------------

def _bilinear_weights(n_in, n_out):
    # align_corners=False sampling grid
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.intp)
    lo = np.minimum(lo, n_in - 2) if n_in > 1 else np.zeros_like(lo)
    frac = src - lo
    return lo, frac


def bilinear_upsample(x, out_h, out_w):
    """Resize (C,H,W) to (C,out_h,out_w), align_corners=False."""
    if out_h < 1 or out_w < 1:
        raise ValueError("bilinear_upsample: output size must be >= 1")
    c, h, w = x.data.shape
    y0, fy = _bilinear_weights(h, out_h)
    x0, fx = _bilinear_weights(w, out_w)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = fy[:, None]
    wx = fx[None, :]
    d = x.data
    out = ((1 - wy) * (1 - wx) * d[:, y0[:, None], x0[None, :]]
           + (1 - wy) * wx * d[:, y0[:, None], x1[None, :]]
           + wy * (1 - wx) * d[:, y1[:, None], x0[None, :]]
           + wy * wx * d[:, y1[:, None], x1[None, :]])

    def backward_fn(g):
        gx = np.zeros_like(d)
        yy0 = np.broadcast_to(y0[:, None], (out_h, out_w))
        yy1 = np.broadcast_to(y1[:, None], (out_h, out_w))
        xx0 = np.broadcast_to(x0[None, :], (out_h, out_w))
        xx1 = np.broadcast_to(x1[None, :], (out_h, out_w))
        for ci in range(c):
            gc = g[ci]
            np.add.at(gx[ci], (yy0, xx0), (1 - wy) * (1 - wx) * gc)
            np.add.at(gx[ci], (yy0, xx1), (1 - wy) * wx * gc)
            np.add.at(gx[ci], (yy1, xx0), wy * (1 - wx) * gc)
            np.add.at(gx[ci], (yy1, xx1), wy * wx * gc)
        return (gx,)

    return _node(np.ascontiguousarray(out), (x,), backward_fn)


def resize_bilinear(arr, out_h, out_w):
    """Gradient-free bilinear resize of a plain (C,H,W) numpy array."""
    t = Tensor(arr)
    return bilinear_upsample(t, out_h, out_w).data


# -- normalization -----------------------------------------------------------

def layer_norm_channels(x, gamma, beta, eps=1e-5):
    """Normalize over the channel axis of (C,H,W), affine per channel."""
    d = x.data
    c = d.shape[0]
    mu = d.mean(axis=0, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gam = gamma.data.reshape(c, 1, 1)
    out = xhat * gam + beta.data.reshape(c, 1, 1)

    def backward_fn(g):
        gg = g * gam
        gxhat_mean = gg.mean(axis=0, keepdims=True)
        dot = (gg * xhat).mean(axis=0, keepdims=True)
        gx = inv * (gg - gxhat_mean - xhat * dot)
        ggamma = (g * xhat).sum(axis=(1, 2))
        gbeta = g.sum(axis=(1, 2))
        return (gx, ggamma, gbeta)

    return _node(out, (x, gamma, beta), backward_fn)


# -- gradient checking -------------------------------------------------------

def numeric_gradient(f, tensor, eps=1e-5, entries=None):
    """Central finite differences of scalar-valued ``f()`` w.r.t. ``tensor``.

    ``entries`` restricts the check to a subset of flat indices.
    """
    flat = tensor.data.reshape(-1)
    idx = range(flat.size) if entries is None else entries
    grads = {}
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        hi = f().item()
        flat[i] = orig - eps
        lo = f().item()
        flat[i] = orig
        grads[i] = (hi - lo) / (2 * eps)
    return grads


def check_gradients(f, params, eps=1e-5, rtol=1e-4, max_entries=None, rng=None):
    """Compare analytic and finite-difference grads of scalar ``f()``.

    ``params`` is an iterable of tensors or (name, tensor) pairs. Returns the
    worst relative error; raises AssertionError past ``rtol``.
    """
    named = [(p if isinstance(p, tuple) else (f"param{i}", p)) for i, p in enumerate(params)]
    zero_grads(t for _, t in named)
    loss = f()
    loss.backward()
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for name, t in named:
        assert t.grad is not None, f"no gradient recorded for {name}"
        n = t.data.size
        if max_entries is not None and n > max_entries:
            entries = sorted(rng.choice(n, size=max_entries, replace=False).tolist())
        else:
            entries = range(n)
        numeric = numeric_gradient(f, t, eps=eps, entries=entries)
        analytic = t.grad.reshape(-1)
        for i, fd in numeric.items():
            a = analytic[i]
            err = abs(a - fd) / max(abs(a), abs(fd), 1.0)
            worst = max(worst, err)
            assert err < rtol, (
                f"gradient mismatch for {name}[{i}]: analytic={a:.8g} fd={fd:.8g} rel={err:.3g}")
    return worst


# -- binary tensor format ----------------------------------------------------

TENSOR_MAGIC = b"ATSR"
TENSOR_VERSION = 1


class FormatError(ValueError):
    """Malformed binary tensor or sample file."""


class BadMagicError(FormatError):
    pass


class BadVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


def write_tensor_stream(fh, arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<BB", TENSOR_VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype("<f8").tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"truncated while reading {what}")
    return buf


def read_tensor_stream(fh):
    magic = _read_exact(fh, 4, "magic")
    if magic != TENSOR_MAGIC:
        raise BadMagicError(f"expected {TENSOR_MAGIC!r}, got {magic!r}")
    version, rank = struct.unpack("<BB", _read_exact(fh, 2, "header"))
    if version != TENSOR_VERSION:
        raise BadVersionError(f"unsupported tensor format version {version}")
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
    count = int(np.prod(dims)) if rank else 1
    payload = _read_exact(fh, 8 * count, "payload")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).copy()


def save_tensor(path, arr):
    with open(path, "wb") as fh:
        write_tensor_stream(fh, arr)


def load_tensor(path):
    with open(path, "rb") as fh:
        return read_tensor_stream(fh)
