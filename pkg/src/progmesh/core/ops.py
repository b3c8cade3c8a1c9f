"""Differentiable operations on :class:`Node` values.

All arrays are float64. Convolutions accept an optional leading batch axis
(``[C, *S]`` or ``[B, C, *S]``); everything downstream of the networks is
batched that way.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels, trace
from .autodiff import Node, const, make


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _node(x):
    return x if isinstance(x, Node) else const(x)


def add(a, b):
    a, b = _node(a), _node(b)
    sa, sb = a.value.shape, b.value.shape
    return make(a.value + b.value, (a, b), "add",
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _node(a), _node(b)
    sa, sb = a.value.shape, b.value.shape
    return make(a.value - b.value, (a, b), "sub",
                lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _node(a), _node(b)
    av, bv = a.value, b.value
    return make(av * bv, (a, b), "mul",
                lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def matmul(a, b):
    a, b = _node(a), _node(b)
    av, bv = a.value, b.value

    def bw(g):
        ga = g @ np.swapaxes(bv, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(av, -1, -2) @ g if b.requires_grad else None
        if ga is not None:
            ga = _unbroadcast(ga, av.shape)
        if gb is not None:
            gb = _unbroadcast(gb, bv.shape)
        return ga, gb
    return make(av @ bv, (a, b), "matmul", bw)


def spmm(Q, x):
    """Constant sparse (or dense) matrix times node: ``Q @ x``."""
    x = _node(x)
    QT = Q.T
    return make(np.asarray(Q @ x.value), (x,), "spmm", lambda g: (np.asarray(QT @ g),))


def sum(x, axis=None, keepdims=False):
    x = _node(x)
    shape = x.value.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return make(x.value.sum(axis=axis, keepdims=keepdims), (x,), "sum", bw)


def mean(x, axis=None, keepdims=False):
    x = _node(x)
    n = x.value.size if axis is None else np.prod([x.value.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    x = _node(x)
    old = x.value.shape
    return make(x.value.reshape(shape), (x,), "reshape", lambda g: (g.reshape(old),))


def transpose(x, axes):
    x = _node(x)
    inv = np.argsort(axes)
    return make(np.transpose(x.value, axes), (x,), "transpose",
                lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def concat(xs, axis=0):
    xs = [_node(x) for x in xs]
    sizes = [x.value.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return make(np.concatenate([x.value for x in xs], axis=axis), xs, "concat",
                lambda g: tuple(np.split(g, splits, axis=axis)))


def take_rows(x, idx):
    """Gather ``x[idx]`` along axis 0; duplicate indices accumulate."""
    x = _node(x)
    idx = np.asarray(idx, dtype=np.int64)
    n = x.value.shape[0]

    def bw(g):
        flat = g.reshape(idx.size, -1)
        out = np.zeros((n, flat.shape[1]))
        for j in range(flat.shape[1]):
            out[:, j] = np.bincount(idx.ravel(), weights=flat[:, j], minlength=n)
        return (out.reshape(x.value.shape),)
    return make(x.value[idx], (x,), "take_rows", bw)


def leaky_relu(x, slope=0.01):
    x = _node(x)
    pos = x.value > 0
    trace.record("relu", np.packbits(pos))
    return make(np.where(pos, x.value, slope * x.value), (x,), "leaky_relu",
                lambda g: (np.where(pos, g, slope * g),))


def relu(x):
    return leaky_relu(x, 0.0)


def squared_distance_mean(a, b):
    """Mean over rows of the squared Euclidean row distance."""
    a, b = _node(a), _node(b)
    if a.value.shape != b.value.shape:
        raise ValueError(f"shape mismatch: {a.value.shape} vs {b.value.shape}")
    d = a.value - b.value
    n = d.shape[0]
    return make(np.array((d * d).sum() / n), (a, b), "sqdist_mean",
                lambda g: (2.0 * g * d / n, -2.0 * g * d / n))


# ---------------------------------------------------------------- convolution

def _conv_geometry(x, w, stride, padding):
    nsp = w.ndim - 2
    batched = x.ndim == nsp + 2
    if not batched and x.ndim != nsp + 1:
        raise ValueError(f"conv{nsp}d: input shape {x.shape} does not fit kernel shape {w.shape}")
    if x.shape[-nsp - 1] != w.shape[1]:
        raise ValueError(
            f"conv{nsp}d: input shape {x.shape} has {x.shape[-nsp - 1]} channels, "
            f"kernel shape {w.shape} expects {w.shape[1]}")
    return nsp, batched


def convnd(x, w, b, stride=1, padding=0):
    x, w, b = _node(x), _node(w), _node(b)
    nsp, batched = _conv_geometry(x.value, w.value, stride, padding)
    xv = x.value if batched else x.value[None]
    B, Ci = xv.shape[:2]
    Co = w.value.shape[0]
    ks = w.value.shape[2:]
    sp_axes = tuple(range(2, 2 + nsp))

    if all(k == 1 for k in ks) and stride == 1 and padding == 0:
        # pointwise: plain channel matmul
        W2 = w.value.reshape(Co, Ci)
        flat = xv.reshape(B, Ci, -1)
        out = np.matmul(W2, flat) + b.value[:, None]
        out = out.reshape((B, Co) + xv.shape[2:])

        def bw1(g):
            g = g if batched else g[None]
            gf = g.reshape(B, Co, -1)
            gx = np.matmul(W2.T, gf).reshape(xv.shape) if x.requires_grad else None
            gw = np.tensordot(gf, flat, axes=([0, 2], [0, 2])).reshape(w.value.shape)
            gb = gf.sum(axis=2).sum(axis=0)
            if gx is not None and not batched:
                gx = gx[0]
            return gx, gw, gb
        return make(out if batched else out[0], (x, w, b), f"conv{nsp}d", bw1)

    pad = [(0, 0), (0, 0)] + [(padding, padding)] * nsp
    xp = np.pad(xv, pad) if padding else xv
    win = sliding_window_view(xp, ks, axis=sp_axes)
    sl = (slice(None), slice(None)) + (slice(None, None, stride),) * nsp
    win = win[sl]
    osz = win.shape[2:2 + nsp]
    # [B, *O, Ci, *K]
    perm = (0,) + tuple(range(2, 2 + nsp)) + (1,) + tuple(range(2 + nsp, 2 + 2 * nsp))
    col = win.transpose(perm).reshape(B * int(np.prod(osz)), -1)
    W2 = w.value.reshape(Co, -1)
    out = col @ W2.T + b.value
    out = out.reshape((B,) + osz + (Co,))
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1))

    def bw(g):
        g = g if batched else g[None]
        g2 = np.moveaxis(g, 1, -1).reshape(-1, Co)
        gw = (g2.T @ col).reshape(w.value.shape)
        gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            dcol = (g2 @ W2).reshape((B,) + osz + (Ci,) + ks)
            if nsp == 2:
                dcol = dcol.reshape((B, 1) + osz + (Ci, 1) + ks)
                gxp = kernels.col2im(dcol, (B, Ci, 1) + xp.shape[2:], stride)[:, :, 0]
            else:
                gxp = kernels.col2im(dcol, xp.shape, stride)
            if padding:
                crop = (slice(None), slice(None)) + (slice(padding, -padding),) * nsp
                gxp = gxp[crop]
            gx = np.ascontiguousarray(gxp if batched else gxp[0])
        return gx, gw, gb
    return make(out if batched else out[0], (x, w, b), f"conv{nsp}d", bw)


def conv2d(x, w, b, stride=1, padding=0):
    if np.ndim(_node(w).value) != 4:
        raise ValueError(f"conv2d expects a rank-4 kernel, got shape {_node(w).value.shape}")
    return convnd(x, w, b, stride, padding)


def conv3d(x, w, b, stride=1, padding=0):
    if np.ndim(_node(w).value) != 5:
        raise ValueError(f"conv3d expects a rank-5 kernel, got shape {_node(w).value.shape}")
    return convnd(x, w, b, stride, padding)


def upsample_nearest(x, nsp, factor=2):
    """Repeat the trailing ``nsp`` spatial axes ``factor`` times each."""
    x = _node(x)
    v = x.value
    nd = v.ndim
    for ax in range(nd - nsp, nd):
        v = np.repeat(v, factor, axis=ax)
    shape = x.value.shape

    def bw(g):
        new = []
        for ax, n in enumerate(shape):
            if ax >= nd - nsp:
                new += [n, factor]
            else:
                new.append(n)
        g = g.reshape(new)
        red = tuple(nd - nsp + 2 * i + 1 for i in range(nsp))
        return (g.sum(axis=red),)
    return make(v, (x,), "upsample_nearest", bw)


# ----------------------------------------------------------------- sampling

def bilinear_sample_views(fmaps, uv):
    """Sample ``fmaps [K, C, H, W]`` at ``uv [K, M, 2]`` -> ``[K, M, C]``.

    Differentiable w.r.t. both the feature values and the sample coordinates.
    """
    fmaps, uv = _node(fmaps), _node(uv)
    fm = np.ascontiguousarray(np.transpose(fmaps.value, (0, 2, 3, 1)))
    uvv = np.ascontiguousarray(uv.value)
    if trace.active():
        H, W = fm.shape[1:3]
        trace.record("bilinear", np.floor(uvv).astype(np.int64))
        trace.record("bilinear_in", np.packbits((uvv[..., 0] >= 0) & (uvv[..., 0] <= W - 1)
                                                & (uvv[..., 1] >= 0) & (uvv[..., 1] <= H - 1)))
    out = kernels.bilinear_forward(fm, uvv)

    def bw(g):
        gfm, guv = kernels.bilinear_backward(fm, uvv, np.ascontiguousarray(g))
        return np.ascontiguousarray(np.transpose(gfm, (0, 3, 1, 2))), guv
    return make(out, (fmaps, uv), "bilinear_sample", bw)


def bilinear_sample(fmap, uv):
    """Sample one feature map ``[C, H, W]`` at ``uv [M, 2]`` -> ``[M, C]``."""
    fmap, uv = _node(fmap), _node(uv)
    return reshape(bilinear_sample_views(reshape(fmap, (1,) + fmap.value.shape),
                                         reshape(uv, (1,) + uv.value.shape)),
                   (uv.value.shape[0], fmap.value.shape[0]))


STD_EPS = 1e-6


def fuse_views(samples, mode="mean_std"):
    """Fuse per-view samples ``[K, P, C]`` into ``[P, C_f]``.

    ``mean_std`` concatenates the per-channel mean and standard deviation
    over views (C_f = 2C); ``max`` takes the per-channel maximum.
    """
    samples = _node(samples)
    s = samples.value
    K = s.shape[0]
    if K == 0:
        raise ValueError("cannot fuse zero views")
    if mode == "max":
        arg = s.argmax(axis=0)
        trace.record("fuse_max", arg)
        out = np.take_along_axis(s, arg[None], axis=0)[0]

        def bwm(g):
            gs = np.zeros_like(s)
            np.put_along_axis(gs, arg[None], g[None], axis=0)
            return (gs,)
        return make(out, (samples,), "fuse_max", bwm)
    if mode != "mean_std":
        raise ValueError(f"unknown fusion mode {mode!r}")
    mu = s.mean(axis=0)
    # shifted by view 0 so duplicated views give exactly zero variance
    d = s - s[0]
    dm = d.mean(axis=0)
    var = np.maximum((d * d).mean(axis=0) - dm * dm, 0.0)
    root = np.sqrt(var + STD_EPS)
    std = root - np.sqrt(STD_EPS)
    out = np.concatenate([mu, std], axis=-1)
    C = s.shape[2]

    def bw(g):
        gmu, gstd = g[..., :C], g[..., C:]
        gvar = np.where(var > 0, gstd / (2.0 * root), 0.0)
        # d var / d s_k = 2 (s_k - mean) / K
        gs = gmu[None] / K + gvar[None] * 2.0 * (s - mu[None]) / K
        return (gs,)
    return make(out, (samples,), "fuse_mean_std", bw)


def softmax_expectation(volume, coords):
    """Per-channel soft-argmax.

    ``volume`` is ``[..., D, H, W]`` (or already flat ``[..., G]`` when
    ``coords`` has G rows); the trailing spatial block is flattened in C order
    and must match the row order of ``coords [G, 3]``. Returns ``[..., 3]``.
    """
    volume = _node(volume)
    coords = np.asarray(coords, dtype=np.float64)
    G = coords.shape[0]
    v = volume.value
    nsp = 0
    size = 1
    while size < G:
        nsp += 1
        size *= v.shape[-nsp]
    if size != G:
        raise ValueError(f"volume shape {v.shape} does not match {G} grid coordinates")
    lead = v.shape[:v.ndim - nsp]
    logits = v.reshape(-1, G)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = (p @ coords).reshape(lead + (3,))

    def bw(g):
        g2 = g.reshape(-1, 3)
        S = g2 @ coords.T
        dl = p * (S - (p * S).sum(axis=1, keepdims=True))
        return (dl.reshape(v.shape),)
    return make(out, (volume,), "softmax_expectation", bw)
