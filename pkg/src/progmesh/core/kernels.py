"""Bilinear gather/scatter kernels, numba and numpy variants.

Feature maps are channels-last here, ``[K, H, W, C]``; ``uv`` is ``[K, M, 2]``
in pixel units with pixel centers on integer coordinates (u = column,
v = row). Out-of-range coordinates are clamped to the pixel-center
rectangle and get zero gradient along the clamped axis.
"""
import numpy as np

from .._accel import NUMBA_ENABLED, njit


def _corners_np(coord, size):
    c = np.clip(coord, 0.0, size - 1.0)
    inside = (coord >= 0.0) & (coord <= size - 1.0)
    if size == 1:
        i0 = np.zeros(coord.shape, dtype=np.int64)
        return i0, i0, np.zeros_like(c), inside
    i0 = np.minimum(np.floor(c).astype(np.int64), size - 2)
    return i0, i0 + 1, c - i0, inside


def bilinear_forward_np(fm, uv):
    K, H, W, C = fm.shape
    x0, x1, fx, _ = _corners_np(uv[..., 0], W)
    y0, y1, fy, _ = _corners_np(uv[..., 1], H)
    k = np.arange(K)[:, None]
    fx = fx[..., None]
    fy = fy[..., None]
    return ((1 - fy) * ((1 - fx) * fm[k, y0, x0] + fx * fm[k, y0, x1])
            + fy * ((1 - fx) * fm[k, y1, x0] + fx * fm[k, y1, x1]))


def bilinear_backward_np(fm, uv, gout):
    K, H, W, C = fm.shape
    M = uv.shape[1]
    x0, x1, fx, inx = _corners_np(uv[..., 0], W)
    y0, y1, fy, iny = _corners_np(uv[..., 1], H)
    k = np.arange(K)[:, None]
    f00, f01 = fm[k, y0, x0], fm[k, y0, x1]
    f10, f11 = fm[k, y1, x0], fm[k, y1, x1]
    fxe, fye = fx[..., None], fy[..., None]
    du = ((1 - fye) * (f01 - f00) + fye * (f11 - f10))
    dv = ((1 - fxe) * (f10 - f00) + fxe * (f11 - f01))
    guv = np.zeros(uv.shape)
    guv[..., 0] = np.where(inx, (du * gout).sum(-1), 0.0)
    guv[..., 1] = np.where(iny, (dv * gout).sum(-1), 0.0)

    gfm = np.zeros(K * H * W * C)
    chan = np.arange(C)
    kk = np.broadcast_to(k, (K, M))
    for yy, xx, w in ((y0, x0, (1 - fy) * (1 - fx)), (y0, x1, (1 - fy) * fx),
                      (y1, x0, fy * (1 - fx)), (y1, x1, fy * fx)):
        base = ((kk * H + yy) * W + xx) * C
        idx = (base[..., None] + chan).ravel()
        gfm += np.bincount(idx, weights=(w[..., None] * gout).ravel(), minlength=gfm.size)
    return gfm.reshape(K, H, W, C), guv


@njit
def _corner(coord, size):
    inside = coord >= 0.0 and coord <= size - 1.0
    c = min(max(coord, 0.0), size - 1.0)
    if size == 1:
        return 0, 0, 0.0, inside
    i0 = int(np.floor(c))
    if i0 > size - 2:
        i0 = size - 2
    return i0, i0 + 1, c - i0, inside


@njit
def bilinear_forward_nb(fm, uv):
    K, H, W, C = fm.shape
    M = uv.shape[1]
    out = np.empty((K, M, C))
    for k in range(K):
        for m in range(M):
            x0, x1, fx, _ = _corner(uv[k, m, 0], W)
            y0, y1, fy, _ = _corner(uv[k, m, 1], H)
            for c in range(C):
                out[k, m, c] = ((1 - fy) * ((1 - fx) * fm[k, y0, x0, c] + fx * fm[k, y0, x1, c])
                                + fy * ((1 - fx) * fm[k, y1, x0, c] + fx * fm[k, y1, x1, c]))
    return out


@njit
def bilinear_backward_nb(fm, uv, gout):
    K, H, W, C = fm.shape
    M = uv.shape[1]
    gfm = np.zeros((K, H, W, C))
    guv = np.zeros((K, M, 2))
    for k in range(K):
        for m in range(M):
            x0, x1, fx, inx = _corner(uv[k, m, 0], W)
            y0, y1, fy, iny = _corner(uv[k, m, 1], H)
            w00 = (1 - fy) * (1 - fx)
            w01 = (1 - fy) * fx
            w10 = fy * (1 - fx)
            w11 = fy * fx
            su = 0.0
            sv = 0.0
            for c in range(C):
                g = gout[k, m, c]
                f00 = fm[k, y0, x0, c]
                f01 = fm[k, y0, x1, c]
                f10 = fm[k, y1, x0, c]
                f11 = fm[k, y1, x1, c]
                su += ((1 - fy) * (f01 - f00) + fy * (f11 - f10)) * g
                sv += ((1 - fx) * (f10 - f00) + fx * (f11 - f01)) * g
                gfm[k, y0, x0, c] += w00 * g
                gfm[k, y0, x1, c] += w01 * g
                gfm[k, y1, x0, c] += w10 * g
                gfm[k, y1, x1, c] += w11 * g
            if inx:
                guv[k, m, 0] = su
            if iny:
                guv[k, m, 1] = sv
    return gfm, guv


# col2im: scatter im2col gradients back onto the (padded) input.
# dcol is [B, Oz, Oy, Ox, Ci, kz, ky, kx]; 2D convs pass Oz = kz = 1.
# Both variants add kernel offsets in the same order, so they agree bitwise.

def col2im_np(dcol, out_shape, stride):
    B, Oz, Oy, Ox, Ci, kz, ky, kx = dcol.shape
    gx = np.zeros(out_shape)
    d = np.moveaxis(dcol, 4, 1)
    for a in range(kz):
        for b in range(ky):
            for c in range(kx):
                gx[:, :, a:a + stride * (Oz - 1) + 1:stride,
                   b:b + stride * (Oy - 1) + 1:stride,
                   c:c + stride * (Ox - 1) + 1:stride] += d[..., a, b, c]
    return gx


@njit
def col2im_nb(dcol, out_shape, stride):
    B, Oz, Oy, Ox, Ci, kz, ky, kx = dcol.shape
    gx = np.zeros(out_shape)
    for n in range(B):
        for a in range(kz):
            for b in range(ky):
                for c in range(kx):
                    for z in range(Oz):
                        for y in range(Oy):
                            for x in range(Ox):
                                for ci in range(Ci):
                                    gx[n, ci, a + stride * z, b + stride * y, c + stride * x] += \
                                        dcol[n, z, y, x, ci, a, b, c]
    return gx


if NUMBA_ENABLED:
    col2im = col2im_nb
    bilinear_forward = bilinear_forward_nb
    bilinear_backward = bilinear_backward_nb
else:
    bilinear_forward = bilinear_forward_np
    bilinear_backward = bilinear_backward_np
    col2im = col2im_np
