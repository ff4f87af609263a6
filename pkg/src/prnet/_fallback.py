"""Pure NumPy versions of the compiled kernels in ``_ckernels``."""

import numpy as np


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    N, C, H, W = x.shape
    Ho, Wo = _out_size(H, kh, stride, pad), _out_size(W, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((N, C, kh, kw, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * (Ho - 1) + 1:stride,
                                  j:j + stride * (Wo - 1) + 1:stride]
    return cols.reshape(N, C * kh * kw, Ho * Wo)


def col2im(cols, C, H, W, kh, kw, stride, pad):
    N = cols.shape[0]
    Ho, Wo = _out_size(H, kh, stride, pad), _out_size(W, kw, stride, pad)
    cols = cols.reshape(N, C, kh, kw, Ho, Wo)
    xp = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * (Ho - 1) + 1:stride,
               j:j + stride * (Wo - 1) + 1:stride] += cols[:, :, i, j]
    if pad:
        return np.ascontiguousarray(xp[:, :, pad:pad + H, pad:pad + W])
    return xp


def depthwise_forward(x, w, stride, pad):
    N, C, H, W = x.shape
    O, kh, kw = w.shape
    m = O // C
    Ho, Wo = _out_size(H, kh, stride, pad), _out_size(W, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    if m > 1:
        xp = np.repeat(xp, m, axis=1)
    out = np.zeros((N, O, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += w[None, :, i, j, None, None] * xp[
                :, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride]
    return out


def depthwise_backward(x, w, gout, stride, pad):
    N, C, H, W = x.shape
    O, kh, kw = w.shape
    m = O // C
    Ho, Wo = gout.shape[2], gout.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    if m > 1:
        xp = np.repeat(xp, m, axis=1)
    dxp = np.zeros((N, O, H + 2 * pad, W + 2 * pad), dtype=x.dtype)
    dw = np.empty((O, kh, kw), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            ys = slice(i, i + stride * (Ho - 1) + 1, stride)
            xs = slice(j, j + stride * (Wo - 1) + 1, stride)
            dw[:, i, j] = np.einsum("nohw,nohw->o", gout, xp[:, :, ys, xs])
            dxp[:, :, ys, xs] += w[None, :, i, j, None, None] * gout
    if m > 1:
        dxp = dxp.reshape(N, C, m, H + 2 * pad, W + 2 * pad).sum(axis=2)
    return np.ascontiguousarray(dxp[:, :, pad:pad + H, pad:pad + W]), dw


def pixel_unshuffle(x, r):
    N, C, H, W = x.shape
    y = x.reshape(N, C, H // r, r, W // r, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(y.reshape(N, C * r * r, H // r, W // r))


def pixel_shuffle(x, r):
    N, Cr, H, W = x.shape
    C = Cr // (r * r)
    y = x.reshape(N, C, r, r, H, W).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(y.reshape(N, C, H * r, W * r))
