# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the convolution and rearrangement hot paths.

Every function here has a NumPy twin in ``_fallback`` with the same signature
and the same results (bitwise for the rearrangements, up to summation order
for the convolutions).

Loops precompute the in-bounds output range for each kernel tap so the
innermost loop is branch-free and contiguous.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


cdef inline Py_ssize_t _lo(Py_ssize_t k, Py_ssize_t pad, Py_ssize_t stride) nogil:
    # first output index o with o*stride + k - pad >= 0
    cdef Py_ssize_t t = pad - k
    if t <= 0:
        return 0
    return (t + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t k, Py_ssize_t pad, Py_ssize_t stride,
                           Py_ssize_t size, Py_ssize_t out) nogil:
    # one past the last output index o with o*stride + k - pad < size
    cdef Py_ssize_t t = size - 1 + pad - k
    if t < 0:
        return 0
    t = t // stride + 1
    return t if t < out else out


def im2col(floating[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    """Unfold ``x`` into ``(N, C*kh*kw, Ho*Wo)`` patch columns."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t n_, c_, i, j, y, xx, row, y0, y1, x0, x1, off
    cdef floating *src
    cdef floating *dst
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((N, C * kh * kw, Ho * Wo), dtype=dtype)
    cdef floating[:, :, ::1] cols = out
    with nogil:
        for n_ in range(N):
            for c_ in range(C):
                for i in range(kh):
                    y0 = _lo(i, pad, stride)
                    y1 = _hi(i, pad, stride, H, Ho)
                    for j in range(kw):
                        x0 = _lo(j, pad, stride)
                        x1 = _hi(j, pad, stride, W, Wo)
                        row = (c_ * kh + i) * kw + j
                        off = j - pad
                        for y in range(y0, y1):
                            src = &x[n_, c_, y * stride + i - pad, 0]
                            dst = &cols[n_, row, y * Wo]
                            if stride == 1:
                                for xx in range(x0, x1):
                                    dst[xx] = src[xx + off]
                            else:
                                for xx in range(x0, x1):
                                    dst[xx] = src[xx * stride + off]
    return out


def col2im(floating[:, :, ::1] cols, int C, int H, int W, int kh, int kw, int stride, int pad):
    """Fold patch columns back, summing overlapping contributions."""
    cdef Py_ssize_t N = cols.shape[0]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t n_, c_, i, j, y, xx, row, y0, y1, x0, x1, off
    cdef floating *src
    cdef floating *dst
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((N, C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    with nogil:
        for n_ in range(N):
            for c_ in range(C):
                for i in range(kh):
                    y0 = _lo(i, pad, stride)
                    y1 = _hi(i, pad, stride, H, Ho)
                    for j in range(kw):
                        x0 = _lo(j, pad, stride)
                        x1 = _hi(j, pad, stride, W, Wo)
                        row = (c_ * kh + i) * kw + j
                        off = j - pad
                        for y in range(y0, y1):
                            dst = &dx[n_, c_, y * stride + i - pad, 0]
                            src = &cols[n_, row, y * Wo]
                            if stride == 1:
                                for xx in range(x0, x1):
                                    dst[xx + off] += src[xx]
                            else:
                                for xx in range(x0, x1):
                                    dst[xx * stride + off] += src[xx]
    return out


def depthwise_forward(floating[:, :, :, ::1] x, floating[:, :, ::1] w, int stride, int pad):
    """Depthwise conv with multiplier ``m = w.shape[0] // C``.

    Output channel ``o`` reads input channel ``o // m``.
    """
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], kh = w.shape[1], kw = w.shape[2]
    cdef Py_ssize_t m = O // C
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t n_, o, c_, i, j, y, xx, y0, y1, x0, x1, off
    cdef floating wv
    cdef floating *src
    cdef floating *dst
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((N, O, Ho, Wo), dtype=dtype)
    cdef floating[:, :, :, ::1] res = out
    with nogil:
        for n_ in range(N):
            for o in range(O):
                c_ = o // m
                for i in range(kh):
                    y0 = _lo(i, pad, stride)
                    y1 = _hi(i, pad, stride, H, Ho)
                    for j in range(kw):
                        x0 = _lo(j, pad, stride)
                        x1 = _hi(j, pad, stride, W, Wo)
                        wv = w[o, i, j]
                        off = j - pad
                        for y in range(y0, y1):
                            src = &x[n_, c_, y * stride + i - pad, 0]
                            dst = &res[n_, o, y, 0]
                            if stride == 1:
                                for xx in range(x0, x1):
                                    dst[xx] += wv * src[xx + off]
                            else:
                                for xx in range(x0, x1):
                                    dst[xx] += wv * src[xx * stride + off]
    return out


def depthwise_backward(floating[:, :, :, ::1] x, floating[:, :, ::1] w,
                       floating[:, :, :, ::1] gout, int stride, int pad):
    """Gradients ``(dx, dw)`` of :func:`depthwise_forward`."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], kh = w.shape[1], kw = w.shape[2]
    cdef Py_ssize_t m = O // C
    cdef Py_ssize_t Ho = gout.shape[2], Wo = gout.shape[3]
    cdef Py_ssize_t n_, o, c_, i, j, y, xx, y0, y1, x0, x1, off
    cdef floating wv, acc
    cdef floating *src
    cdef floating *g
    cdef floating *dst
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.zeros((N, C, H, W), dtype=dtype)
    dw_arr = np.zeros((O, kh, kw), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = dx_arr
    cdef floating[:, :, ::1] dw = dw_arr
    with nogil:
        for n_ in range(N):
            for o in range(O):
                c_ = o // m
                for i in range(kh):
                    y0 = _lo(i, pad, stride)
                    y1 = _hi(i, pad, stride, H, Ho)
                    for j in range(kw):
                        x0 = _lo(j, pad, stride)
                        x1 = _hi(j, pad, stride, W, Wo)
                        wv = w[o, i, j]
                        off = j - pad
                        acc = 0
                        for y in range(y0, y1):
                            src = &x[n_, c_, y * stride + i - pad, 0]
                            dst = &dx[n_, c_, y * stride + i - pad, 0]
                            g = &gout[n_, o, y, 0]
                            if stride == 1:
                                for xx in range(x0, x1):
                                    acc = acc + g[xx] * src[xx + off]
                                    dst[xx + off] += wv * g[xx]
                            else:
                                for xx in range(x0, x1):
                                    acc = acc + g[xx] * src[xx * stride + off]
                                    dst[xx * stride + off] += wv * g[xx]
                        dw[o, i, j] += acc
    return dx_arr, dw_arr


def pixel_unshuffle(floating[:, :, :, ::1] x, int r):
    """Space-to-depth, channel-major: ``out[n, c*r*r + i*r + j, h, w] = x[n, c, h*r+i, w*r+j]``."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = H // r, Wo = W // r
    cdef Py_ssize_t n_, c_, i, j, h, ww, oc
    cdef floating *src
    cdef floating *dst
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((N, C * r * r, Ho, Wo), dtype=dtype)
    cdef floating[:, :, :, ::1] res = out
    with nogil:
        for n_ in range(N):
            for c_ in range(C):
                for i in range(r):
                    for j in range(r):
                        oc = c_ * r * r + i * r + j
                        for h in range(Ho):
                            src = &x[n_, c_, h * r + i, 0]
                            dst = &res[n_, oc, h, 0]
                            for ww in range(Wo):
                                dst[ww] = src[ww * r + j]
    return out


def pixel_shuffle(floating[:, :, :, ::1] x, int r):
    """Exact inverse of :func:`pixel_unshuffle`."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1] // (r * r), H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t n_, c_, i, j, h, ww, ic
    cdef floating *src
    cdef floating *dst
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((N, C, H * r, W * r), dtype=dtype)
    cdef floating[:, :, :, ::1] res = out
    with nogil:
        for n_ in range(N):
            for c_ in range(C):
                for i in range(r):
                    for j in range(r):
                        ic = c_ * r * r + i * r + j
                        for h in range(H):
                            src = &x[n_, ic, h, 0]
                            dst = &res[n_, c_, h * r + i, 0]
                            for ww in range(W):
                                dst[ww * r + j] = src[ww]
    return out
