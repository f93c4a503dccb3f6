# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel backend.

Same contract as numpy_backend, implemented as typed loops. Selected at
import time when the extension built; see _kernels/__init__.py.
"""

import numpy as np

cimport cython

NAME = "cython"

ctypedef fused real:
    float
    double


cdef void _conv_fwd(real[:, :, :, ::1] xp, real[:, :, :, ::1] w,
                    real[:, :, :, ::1] out, int stride) noexcept nogil:
    cdef Py_ssize_t n = out.shape[0], f = out.shape[1]
    cdef Py_ssize_t ho = out.shape[2], wo = out.shape[3]
    cdef Py_ssize_t c = xp.shape[1]
    cdef Py_ssize_t i, j, k, yo, xo, yi, xi
    cdef real acc
    for i in range(n):
        for j in range(f):
            for yo in range(ho):
                yi = yo * stride
                for xo in range(wo):
                    xi = xo * stride
                    acc = 0
                    for k in range(c):
                        acc = acc + (
                            w[j, k, 0, 0] * xp[i, k, yi, xi]
                            + w[j, k, 0, 1] * xp[i, k, yi, xi + 1]
                            + w[j, k, 0, 2] * xp[i, k, yi, xi + 2]
                            + w[j, k, 1, 0] * xp[i, k, yi + 1, xi]
                            + w[j, k, 1, 1] * xp[i, k, yi + 1, xi + 1]
                            + w[j, k, 1, 2] * xp[i, k, yi + 1, xi + 2]
                            + w[j, k, 2, 0] * xp[i, k, yi + 2, xi]
                            + w[j, k, 2, 1] * xp[i, k, yi + 2, xi + 1]
                            + w[j, k, 2, 2] * xp[i, k, yi + 2, xi + 2]
                        )
                    out[i, j, yo, xo] = acc


cdef void _conv_bwd(real[:, :, :, ::1] xp, real[:, :, :, ::1] w,
                    real[:, :, :, ::1] gy, real[:, :, :, ::1] gxp,
                    real[:, :, :, ::1] gw, int stride) noexcept nogil:
    cdef Py_ssize_t n = gy.shape[0], f = gy.shape[1]
    cdef Py_ssize_t ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t c = xp.shape[1]
    cdef Py_ssize_t i, j, k, yo, xo, yi, xi, ki, kj
    cdef real g
    for i in range(n):
        for j in range(f):
            for yo in range(ho):
                yi = yo * stride
                for xo in range(wo):
                    xi = xo * stride
                    g = gy[i, j, yo, xo]
                    for k in range(c):
                        for ki in range(3):
                            for kj in range(3):
                                gxp[i, k, yi + ki, xi + kj] += w[j, k, ki, kj] * g
                                gw[j, k, ki, kj] += xp[i, k, yi + ki, xi + kj] * g


def conv3x3_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w, int stride=1):
    """3x3 convolution, zero padding 1, stride 1 or 2."""
    if stride != 1 and stride != 2:
        raise ValueError(f"conv stride must be 1 or 2, got {stride}")
    if w.shape[1] != x.shape[1] or w.shape[2] != 3 or w.shape[3] != 3:
        raise ValueError("conv weight must be (F,C,3,3) matching input channels")
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t f = w.shape[0]
    dtype = np.float32 if real is float else np.float64
    xp_arr = np.zeros((n, c, h + 2, wd + 2), dtype=dtype)
    xp_arr[:, :, 1 : h + 1, 1 : wd + 1] = np.asarray(x)
    cdef real[:, :, :, ::1] xp = xp_arr
    cdef Py_ssize_t ho = (h - 1) // stride + 1
    cdef Py_ssize_t wo = (wd - 1) // stride + 1
    out_arr = np.zeros((n, f, ho, wo), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    _conv_fwd(xp, w, out, stride)
    return out_arr


def conv3x3_backward(real[:, :, :, ::1] x, real[:, :, :, ::1] w,
                     real[:, :, :, ::1] gy, int stride=1):
    """Gradients of conv3x3_forward w.r.t. input and weight."""
    if stride != 1 and stride != 2:
        raise ValueError(f"conv stride must be 1 or 2, got {stride}")
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t f = w.shape[0]
    dtype = np.float32 if real is float else np.float64
    xp_arr = np.zeros((n, c, h + 2, wd + 2), dtype=dtype)
    xp_arr[:, :, 1 : h + 1, 1 : wd + 1] = np.asarray(x)
    cdef real[:, :, :, ::1] xp = xp_arr
    gxp_arr = np.zeros((n, c, h + 2, wd + 2), dtype=dtype)
    gw_arr = np.zeros((f, c, 3, 3), dtype=dtype)
    cdef real[:, :, :, ::1] gxp = gxp_arr
    cdef real[:, :, :, ::1] gw = gw_arr
    _conv_bwd(xp, w, gy, gxp, gw, stride)
    return np.ascontiguousarray(gxp_arr[:, :, 1 : h + 1, 1 : wd + 1]), gw_arr


cdef void _pool_fwd(real[:, :, :, ::1] xp, real[:, :, :, ::1] out,
                    int k, int stride) noexcept nogil:
    cdef Py_ssize_t n = out.shape[0], c = out.shape[1]
    cdef Py_ssize_t ho = out.shape[2], wo = out.shape[3]
    cdef Py_ssize_t i, j, yo, xo, ki, kj, yi, xi
    cdef real acc, inv = <real> (1.0 / (k * k))
    for i in range(n):
        for j in range(c):
            for yo in range(ho):
                yi = yo * stride
                for xo in range(wo):
                    xi = xo * stride
                    acc = 0
                    for ki in range(k):
                        for kj in range(k):
                            acc = acc + xp[i, j, yi + ki, xi + kj]
                    out[i, j, yo, xo] = acc * inv


def avgpool2d_forward(real[:, :, :, ::1] x, int k, int stride):
    """Average pooling; stride 1 keeps spatial dims (zero pad k//2)."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef int pad = k // 2 if stride == 1 else 0
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"pool window {k} does not fit input {(h, w)}")
    dtype = np.float32 if real is float else np.float64
    xp_arr = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dtype)
    xp_arr[:, :, pad : pad + h, pad : pad + w] = np.asarray(x)
    cdef real[:, :, :, ::1] xp = xp_arr
    out_arr = np.zeros((n, c, ho, wo), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    _pool_fwd(xp, out, k, stride)
    return out_arr


cdef void _pool_bwd(real[:, :, :, ::1] gy, real[:, :, :, ::1] gxp,
                    int k, int stride) noexcept nogil:
    cdef Py_ssize_t n = gy.shape[0], c = gy.shape[1]
    cdef Py_ssize_t ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t i, j, yo, xo, ki, kj, yi, xi
    cdef real g, inv = <real> (1.0 / (k * k))
    for i in range(n):
        for j in range(c):
            for yo in range(ho):
                yi = yo * stride
                for xo in range(wo):
                    xi = xo * stride
                    g = gy[i, j, yo, xo] * inv
                    for ki in range(k):
                        for kj in range(k):
                            gxp[i, j, yi + ki, xi + kj] += g


def avgpool2d_backward(real[:, :, :, ::1] gy, x_shape, int k, int stride):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef int pad = k // 2 if stride == 1 else 0
    dtype = np.float32 if real is float else np.float64
    gxp_arr = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dtype)
    cdef real[:, :, :, ::1] gxp = gxp_arr
    _pool_bwd(gy, gxp, k, stride)
    if pad:
        return np.ascontiguousarray(gxp_arr[:, :, pad : pad + h, pad : pad + w])
    return gxp_arr


cdef void _corr1d(real[:, ::1] gp, real[::1] kernel, real[:, ::1] out,
                  int axis) noexcept nogil:
    cdef Py_ssize_t h = out.shape[0], w = out.shape[1]
    cdef Py_ssize_t taps = kernel.shape[0]
    cdef Py_ssize_t i, j, t
    cdef real acc
    for i in range(h):
        for j in range(w):
            acc = 0
            if axis == 0:
                for t in range(taps):
                    acc = acc + kernel[t] * gp[i + t, j]
            else:
                for t in range(taps):
                    acc = acc + kernel[t] * gp[i, j + t]
            out[i, j] = acc


def correlate1d(real[:, ::1] grid, real[::1] kernel, int axis):
    """Zero-padded 1-d correlation of a 2-d grid along the given axis."""
    if axis != 0 and axis != 1:
        raise ValueError(f"axis must be 0 or 1, got {axis}")
    cdef Py_ssize_t h = grid.shape[0], w = grid.shape[1]
    cdef Py_ssize_t r = kernel.shape[0] // 2
    dtype = np.float32 if real is float else np.float64
    if axis == 0:
        gp_arr = np.zeros((h + 2 * r, w), dtype=dtype)
        gp_arr[r : r + h, :] = np.asarray(grid)
    else:
        gp_arr = np.zeros((h, w + 2 * r), dtype=dtype)
        gp_arr[:, r : r + w] = np.asarray(grid)
    cdef real[:, ::1] gp = gp_arr
    out_arr = np.zeros((h, w), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    _corr1d(gp, kernel, out, axis)
    return out_arr
