"""Vectorized NumPy implementations of the hot kernels.

This is the fallback backend: same signatures as the compiled one, pure
NumPy underneath (stride tricks + BLAS matmul for the convolutions).
All functions accept float32 or float64 arrays and preserve the dtype.
"""

import numpy as np

NAME = "numpy"


def _check_conv_args(x, w, stride):
    if x.ndim != 4:
        raise ValueError(f"conv input must be 4-d (N,C,H,W), got shape {x.shape}")
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ValueError(f"conv weight must be (F,C,3,3), got shape {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ValueError(
            f"conv channel mismatch: input {x.shape} vs weight {w.shape}"
        )
    if stride not in (1, 2):
        raise ValueError(f"conv stride must be 1 or 2, got {stride}")


def _cols(x, stride):
    # (N,C,H,W) -> (N*Ho*Wo, C*9) patch matrix, zero padding of 1.
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    col = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return col.reshape(n * ho * wo, c * 9), ho, wo


def conv3x3_forward(x, w, stride=1):
    """3x3 convolution, zero padding 1, stride 1 or 2."""
    _check_conv_args(x, w, stride)
    n = x.shape[0]
    f = w.shape[0]
    col, ho, wo = _cols(x, stride)
    y = col @ w.reshape(f, -1).T
    return np.ascontiguousarray(y.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))


def conv3x3_backward(x, w, gy, stride=1):
    """Gradients of conv3x3_forward w.r.t. input and weight."""
    _check_conv_args(x, w, stride)
    n, c, h, wd = x.shape
    f = w.shape[0]
    ho, wo = gy.shape[2], gy.shape[3]
    col, _, _ = _cols(x, stride)
    gyf = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(n * ho * wo, f)
    gw = (gyf.T @ col).reshape(f, c, 3, 3)
    gcol = (gyf @ w.reshape(f, -1)).reshape(n, ho, wo, c, 3, 3)
    gcol = np.ascontiguousarray(gcol.transpose(0, 3, 4, 5, 1, 2))
    gxp = np.zeros((n, c, h + 2, wd + 2), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcol[
                :, :, i, j
            ]
    return gxp[:, :, 1 : h + 1, 1 : wd + 1], gw


def _pool_geometry(h, w, k, stride):
    pad = k // 2 if stride == 1 else 0
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"pool window {k} does not fit input {(h, w)}")
    return pad, ho, wo


def avgpool2d_forward(x, k, stride):
    """Average pooling; stride 1 keeps spatial dims (zero pad k//2).

    Padded cells count toward the k*k divisor so the operation stays
    linear in the input.
    """
    if x.ndim != 4:
        raise ValueError(f"pool input must be 4-d, got shape {x.shape}")
    n, c, h, w = x.shape
    pad, ho, wo = _pool_geometry(h, w, k, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return win.sum(axis=(-2, -1)) * np.asarray(1.0 / (k * k), dtype=x.dtype)


def avgpool2d_backward(gy, x_shape, k, stride):
    n, c, h, w = x_shape
    pad, ho, wo = _pool_geometry(h, w, k, stride)
    g = gy * np.asarray(1.0 / (k * k), dtype=gy.dtype)
    gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=gy.dtype)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g
    if pad:
        return np.ascontiguousarray(gxp[:, :, pad : pad + h, pad : pad + w])
    return gxp


def correlate1d(grid, kernel, axis):
    """Zero-padded 1-d correlation of a 2-d grid along the given axis."""
    if grid.ndim != 2:
        raise ValueError(f"correlate1d expects a 2-d grid, got shape {grid.shape}")
    if axis not in (0, 1):
        raise ValueError(f"axis must be 0 or 1, got {axis}")
    taps = kernel.shape[0]
    r = taps // 2
    h, w = grid.shape
    if axis == 0:
        gp = np.pad(grid, ((r, r), (0, 0)))
    else:
        gp = np.pad(grid, ((0, 0), (r, r)))
    out = np.zeros_like(grid)
    for t in range(taps):
        if axis == 0:
            out += kernel[t] * gp[t : t + h, :]
        else:
            out += kernel[t] * gp[:, t : t + w]
    return out
