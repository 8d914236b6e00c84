"""Dense layer kernels on H x W x C arrays with hand-written backward passes.

Every forward function here is a pure function of its arguments; the matching
``*_backward`` takes the upstream gradient plus whatever the forward consumed
and returns gradients in the same order as the forward's array arguments.

Convolution weights are laid out ``(kh, kw, c_in, c_out)``.
"""

import numpy as np


def _pad_hw(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((pad, pad), (pad, pad), (0, 0)))


def conv_output_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, w, b=None, stride=1, pad=None):
    """2-D cross-correlation of an (H, W, Cin) volume with a (k, k, Cin, Cout) kernel.

    Zero padding defaults to ``k // 2`` so stride-1 convolutions keep the
    spatial size.
    """
    k = w.shape[0]
    if w.ndim != 4 or w.shape[1] != k:
        raise ValueError(f"expected a square (k, k, Cin, Cout) kernel, got {w.shape}")
    if x.ndim != 3 or x.shape[2] != w.shape[2]:
        raise ValueError(f"input {x.shape} does not match kernel {w.shape}")
    if pad is None:
        pad = k // 2
    H, W, _ = x.shape
    Ho = conv_output_size(H, k, stride, pad)
    Wo = conv_output_size(W, k, stride, pad)
    xp = _pad_hw(x, pad)
    out = np.zeros((Ho, Wo, w.shape[3]), dtype=np.result_type(x, w))
    for dy in range(k):
        for dx in range(k):
            patch = xp[dy:dy + stride * (Ho - 1) + 1:stride, dx:dx + stride * (Wo - 1) + 1:stride, :]
            out += patch @ w[dy, dx]
    if b is not None:
        out += b
    return out


def conv2d_backward(dout, x, w, stride=1, pad=None):
    k = w.shape[0]
    if pad is None:
        pad = k // 2
    Ho, Wo, _ = dout.shape
    xp = _pad_hw(x, pad)
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for dy in range(k):
        for dx in range(k):
            rows = slice(dy, dy + stride * (Ho - 1) + 1, stride)
            cols = slice(dx, dx + stride * (Wo - 1) + 1, stride)
            dxp[rows, cols, :] += dout @ w[dy, dx].T
            dw[dy, dx] = np.tensordot(xp[rows, cols, :], dout, axes=([0, 1], [0, 1]))
    db = dout.sum(axis=(0, 1))
    if pad:
        dxp = dxp[pad:-pad, pad:-pad, :]
    return dxp, dw, db


def conv_transpose2d(x, w, b=None, stride=2, pad=1):
    """Transposed convolution; with k=4, stride=2, pad=1 the output is (2H, 2W).

    Input pixel (i, j) scatters ``x[i, j] @ w[ky, kx]`` onto output pixel
    ``(i*stride - pad + ky, j*stride - pad + kx)``.
    """
    k = w.shape[0]
    if x.ndim != 3 or x.shape[2] != w.shape[2]:
        raise ValueError(f"input {x.shape} does not match kernel {w.shape}")
    H, W, _ = x.shape
    Ho = (H - 1) * stride - 2 * pad + k
    Wo = (W - 1) * stride - 2 * pad + k
    # scatter into an oversized buffer, then crop the padding off
    buf = np.zeros((Ho + 2 * pad, Wo + 2 * pad, w.shape[3]), dtype=np.result_type(x, w))
    for ky in range(k):
        for kx in range(k):
            buf[ky:ky + stride * (H - 1) + 1:stride, kx:kx + stride * (W - 1) + 1:stride, :] += x @ w[ky, kx]
    out = buf[pad:pad + Ho, pad:pad + Wo, :]
    if b is not None:
        out = out + b
    return np.ascontiguousarray(out)


def conv_transpose2d_backward(dout, x, w, stride=2, pad=1):
    k = w.shape[0]
    H, W, _ = x.shape
    dbuf = np.pad(dout, ((pad, pad), (pad, pad), (0, 0)))
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    for ky in range(k):
        for kx in range(k):
            g = dbuf[ky:ky + stride * (H - 1) + 1:stride, kx:kx + stride * (W - 1) + 1:stride, :]
            dx += g @ w[ky, kx].T
            dw[ky, kx] = np.tensordot(x, g, axes=([0, 1], [0, 1]))
    db = dout.sum(axis=(0, 1))
    return dx, dw, db


def avg_pool(x, f):
    """Non-overlapping f x f average pooling; H and W must be multiples of f."""
    H, W, C = x.shape
    if H % f or W % f:
        raise ValueError(f"spatial size {H}x{W} not divisible by pool factor {f}")
    return x.reshape(H // f, f, W // f, f, C).mean(axis=(1, 3))


def avg_pool_backward(dout, f):
    return np.repeat(np.repeat(dout, f, axis=0), f, axis=1) / (f * f)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dout, x):
    return dout * (x > 0)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_backward(dout, y):
    return dout * y * (1.0 - y)
