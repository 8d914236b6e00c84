"""Hard transfer: warp reference features by a predicted 2-D affine transform.

Sampling grids use normalized coordinates in [-1, 1] with -1 and +1 at the
centers of the first and last pixel, so a transform is independent of the
feature resolution.  Samples outside the input contribute zero.
"""

import numpy as np

from . import nn

IDENTITY = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
HEAD_SIZE = 32


def head_pool_factor(size):
    """Average-pool factor that brings a feature map down to at most 32 pixels wide."""
    if size <= HEAD_SIZE:
        return 1
    if size % HEAD_SIZE:
        raise ValueError(f"feature size {size} is not a multiple of {HEAD_SIZE}")
    return size // HEAD_SIZE


def init_localization(rng, c_in, in_size, widths=(16, 16), hidden=32, identity=True):
    """Localization head for a (in_size, in_size, c_in) input.

    With ``identity=True`` the last layer is zero with bias (1,0,0,0,1,0), so
    the head starts out predicting the identity transform.
    """
    side = min(in_size, HEAD_SIZE)
    if side % 4:
        raise ValueError(f"head input side {side} must be divisible by 4")
    params = {}
    prev = c_in
    for s, width in enumerate(widths):
        params[f"conv{s}.w"] = rng.normal(0.0, np.sqrt(2.0 / (9 * prev)), size=(3, 3, prev, width))
        params[f"conv{s}.b"] = np.full(width, 0.01)
        prev = width
    flat = (side // 4) * (side // 4) * prev
    params["fc0.w"] = rng.normal(0.0, np.sqrt(2.0 / flat), size=(flat, hidden))
    params["fc0.b"] = np.full(hidden, 0.01)
    if identity:
        params["fc1.w"] = np.zeros((hidden, 6))
    else:
        params["fc1.w"] = rng.normal(0.0, 0.01 / np.sqrt(hidden), size=(hidden, 6))
    params["fc1.b"] = IDENTITY.ravel().copy()
    return params


def localization_forward(target, reference, weights):
    if target.shape[:2] != reference.shape[:2]:
        raise ValueError(
            f"target {target.shape[:2]} and reference {reference.shape[:2]} differ in spatial size")
    x = np.concatenate([target, reference], axis=2)
    f = head_pool_factor(x.shape[0])
    p = nn.avg_pool(x, f) if f > 1 else x
    cache = {"x": x, "f": f, "stages": []}
    h = p
    s = 0
    while f"conv{s}.w" in weights:
        w = weights[f"conv{s}.w"]
        if w.shape[2] != h.shape[2]:
            raise ValueError(f"head stage {s} expects {w.shape[2]} channels, got {h.shape[2]}")
        z = nn.conv2d(h, w, weights[f"conv{s}.b"])
        cache["stages"].append((h, z))
        h = nn.avg_pool(nn.relu(z), 2)
        s += 1
    v = h.ravel()
    if v.size != weights["fc0.w"].shape[0]:
        raise ValueError(f"head expects {weights['fc0.w'].shape[0]} flattened features, got {v.size}")
    u = v @ weights["fc0.w"] + weights["fc0.b"]
    hu = nn.relu(u)
    out = hu @ weights["fc1.w"] + weights["fc1.b"]
    cache.update(pooled_shape=h.shape, v=v, u=u, hu=hu)
    return out.reshape(2, 3), cache


def localization_backward(dtheta, cache, weights):
    """Returns (d_target, d_reference, grads)."""
    g = {}
    dout = dtheta.ravel()
    g["fc1.w"] = np.outer(cache["hu"], dout)
    g["fc1.b"] = dout.copy()
    du = nn.relu_backward(weights["fc1.w"] @ dout, cache["u"])
    g["fc0.w"] = np.outer(cache["v"], du)
    g["fc0.b"] = du
    dh = (weights["fc0.w"] @ du).reshape(cache["pooled_shape"])
    for s in reversed(range(len(cache["stages"]))):
        h, z = cache["stages"][s]
        dz = nn.relu_backward(nn.avg_pool_backward(dh, 2), z)
        dh, g[f"conv{s}.w"], g[f"conv{s}.b"] = nn.conv2d_backward(dz, h, weights[f"conv{s}.w"])
    if cache["f"] > 1:
        dh = nn.avg_pool_backward(dh, cache["f"])
    c = dh.shape[2] // 2
    return dh[:, :, :c], dh[:, :, c:], g


def estimate_affine(target, reference, weights):
    """Predict the 2x3 transform from channel-concatenated target and reference features."""
    return localization_forward(target, reference, weights)[0]


def _normalized_axis(n):
    if n == 1:
        return np.zeros(1)
    return np.linspace(-1.0, 1.0, n)


def _to_pixels(u, n):
    return (u + 1.0) * (n - 1) / 2.0


def affine_grid(theta, out_size, in_size=None):
    """Source sample position, in input pixel units, for every output pixel.

    Returns an (H, W, 2) array of (x, y).  Output pixel centers are placed on
    the normalized [-1, 1] frame, mapped through ``theta``, then rescaled to
    the input's pixel frame.
    """
    theta = np.asarray(theta, dtype=np.float64).reshape(2, 3)
    if not np.all(np.isfinite(theta)):
        raise ValueError("affine matrix has non-finite entries")
    H, W = out_size
    Hi, Wi = in_size if in_size is not None else out_size
    ye, xe = np.meshgrid(_normalized_axis(H), _normalized_axis(W), indexing="ij")
    xv = theta[0, 0] * xe + theta[0, 1] * ye + theta[0, 2]
    yv = theta[1, 0] * xe + theta[1, 1] * ye + theta[1, 2]
    return np.stack([_to_pixels(xv, Wi), _to_pixels(yv, Hi)], axis=-1)


def affine_grid_backward(dgrid, out_size, in_size=None):
    H, W = out_size
    Hi, Wi = in_size if in_size is not None else out_size
    ye, xe = np.meshgrid(_normalized_axis(H), _normalized_axis(W), indexing="ij")
    basis = np.stack([xe, ye, np.ones_like(xe)], axis=-1)
    dx = dgrid[..., 0] * (Wi - 1) / 2.0
    dy = dgrid[..., 1] * (Hi - 1) / 2.0
    return np.stack([np.tensordot(dx, basis, axes=([0, 1], [0, 1])),
                     np.tensordot(dy, basis, axes=([0, 1], [0, 1]))])


def _corners(values, grid):
    Hi, Wi = values.shape[:2]
    px, py = grid[..., 0], grid[..., 1]
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx, fy = px - x0, py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    for oy in (0, 1):
        for ox in (0, 1):
            xi, yi = x0 + ox, y0 + oy
            valid = (xi >= 0) & (xi < Wi) & (yi >= 0) & (yi < Hi)
            wx = fx if ox else 1.0 - fx
            wy = fy if oy else 1.0 - fy
            yield ox, oy, np.clip(xi, 0, Wi - 1), np.clip(yi, 0, Hi - 1), valid, wx, wy


def bilinear_sample(values, grid):
    """Four-neighbor bilinear interpolation of ``values`` at pixel positions ``grid``."""
    out = np.zeros(grid.shape[:2] + values.shape[2:], dtype=np.result_type(values, grid))
    for _, _, xi, yi, valid, wx, wy in _corners(values, grid):
        out += (wx * wy * valid)[..., None] * values[yi, xi]
    return out


def bilinear_sample_backward(dout, values, grid):
    """Returns (d_values, d_grid)."""
    Hi, Wi, C = values.shape
    dvalues = np.zeros((Hi * Wi, C), dtype=dout.dtype)
    dgrid = np.zeros(grid.shape, dtype=dout.dtype)
    for ox, oy, xi, yi, valid, wx, wy in _corners(values, grid):
        w = (wx * wy * valid)[..., None]
        np.add.at(dvalues, (yi * Wi + xi).ravel(), (dout * w).reshape(-1, C))
        g = np.einsum("hwc,hwc->hw", dout, values[yi, xi]) * valid
        dgrid[..., 0] += g * wy * (1.0 if ox else -1.0)
        dgrid[..., 1] += g * wx * (1.0 if oy else -1.0)
    return dvalues.reshape(Hi, Wi, C), dgrid


def warp(values, theta):
    """Warp a feature volume by ``theta`` onto a grid of the same size."""
    return bilinear_sample(values, affine_grid(theta, values.shape[:2]))
