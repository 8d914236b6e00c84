"""Soft transfer: move reference heatmap features to the target by patch correlation.

For every target position ``i`` the best-matching reference position ``D[i]``
is found among all ``H*W`` positions by the inner product of l2-normalized
``k x k`` patches.  The reference value descriptor at ``D[i]`` is gathered and
scaled by the match score ``A[i]``.  ``D`` and ``A`` are treated as constants
of the forward pass; no gradient flows through the argmax or the max.

Feature volumes are plain ``(H, W, C)`` float arrays.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import nn

SCALES = ("1x", "2x", "4x")
# number of leading stride-2 stages per output scale
_DOWNSAMPLE = {"1x": 2, "2x": 1, "4x": 0}
DEFAULT_PATCH = 3


def worker_count(workers=None):
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get("RHT_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def scale_strides(scale, n_stages=3):
    if scale not in _DOWNSAMPLE:
        raise ValueError(f"unknown scale {scale!r}; expected one of {SCALES}")
    n = _DOWNSAMPLE[scale]
    return tuple(2 if s < n else 1 for s in range(n_stages))


def init_extractor(rng, c_in, widths, bias=0.01):
    """He-initialized extractor weights: per stage a 3x3 kernel, bias, and per-channel scale."""
    params = {}
    prev = c_in
    for s, width in enumerate(widths):
        std = np.sqrt(2.0 / (9 * prev))
        params[f"conv{s}.w"] = rng.normal(0.0, std, size=(3, 3, prev, width))
        params[f"conv{s}.b"] = np.full(width, bias)
        params[f"conv{s}.g"] = np.ones(width)
        prev = width
    return params


def _n_stages(weights):
    n = 0
    while f"conv{n}.w" in weights:
        n += 1
    return n


def extract_local_features(image, weights, target_scale="1x"):
    """Run the local feature extractor; output size is input / {4, 2, 1} for 1x/2x/4x.

    Each stage is a 3x3 convolution, a per-channel affine (scale then shift),
    and a ReLU.  Returns only the feature volume; use ``extractor_forward``
    when a backward pass is needed.
    """
    return extractor_forward(image, weights, target_scale)[0]


def extractor_forward(image, weights, target_scale="1x"):
    n = _n_stages(weights)
    if n == 0:
        raise ValueError("extractor weights contain no stages")
    strides = scale_strides(target_scale, n)
    h = np.asarray(image)
    if not np.issubdtype(h.dtype, np.floating):
        h = h.astype(np.float64)
    if h.ndim != 3:
        raise ValueError(f"extractor input must be H x W x C, got {h.shape}")
    cache = []
    for s in range(n):
        w, b, g = weights[f"conv{s}.w"], weights[f"conv{s}.b"], weights[f"conv{s}.g"]
        if w.shape[2] != h.shape[2]:
            raise ValueError(
                f"extractor stage {s} expects {w.shape[2]} input channels, got {h.shape[2]}")
        if b.shape != (w.shape[3],) or g.shape != (w.shape[3],):
            raise ValueError(f"extractor stage {s} bias/scale shapes do not match kernel {w.shape}")
        z = nn.conv2d(h, w, stride=strides[s], pad=1)
        a = z * g + b
        cache.append((h, z, a, strides[s]))
        h = nn.relu(a)
    return h, cache


def extractor_backward(dout, cache, weights):
    grads = {}
    d = dout
    for s in reversed(range(len(cache))):
        h, z, a, stride = cache[s]
        da = nn.relu_backward(d, a)
        grads[f"conv{s}.b"] = da.sum(axis=(0, 1))
        grads[f"conv{s}.g"] = (da * z).sum(axis=(0, 1))
        dz = da * weights[f"conv{s}.g"]
        d, grads[f"conv{s}.w"], _ = nn.conv2d_backward(dz, h, weights[f"conv{s}.w"], stride=stride, pad=1)
    return d, grads


@dataclass
class PatchMatrix:
    rows: np.ndarray  # (H*W, k*k*C)
    patch_size: int
    unit_norm: bool = False
    zero_rows: np.ndarray = None  # bool mask, set by l2_normalize

    @property
    def n(self):
        return self.rows.shape[0]


def unfold(volume, k=DEFAULT_PATCH):
    """Row ``i`` is the zero-padded k x k x C neighborhood of row-major position ``i``."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"patch size must be a positive odd integer, got {k}")
    volume = np.asarray(volume)
    H, W, C = volume.shape
    r = k // 2
    padded = np.pad(volume, ((r, r), (r, r), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(0, 1))
    # win: (H, W, C, k, k) -> (H, W, k, k, C)
    rows = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(H * W, k * k * C)
    return PatchMatrix(rows, k)


def l2_normalize(patches):
    norms = np.sqrt(np.einsum("ij,ij->i", patches.rows, patches.rows))
    zero = norms == 0
    scale = np.where(zero, 1.0, norms)
    return PatchMatrix(patches.rows / scale[:, None], patches.patch_size, True, zero)


@dataclass
class CorrelationArtifacts:
    D: np.ndarray  # (N,) int
    A: np.ndarray  # (N,)
    C: np.ndarray = None  # (N, N2), dropped when not requested

    @property
    def n(self):
        return len(self.D)


def _check_pair(q, kref):
    if q.rows.shape[1] != kref.rows.shape[1]:
        raise ValueError(
            f"descriptor length mismatch: {q.rows.shape[1]} vs {kref.rows.shape[1]}")
    for name, pm in (("query", q), ("reference", kref)):
        if not pm.unit_norm:
            raise ValueError(f"{name} patches are not l2-normalized")
        norms = np.einsum("ij,ij->i", pm.rows, pm.rows)
        live = norms > 0
        if not np.allclose(norms[live], 1.0, atol=1e-6):
            raise ValueError(f"{name} patches flagged unit-norm but rows are not unit length")


def correlate_naive(q, kref):
    """Reference triple loop: C[i, j] = <q_i, k_j>, smallest-index argmax."""
    _check_pair(q, kref)
    Q, K = q.rows.tolist(), kref.rows.tolist()
    N, N2 = len(Q), len(K)
    C = np.zeros((N, N2))
    D = np.zeros(N, dtype=np.int64)
    A = np.zeros(N)
    for i in range(N):
        qi = Q[i]
        best, arg = -np.inf, 0
        for j in range(N2):
            kj = K[j]
            s = 0.0
            for t in range(len(qi)):
                s += qi[t] * kj[t]
            C[i, j] = s
            if s > best:
                best, arg = s, j
        D[i], A[i] = arg, best
    return CorrelationArtifacts(D, A, C)


def correlate(q, kref, keep_matrix=True, block=512, workers=None):
    """Blocked, row-parallel patch correlation.

    Query rows are split into blocks; each block is one matrix product
    against all reference rows followed by a row-wise argmax.  Blocks write
    disjoint slices of D, A (and C), so results do not depend on the worker
    count.  ``keep_matrix=False`` avoids materializing the (N, N2) matrix.
    """
    _check_pair(q, kref)
    N, N2 = q.n, kref.n
    dtype = np.result_type(q.rows, kref.rows)
    D = np.empty(N, dtype=np.int64)
    A = np.empty(N, dtype=dtype)
    C = np.empty((N, N2), dtype=dtype) if keep_matrix else None
    kt = np.ascontiguousarray(kref.rows.T)

    def run(start):
        stop = min(start + block, N)
        cb = q.rows[start:stop] @ kt
        d = np.argmax(cb, axis=1)  # first occurrence -> smallest index on ties
        D[start:stop] = d
        A[start:stop] = cb[np.arange(stop - start), d]
        if C is not None:
            C[start:stop] = cb

    starts = range(0, N, block)
    n_workers = min(worker_count(workers), len(starts))
    if n_workers <= 1:
        for s in starts:
            run(s)
    else:
        with ThreadPoolExecutor(n_workers) as pool:
            list(pool.map(run, starts))
    return CorrelationArtifacts(D, A, C)


def soft_transfer(values, art):
    """Gather ``values`` at ``D[i]`` for every position and weight by ``A[i]``."""
    H, W, C = values.shape
    if art.n != H * W:
        raise ValueError(f"artifacts cover {art.n} positions, values have {H * W}")
    if art.D.size and (art.D.min() < 0 or art.D.max() >= H * W):
        raise ValueError("index matrix points outside the value volume")
    flat = values.reshape(H * W, C)
    return (flat[art.D] * art.A[:, None]).reshape(H, W, C)


def soft_transfer_backward(dout, art, shape):
    H, W, C = shape
    dv = np.zeros((H * W, C), dtype=dout.dtype)
    np.add.at(dv, art.D, dout.reshape(H * W, C) * art.A[:, None])
    return dv.reshape(H, W, C)


def stm_forward(f_q, f_k, f_v, k=DEFAULT_PATCH, workers=None, keep_matrix=False):
    """Full soft-transfer step: unfold, normalize, correlate, gather."""
    q = l2_normalize(unfold(f_q, k))
    kr = l2_normalize(unfold(f_k, k))
    art = correlate(q, kr, keep_matrix=keep_matrix, workers=workers)
    return soft_transfer(f_v, art), art
