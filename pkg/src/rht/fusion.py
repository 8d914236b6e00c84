"""Multi-scale fusion of transferred heatmap features with backbone features.

At each scale a feature-fusion block adds a 3x3 convolution of
``concat(fe, fs, fg)`` back onto ``fg``; between scales a 4x4 stride-2
transposed convolution doubles the resolution and halves the channels.  A 1x1
projection and a logistic squash produce the heatmaps.
"""

from dataclasses import dataclass

import numpy as np

from . import nn

SCALES = ("1x", "2x", "4x")


@dataclass(frozen=True)
class ScaleTable:
    """Spatial side and channel count of the transferred features per scale."""

    sizes: tuple  # ((side, channels), ...) for 1x, 2x, 4x
    image_size: int
    extractor_widths: tuple = (32, 64)
    head_widths: tuple = (16, 16)
    head_hidden: int = 32

    def __post_init__(self):
        for (s0, c0), (s1, c1) in zip(self.sizes[:-1], self.sizes[1:]):
            if s1 != 2 * s0 or 2 * c1 != c0:
                raise ValueError(f"scale table must double size and halve channels per step: {self.sizes}")
        if self.sizes[-1][0] != self.image_size:
            raise ValueError("the finest scale must match the image/heatmap size")

    def side(self, scale):
        return self.sizes[SCALES.index(scale)][0]

    def channels(self, scale):
        return self.sizes[SCALES.index(scale)][1]

    @property
    def heatmap_size(self):
        return self.sizes[-1][0]


FULL = ScaleTable(((32, 256), (64, 128), (128, 64)), image_size=128)
QUARTER = ScaleTable(((8, 32), (16, 16), (32, 8)), image_size=32,
                     extractor_widths=(8, 16), head_widths=(8, 8), head_hidden=16)
TABLES = {"full": FULL, "quarter": QUARTER}


def init_fusion(rng, table, n_out, n_blocks=1, scale=0.1):
    params = {}
    for s in SCALES:
        c = table.channels(s)
        for blk in range(n_blocks):
            params[f"ff.{s}.{blk}.w"] = rng.normal(0.0, scale * np.sqrt(2.0 / (27 * c)), size=(3, 3, 3 * c, c))
            params[f"ff.{s}.{blk}.b"] = np.zeros(c)
    for i in range(len(SCALES) - 1):
        c = table.sizes[i][1]
        params[f"up.{i}.w"] = rng.normal(0.0, np.sqrt(1.0 / (4 * c)), size=(4, 4, c, c // 2))
        params[f"up.{i}.b"] = np.zeros(c // 2)
    c = table.sizes[-1][1]
    params["proj.w"] = rng.normal(0.0, np.sqrt(1.0 / c), size=(1, 1, c, n_out))
    params["proj.b"] = np.zeros(n_out)
    return params


def ff_block(fe, fs, fg, w, b):
    """fg + conv3x3(concat(fe, fs, fg)); no activation after the residual add."""
    if not fe.shape[:2] == fs.shape[:2] == fg.shape[:2]:
        raise ValueError(f"ff block inputs differ in spatial size: {fe.shape}, {fs.shape}, {fg.shape}")
    x = np.concatenate([fe, fs, fg], axis=2)
    if w.shape[2] != x.shape[2] or w.shape[3] != fg.shape[2]:
        raise ValueError(f"ff kernel {w.shape} does not fit inputs with {x.shape[2]} -> {fg.shape[2]} channels")
    return fg + nn.conv2d(x, w, b)


def ff_block_backward(dout, fe, fs, fg, w):
    """Returns (d_fe, d_fs, d_fg, d_w, d_b)."""
    x = np.concatenate([fe, fs, fg], axis=2)
    dx, dw, db = nn.conv2d_backward(dout, x, w)
    ce, cs = fe.shape[2], fs.shape[2]
    return dx[:, :, :ce], dx[:, :, ce:ce + cs], dout + dx[:, :, ce + cs:], dw, db


def upscale(volume, w, b):
    """4x4 stride-2 transposed convolution: (H, W, C) -> (2H, 2W, C/2)."""
    if w.shape[:3] != (4, 4, volume.shape[2]):
        raise ValueError(f"upscale kernel {w.shape} does not fit input {volume.shape}")
    return nn.conv_transpose2d(volume, w, b, stride=2, pad=1)


def upscale_backward(dout, volume, w):
    return nn.conv_transpose2d_backward(dout, volume, w, stride=2, pad=1)


def project(g, w, b):
    return nn.conv2d(g, w, b, pad=0)


def n_blocks_in(weights):
    n = 0
    while f"ff.1x.{n}.w" in weights:
        n += 1
    return n


def msffm_forward(fe_by_scale, fs_by_scale, fg_1x, weights):
    """Fuse per-scale transferred features with the backbone feature, coarse to fine.

    Returns ``(heatmaps, cache)``; heatmaps are (H, W, M+P) in [0, 1].
    """
    n_blocks = n_blocks_in(weights)
    cache = {"blocks": [], "ups": []}
    g = fg_1x
    for si, s in enumerate(SCALES):
        fe, fs = fe_by_scale[s], fs_by_scale[s]
        for blk in range(n_blocks):
            cache["blocks"].append((s, blk, g))
            g = ff_block(fe, fs, g, weights[f"ff.{s}.{blk}.w"], weights[f"ff.{s}.{blk}.b"])
        if si < len(SCALES) - 1:
            cache["ups"].append(g)
            g = upscale(g, weights[f"up.{si}.w"], weights[f"up.{si}.b"])
    cache["pre_projection"] = g
    y = nn.sigmoid(project(g, weights["proj.w"], weights["proj.b"]))
    cache["out"] = y
    return y, cache


def msffm_backward(dout, cache, fe_by_scale, fs_by_scale, weights):
    """Returns (d_fe_by_scale, d_fs_by_scale, d_fg_1x, grads)."""
    grads = {}
    dz = nn.sigmoid_backward(dout, cache["out"])
    dg, grads["proj.w"], grads["proj.b"] = nn.conv2d_backward(dz, cache["pre_projection"], weights["proj.w"], pad=0)
    dfe = {s: np.zeros_like(fe_by_scale[s]) for s in SCALES}
    dfs = {s: np.zeros_like(fs_by_scale[s]) for s in SCALES}
    blocks = list(cache["blocks"])
    for si in reversed(range(len(SCALES))):
        s = SCALES[si]
        if si < len(SCALES) - 1:
            dg, grads[f"up.{si}.w"], grads[f"up.{si}.b"] = upscale_backward(dg, cache["ups"][si], weights[f"up.{si}.w"])
        while blocks and blocks[-1][0] == s:
            _, blk, g_in = blocks.pop()
            de, ds, dg, grads[f"ff.{s}.{blk}.w"], grads[f"ff.{s}.{blk}.b"] = ff_block_backward(
                dg, fe_by_scale[s], fs_by_scale[s], g_in, weights[f"ff.{s}.{blk}.w"])
            dfe[s] += de
            dfs[s] += ds
    return dfe, dfs, dg, grads
