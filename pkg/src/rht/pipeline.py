"""End-to-end forward/backward: backbone stub, soft + hard transfer per scale, fusion, losses.

Parameters live in one flat ``{name: array}`` dict so checkpointing, SGD and
finite-difference checks can treat them uniformly:

    backbone.conv{s}.{w,b,g}      image -> F_G at 1x
    qk.{scale}.conv{s}.{w,b,g}    image -> F_Q (target) / F_K (reference), shared
    v.{scale}.conv{s}.{w,b,g}     reference heatmaps -> F_V
    loc.{scale}.*                 localization head -> 2x3 transform
    fusion.*                      feature fusion blocks, upscaling, projection
"""

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import fusion, htm, losses, stm
from .heatmaps import BoundaryDefinition, LandmarkSet, render_heatmaps

SCALES = stm.SCALES


class PipelineError(ValueError):
    """A shape or contract failure, tagged with the stage that raised it."""

    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage


class TrainingDiverged(RuntimeError):
    def __init__(self, trace):
        super().__init__(f"loss rose above 10x its initial value ({trace[-1]:.6g} vs {trace[0]:.6g})")
        self.trace = trace


@dataclass
class ModelConfig:
    n_landmarks: int = 5
    n_boundaries: int = 2
    table: str = "quarter"
    lam: float = losses.DEFAULT_LAMBDA
    sigma: float = 1.5
    patch: int = stm.DEFAULT_PATCH
    seed: int = 0
    ff_blocks: int = 1
    identity_htm: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if self.table not in fusion.TABLES:
            raise ValueError(f"unknown scale table {self.table!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def scale_table(self):
        return fusion.TABLES[self.table]

    @property
    def n_channels(self):
        return self.n_landmarks + self.n_boundaries

    def to_json(self):
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def init_params(config):
    rng = np.random.default_rng(config.seed)
    t = config.scale_table
    hidden = tuple(t.extractor_widths)
    params = {}

    def add(prefix, d):
        for k, v in d.items():
            params[f"{prefix}.{k}"] = v

    add("backbone", stm.init_extractor(rng, 3, hidden + (t.channels("1x"),)))
    for s in SCALES:
        c = t.channels(s)
        add(f"qk.{s}", stm.init_extractor(rng, 3, hidden + (c,)))
        add(f"v.{s}", stm.init_extractor(rng, config.n_channels, hidden + (c,)))
        add(f"loc.{s}", htm.init_localization(rng, 2 * c, t.side(s), t.head_widths, t.head_hidden,
                                              identity=config.identity_htm))
    add("fusion", fusion.init_fusion(rng, t, config.n_channels, config.ff_blocks))
    dt = np.dtype(config.dtype)
    return {k: v.astype(dt) for k, v in params.items()}


def subset(params, prefix):
    p = prefix + "."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except PipelineError:
        raise
    except (ValueError, IndexError, KeyError) as e:
        raise PipelineError(name, e) from e


def forward(target_image, reference_image, reference_heatmaps, params, config, frozen=None, workers=None):
    """Predict heatmaps for the target given an annotated reference.

    ``frozen`` may carry ``{scale: CorrelationArtifacts}`` from an earlier
    pass to hold the index and attention matrices fixed (used by gradient
    checks).  Returns ``(heatmaps, intermediates)``.
    """
    dt = np.dtype(config.dtype)
    t = config.scale_table
    tgt = np.asarray(target_image, dtype=dt)
    ref = np.asarray(reference_image, dtype=dt)
    ref_hm = np.asarray(getattr(reference_heatmaps, "data", reference_heatmaps), dtype=dt)
    if tgt.ndim == 2:
        tgt = np.repeat(tgt[:, :, None], 3, axis=2)
    if ref.ndim == 2:
        ref = np.repeat(ref[:, :, None], 3, axis=2)
    side = t.image_size
    for name, arr, c in (("target image", tgt, 3), ("reference image", ref, 3),
                         ("reference heatmaps", ref_hm, config.n_channels)):
        if arr.shape != (side, side, c):
            raise PipelineError("input", f"{name} has shape {arr.shape}, expected {(side, side, c)}")

    inter = {"inputs": (tgt, ref, ref_hm), "scales": {}, "config": config}
    fg, inter["backbone"] = _stage("backbone", stm.extractor_forward, tgt, subset(params, "backbone"), "1x")
    if fg.shape != (t.side("1x"), t.side("1x"), t.channels("1x")):
        raise PipelineError("backbone", f"output {fg.shape} does not match the 1x scale")
    inter["fg"] = fg

    fe_by, fs_by = {}, {}
    for s in SCALES:
        rec = {}
        qk, vw = subset(params, f"qk.{s}"), subset(params, f"v.{s}")
        rec["fq"], rec["fq_cache"] = _stage(f"extractor[{s}] target", stm.extractor_forward, tgt, qk, s)
        rec["fk"], rec["fk_cache"] = _stage(f"extractor[{s}] reference", stm.extractor_forward, ref, qk, s)
        rec["fv"], rec["fv_cache"] = _stage(f"extractor[{s}] heatmaps", stm.extractor_forward, ref_hm, vw, s)
        if frozen is not None:
            art = frozen[s]
            fs = _stage(f"stm[{s}]", stm.soft_transfer, rec["fv"], art)
        else:
            fs, art = _stage(f"stm[{s}]", stm.stm_forward, rec["fq"], rec["fk"], rec["fv"], config.patch, workers)
        theta, rec["loc_cache"] = _stage(f"htm[{s}] localization", htm.localization_forward,
                                         rec["fq"], rec["fk"], subset(params, f"loc.{s}"))
        grid = _stage(f"htm[{s}] grid", htm.affine_grid, theta, rec["fv"].shape[:2])
        fe = _stage(f"htm[{s}] sampling", htm.bilinear_sample, rec["fv"], grid).astype(dt, copy=False)
        rec.update(art=art, theta=theta, grid=grid, fs=fs, fe=fe,
                   attention_hist=np.histogram(art.A, bins=10, range=(-1.0, 1.0))[0])
        inter["scales"][s] = rec
        fe_by[s], fs_by[s] = fe, fs

    pred, inter["fusion"] = _stage("msffm", fusion.msffm_forward, fe_by, fs_by, fg, subset(params, "fusion"))
    inter["pred"] = pred
    return pred, inter


def frozen_artifacts(inter):
    return {s: stm.CorrelationArtifacts(r["art"].D.copy(), r["art"].A.copy()) for s, r in inter["scales"].items()}


def _truth_args(truth, visibility, config):
    data = np.asarray(getattr(truth, "data", truth))
    if visibility is None:
        visibility = np.ones(config.n_landmarks)
    return data, np.asarray(visibility).reshape(-1)


def compute_loss(inter, truth, visibility=None):
    config = inter["config"]
    data, vis = _truth_args(truth, visibility, config)
    l1 = losses.heatmap_loss(inter["pred"], data, vis, config.n_landmarks)
    l2 = float(np.mean([losses.consistency_loss(r["fe"], r["fs"], r["art"].A) for r in inter["scales"].values()]))
    return losses.overall_loss(l1, l2, config.lam)


def backward(inter, truth, params, visibility=None):
    """Gradient of the overall loss for every trainable tensor (D and A held fixed)."""
    if not inter or "fusion" not in inter:
        raise PipelineError("backward", "missing intermediates; run forward first")
    config = inter["config"]
    data, vis = _truth_args(truth, visibility, config)
    grads = {}

    def put(prefix, g):
        for k, v in g.items():
            grads[f"{prefix}.{k}"] = v

    dpred = losses.heatmap_loss_grad(inter["pred"], data, vis, config.n_landmarks)
    fe_by = {s: r["fe"] for s, r in inter["scales"].items()}
    fs_by = {s: r["fs"] for s, r in inter["scales"].items()}
    dfe, dfs, dfg, g = fusion.msffm_backward(dpred, inter["fusion"], fe_by, fs_by, subset(params, "fusion"))
    put("fusion", g)

    tgt, ref, ref_hm = inter["inputs"]
    n_scales = len(inter["scales"])
    for s, r in inter["scales"].items():
        if config.lam:
            ce, cs = losses.consistency_loss_grad(r["fe"], r["fs"], r["art"].A)
            dfe[s] = dfe[s] + config.lam / n_scales * ce
            dfs[s] = dfs[s] + config.lam / n_scales * cs
        dfv = stm.soft_transfer_backward(dfs[s], r["art"], r["fv"].shape)
        dv, dgrid = htm.bilinear_sample_backward(dfe[s], r["fv"], r["grid"])
        dfv = dfv + dv
        dtheta = htm.affine_grid_backward(dgrid, r["fv"].shape[:2])
        dfq, dfk, g = htm.localization_backward(dtheta, r["loc_cache"], subset(params, f"loc.{s}"))
        put(f"loc.{s}", g)
        qk = subset(params, f"qk.{s}")
        _, gq = stm.extractor_backward(dfq, r["fq_cache"], qk)
        _, gk = stm.extractor_backward(dfk, r["fk_cache"], qk)
        put(f"qk.{s}", {k: gq[k] + gk[k] for k in gq})
        _, g = stm.extractor_backward(dfv, r["fv_cache"], subset(params, f"v.{s}"))
        put(f"v.{s}", g)
    _, g = stm.extractor_backward(dfg, inter["backbone"], subset(params, "backbone"))
    put("backbone", g)
    return grads


def sgd_step(params, grads, lr):
    """Plain gradient descent; tensors without a gradient are carried over untouched."""
    return {k: (v - lr * grads[k]) if k in grads else v for k, v in params.items()}


@dataclass
class Sample:
    target_image: np.ndarray
    reference_image: np.ndarray
    reference_heatmaps: np.ndarray
    truth: np.ndarray
    visibility: np.ndarray
    landmarks: LandmarkSet = field(repr=False, default=None)


def _face_image(rng, side, pts):
    """Textured synthetic image with bright blobs at the landmark positions."""
    ys, xs = np.mgrid[0:side, 0:side].astype(np.float64)
    img = 0.15 * rng.random((side, side, 3)) + 0.2
    for x, y in pts:
        img += 0.6 * np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2 * (side / 16) ** 2))[:, :, None] * rng.uniform(0.5, 1.0, 3)
    return np.clip(img, 0.0, 1.0)


def default_boundaries(config):
    if config.n_boundaries == 0:
        return BoundaryDefinition([])
    if config.n_landmarks == 68 and config.n_boundaries == 13:
        from .dataio import W300_68
        return W300_68.boundary_definition()
    if config.n_landmarks < config.n_boundaries + 1:
        raise ValueError("need at least P + 1 landmarks for the default chained boundaries")
    return BoundaryDefinition([[p, p + 1] for p in range(config.n_boundaries)])


def synthetic_sample(config, seed=None):
    """One target/reference pair at the configured resolution with rendered targets."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    side = config.scale_table.image_size
    margin = side * 0.2
    pts = rng.uniform(margin, side - 1 - margin, size=(config.n_landmarks, 2))
    ref_pts = np.clip(pts + rng.normal(0.0, side / 40, size=pts.shape), 0, side - 1)
    bounds = default_boundaries(config)
    lm, ref_lm = LandmarkSet(pts), LandmarkSet(ref_pts)
    truth = render_heatmaps(lm, bounds, (side, side), config.sigma).data
    ref_hm = render_heatmaps(ref_lm, bounds, (side, side), config.sigma).data
    return Sample(_face_image(rng, side, pts), _face_image(rng, side, ref_pts), ref_hm, truth,
                  np.ones(config.n_landmarks), lm)


def gradcheck_instance(config, seed=0, residual=0.01):
    """Random inputs, parameters and a nearby target for finite-difference checks.

    Every localization head gets a random last layer and a quarter-pixel
    translation, keeping bilinear sample points off integer coordinates.
    Targets sit ``residual`` away from the prediction so rounding noise in
    the loss stays small next to the gradients.  Returns (inputs, params, truth).
    """
    cfg = ModelConfig(**{**asdict(config), "identity_htm": False, "seed": seed})
    params = init_params(cfg)
    t = cfg.scale_table
    for s in SCALES:
        side = t.side(s)
        shift = 0.5 / (side - 1)
        params[f"loc.{s}.fc1.b"] = params[f"loc.{s}.fc1.b"] + np.array([0, 0, shift, 0, 0, shift])
    rng = np.random.default_rng(seed + 1000)
    n = t.image_size
    inputs = (rng.random((n, n, 3)), rng.random((n, n, 3)), rng.random((n, n, cfg.n_channels)))
    pred, _ = forward(*inputs, params, cfg)
    return inputs, params, pred + residual * rng.normal(size=pred.shape)


def overfit_single(sample, config, steps=50, lr=1e-3, params=None, workers=None):
    """Fit one sample with plain gradient descent; returns the overall loss per step.

    Each entry is the loss at the parameters used for that step's update,
    followed by the loss after the final update.
    """
    params = init_params(config) if params is None else params
    trace = []
    for _ in range(steps + 1):
        _, inter = forward(sample.target_image, sample.reference_image, sample.reference_heatmaps,
                           params, config, workers=workers)
        loss = compute_loss(inter, sample.truth, sample.visibility).overall
        trace.append(loss)
        if not np.isfinite(loss) or loss > 10 * trace[0]:
            raise TrainingDiverged(trace)
        if len(trace) == steps + 1:
            break
        params = sgd_step(params, backward(inter, sample.truth, params, sample.visibility), lr)
    return trace, params


def save_checkpoint(directory, params, config):
    """Write ``params.rhm`` (+ JSON manifest) and ``config.json`` into ``directory``."""
    from . import rhm
    os.makedirs(directory, exist_ok=True)
    rhm.write_named(os.path.join(directory, "params.rhm"), params)
    with open(os.path.join(directory, "config.json"), "w") as f:
        f.write(config.to_json() + "\n")


def load_checkpoint(directory):
    from . import rhm
    with open(os.path.join(directory, "config.json")) as f:
        config = ModelConfig.from_json(f.read())
    params = rhm.read_named(os.path.join(directory, "params.rhm"))
    expected = init_params(config)
    missing = sorted(set(expected) - set(params))
    if missing:
        raise ValueError(f"checkpoint lacks tensors {missing[:5]}")
    for k, v in expected.items():
        if params[k].shape != v.shape:
            raise ValueError(f"checkpoint tensor {k} has shape {params[k].shape}, expected {v.shape}")
    return params, config
