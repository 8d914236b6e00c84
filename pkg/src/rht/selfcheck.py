"""Invariant battery: oracle equivalences, identities, gradient checks, round-trips.

``run_battery`` yields ``(name, ok, detail)`` per item; the CLI prints them.
"""

import io
import time

import numpy as np

from . import fusion, gradcheck, htm, losses, metrics, nn, pipeline, rhm, stm
from .dataio import format_pts, parse_pts
from .heatmaps import LandmarkSet, decode_heatmaps, render_landmark_heatmaps


def _probe(rng, shape):
    return rng.normal(size=shape)


def kernel_gradient_checks(rng, perturb=None):
    """FD checks of every differentiable kernel on small random 64-bit instances.

    Each kernel is reduced to a scalar by a fixed random projection of its
    output.  ``perturb(name, array)`` is called after the analytic gradient
    is taken and before finite differences, to verify the harness notices a
    stale gradient.
    """
    results = []

    def run(name, f, arrays, grads):
        for key, x in arrays.items():
            if perturb is not None:
                perturb(f"{name}.{key}", x)
            results.append(gradcheck.check(f"{name}.{key}", f, x, grads[key]))

    # extractor: conv -> per-channel affine -> ReLU, two stages incl. stride 2
    x = rng.random((8, 8, 3))
    w = stm.init_extractor(rng, 3, (4, 5))
    for k in w:
        if k.endswith(".g") or k.endswith(".b"):
            w[k] = w[k] + rng.normal(0.0, 0.1, size=w[k].shape)
    y, cache = stm.extractor_forward(x, w, "2x")
    R = _probe(rng, y.shape)
    dx, gw = stm.extractor_backward(R, cache, w)
    run("extractor", lambda: float((stm.extractor_forward(x, w, "2x")[0] * R).sum()), {"x": x, **w}, {"x": dx, **gw})

    # bilinear sampling w.r.t. values and theta; quarter-pixel offset keeps samples off integers
    v = rng.random((6, 6, 2))
    theta = htm.IDENTITY + np.array([[0.02, -0.03, 0.1], [0.01, 0.03, -0.1]])
    R = _probe(rng, (6, 6, 2))
    grid = htm.affine_grid(theta, (6, 6))
    dv, dgrid = htm.bilinear_sample_backward(R, v, grid)
    dtheta = htm.affine_grid_backward(dgrid, (6, 6))
    run("bilinear", lambda: float((htm.warp(v, theta) * R).sum()), {"values": v, "theta": theta},
        {"values": dv, "theta": dtheta})

    # localization head
    t, r = rng.random((8, 8, 2)), rng.random((8, 8, 2))
    lw = htm.init_localization(rng, 4, 8, (3, 3), 5, identity=False)
    th, lc = htm.localization_forward(t, r, lw)
    R = _probe(rng, (2, 3))
    dt, dr, gl = htm.localization_backward(R, lc, lw)
    run("localization", lambda: float((htm.estimate_affine(t, r, lw) * R).sum()),
        {"target": t, "reference": r, **lw}, {"target": dt, "reference": dr, **gl})

    # soft transfer w.r.t. values, D and A fixed
    fv = rng.random((4, 4, 3))
    art = stm.CorrelationArtifacts(rng.integers(0, 16, size=16), rng.uniform(-1, 1, size=16))
    R = _probe(rng, fv.shape)
    run("soft_transfer", lambda: float((stm.soft_transfer(fv, art) * R).sum()), {"values": fv},
        {"values": stm.soft_transfer_backward(R, art, fv.shape)})

    # feature-fusion block
    fe, fs, fg = rng.random((6, 6, 2)), rng.random((6, 6, 2)), rng.random((6, 6, 2))
    fw, fb = rng.normal(0.0, 0.3, size=(3, 3, 6, 2)), rng.normal(size=2)
    R = _probe(rng, fg.shape)
    g = fusion.ff_block_backward(R, fe, fs, fg, fw)
    run("ff_block", lambda: float((fusion.ff_block(fe, fs, fg, fw, fb) * R).sum()),
        {"fe": fe, "fs": fs, "fg": fg, "w": fw, "b": fb}, dict(zip(("fe", "fs", "fg", "w", "b"), g)))

    # transposed-convolution upscale
    u = rng.random((6, 6, 4))
    uw, ub = rng.normal(0.0, 0.3, size=(4, 4, 4, 2)), rng.normal(size=2)
    R = _probe(rng, (12, 12, 2))
    g = fusion.upscale_backward(R, u, uw)
    run("upscale", lambda: float((fusion.upscale(u, uw, ub) * R).sum()), {"x": u, "w": uw, "b": ub},
        dict(zip(("x", "w", "b"), g)))

    # 1x1 projection + logistic
    h = rng.random((6, 6, 3))
    pw, pb = rng.normal(size=(1, 1, 3, 2)), rng.normal(size=2)
    R = _probe(rng, (6, 6, 2))
    y = nn.sigmoid(fusion.project(h, pw, pb))
    g = nn.conv2d_backward(nn.sigmoid_backward(R, y), h, pw, pad=0)
    run("projection", lambda: float((nn.sigmoid(fusion.project(h, pw, pb)) * R).sum()), {"x": h, "w": pw, "b": pb},
        dict(zip(("x", "w", "b"), g)))

    # heatmap loss (two images, one invisible landmark)
    preds = [rng.random((5, 5, 3)), rng.random((5, 5, 3))]
    truths = [rng.random((5, 5, 3)), rng.random((5, 5, 3))]
    vis = [np.array([1, 0]), np.array([1, 1])]
    g = losses.heatmap_loss_grad(preds, truths, vis, 2)
    run("heatmap_loss", lambda: losses.heatmap_loss(preds, truths, vis, 2),
        {"pred0": preds[0], "pred1": preds[1]}, {"pred0": g[0], "pred1": g[1]})

    # consistency loss, differences kept >= 1e-3 away from the kink
    fe = rng.random((4, 4, 2))
    A = rng.uniform(0.2, 1.0, size=16)
    diff = rng.uniform(1e-2, 0.5, size=fe.shape) * rng.choice([-1.0, 1.0], size=fe.shape)
    fs = fe * A.reshape(4, 4, 1) - diff
    de, ds = losses.consistency_loss_grad(fe, fs, A)
    run("consistency_loss", lambda: losses.consistency_loss(fe, fs, A), {"fe": fe, "fs": fs}, {"fe": de, "fs": ds})
    return results


def pipeline_gradient_check(config=None, seed=0, per_tensor=2, perturb=None):
    """Spot-check every trainable tensor of the full quarter-scale pipeline."""
    config = config or pipeline.ModelConfig()
    inputs, params, truth = pipeline.gradcheck_instance(config, seed)
    cfg = pipeline.ModelConfig(**{**config.__dict__, "identity_htm": False, "seed": seed})
    _, inter = pipeline.forward(*inputs, params, cfg)
    grads = pipeline.backward(inter, truth, params)
    frozen = pipeline.frozen_artifacts(inter)
    if perturb is not None:
        perturb(params)

    def loss():
        _, it = pipeline.forward(*inputs, params, cfg, frozen=frozen)
        return pipeline.compute_loss(it, truth).overall

    return gradcheck.check_params(loss, params, grads, np.random.default_rng(seed), per_tensor)


def _correlation_oracle(rng, n_instances):
    worst = 0.0
    for _ in range(n_instances):
        h, w = rng.integers(2, 9, size=2)
        c = int(rng.integers(1, 5))
        k = int(rng.choice([1, 3]))
        q = stm.l2_normalize(stm.unfold(rng.normal(size=(h, w, c)), k))
        kr = stm.l2_normalize(stm.unfold(rng.normal(size=(h, w, c)), k))
        fast = stm.correlate(q, kr, block=7, workers=2)
        slow = stm.correlate_naive(q, kr)
        if not np.array_equal(fast.D, slow.D):
            return False, "index mismatch"
        worst = max(worst, np.abs(fast.C - slow.C).max(), np.abs(fast.A - slow.A).max())
    return worst <= 1e-6, f"max |diff| {worst:.1e} over {n_instances} instances"


def _self_reference(rng):
    cfg = pipeline.ModelConfig()
    params = pipeline.init_params(cfg)
    n = cfg.scale_table.image_size
    img = rng.random((n, n, 3))
    _, inter = pipeline.forward(img, img, rng.random((n, n, cfg.n_channels)), params, cfg)
    worst = 0.0
    for r in inter["scales"].values():
        if not np.array_equal(r["art"].D, np.arange(r["art"].n)):
            return False, "index matrix is not the identity"
        worst = max(worst, np.abs(r["art"].A - 1).max(), np.abs(r["fs"] - r["fv"]).max(),
                    np.abs(r["fe"] - r["fv"]).max())
    l2 = float(np.mean([losses.consistency_loss(r["fe"], r["fs"], r["art"].A) for r in inter["scales"].values()]))
    return worst <= 1e-6 and l2 <= 1e-9, f"max dev {worst:.1e}, L2 {l2:.1e}"


def _affine(rng):
    v = rng.random((9, 7, 3))
    ident = np.abs(htm.warp(v, htm.IDENTITY) - v).max()
    ys, xs = np.mgrid[0:32, 0:32].astype(float)
    smooth = np.exp(-((xs - 15.5) ** 2 + (ys - 15.5) ** 2) / (2 * 8.0 ** 2))[:, :, None]
    worst = 0.0
    for s in (0.8, 0.9, 1.1, 1.25):
        out = htm.warp(htm.warp(smooth, np.diag([s, s, 0])[:2]), np.diag([1 / s, 1 / s, 0])[:2])
        mask = _composition_interior(32, s)
        worst = max(worst, np.abs(out - smooth)[mask].max())
    return ident <= 1e-12 and worst <= 1e-2, f"identity {ident:.1e}, composition {worst:.1e}"


def _composition_interior(n, s, band=2):
    """Pixels >= band from the border whose intermediate sample stays inside the grid."""
    u = np.linspace(-1, 1, n)
    inside = np.abs(u / s) <= 1.0
    keep = np.zeros(n, bool)
    keep[band:n - band] = True
    ok = inside & keep
    return ok[:, None] & ok[None, :]


def _round_trip(rng):
    worst = 0.0
    for _ in range(50):
        p = rng.uniform(0, 31, size=(1, 2))
        st = render_landmark_heatmaps(LandmarkSet(p), (32, 32), 1.5)
        worst = max(worst, np.abs(decode_heatmaps(st).points - p).max())
    return worst <= 0.2, f"max error {worst:.2e} px"


def _metrics():
    ok = metrics.nme([[3, 4], [0, 0]], [[0, 0], [0, 0]], 10.0) == 0.25
    ok &= metrics.failure_rate([0.05, 0.15], 0.1) == 0.5
    ok &= metrics.auc(metrics.cumulative_curve([0.0, 0.0], 0.07)) == 1.0
    return bool(ok), "3-4-5 NME, FR, constant-curve AUC"


def _loss_composition():
    rep = losses.overall_loss(1.0, 2.0, 0.1)
    return rep.overall == 1.0 + 0.1 * 2.0, f"overall {rep.overall!r}"


def _overfit():
    cfg = pipeline.ModelConfig()
    trace, _ = pipeline.overfit_single(pipeline.synthetic_sample(cfg), cfg, 50, 1e-3)
    return trace[-1] < 0.5 * trace[0], f"loss {trace[0]:.4g} -> {trace[-1]:.4g}"


def _formats(rng):
    arr = rng.normal(size=(3, 4, 2))
    b = rhm.encode(arr)
    ok = rhm.encode(rhm.decode(b)[0]) == b
    text = format_pts(parse_pts(format_pts(rng.uniform(0, 100, size=(5, 2)))))
    ok &= format_pts(parse_pts(text)) == text
    return bool(ok), "RHM1 and .pts byte-identical"


def run_battery(seed=0, quick=False):
    rng = np.random.default_rng(seed)
    items = [
        ("correlation oracle", lambda: _correlation_oracle(rng, 10 if quick else 40)),
        ("self-reference identity", lambda: _self_reference(rng)),
        ("affine identity/composition", lambda: _affine(rng)),
        ("render/decode round-trip", lambda: _round_trip(rng)),
        ("metric golden values", _metrics),
        ("loss composition", _loss_composition),
        ("format round-trips", lambda: _formats(rng)),
    ]
    for res in kernel_gradient_checks(rng):
        items.append((f"gradient {res.name}", lambda res=res: (res.ok, f"max rel err {res.max_rel_error:.1e}")))
    items.append(("gradient pipeline", lambda: _pipeline_grad(seed, 1 if quick else 2)))
    if not quick:
        items.append(("overfit smoke test", _overfit))
    for name, fn in items:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as e:  # a crash is a failed item, not an aborted battery
            ok, detail = False, f"{type(e).__name__}: {e}"
        yield name, bool(ok), f"{detail} ({time.perf_counter() - t0:.2f}s)"


def _pipeline_grad(seed, per_tensor):
    res = pipeline_gradient_check(seed=seed, per_tensor=per_tensor)
    bad = [r.name for r in res if not r.ok]
    worst = max(r.max_rel_error for r in res)
    return not bad, f"max rel err {worst:.1e} over {len(res)} tensors" + (f"; failing {bad}" if bad else "")


def render_report(rows):
    out = io.StringIO()
    for name, ok, detail in rows:
        out.write(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}\n")
    return out.getvalue()
