"""Command-line entry point: ``rht <command> [flags]``.

Exit codes: 0 success, 1 input error (bad flags, unreadable or inconsistent
files), 2 internal failure.  With ``--json`` every result line on stdout is
a JSON object.
"""

import argparse
import csv
import glob
import json
import os
import sys

import numpy as np

from . import dataio, heatmaps, htm, metrics, pipeline, rhm, selfcheck


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise InputError(message)


class _Out:
    def __init__(self, as_json):
        self.as_json = as_json

    def emit(self, text, **fields):
        if self.as_json:
            print(json.dumps(fields, sort_keys=True))
        else:
            print(text)


# ---------------------------------------------------------------------------
# helpers


def _convention_from_file(path, n_landmarks):
    if path is None:
        return dataio.default_convention(n_landmarks)
    with open(path) as f:
        raw = json.load(f)
    if "convention" in raw:
        raw = raw["convention"]
    raw.setdefault("n_landmarks", n_landmarks)
    conv = dataio.Convention.from_dict(raw)
    if conv.n_landmarks != n_landmarks:
        raise InputError(f"boundary convention is for {conv.n_landmarks} landmarks, annotation has {n_landmarks}")
    return conv


def _resize(image, side):
    """Bilinear resample to side x side with corner pixels aligned."""
    image = np.asarray(image, dtype=np.float64)
    H, W = image.shape[:2]
    if (H, W) == (side, side):
        return image
    vals = image if image.ndim == 3 else image[:, :, None]
    ys, xs = np.meshgrid(np.linspace(0, H - 1, side), np.linspace(0, W - 1, side), indexing="ij")
    out = htm.bilinear_sample(vals, np.stack([xs, ys], axis=-1))
    return out if image.ndim == 3 else out[:, :, 0]


def _rescale_points(points, src_hw, side):
    H, W = src_hw
    return np.asarray(points, dtype=np.float64) * [(side - 1) / max(W - 1, 1), (side - 1) / max(H - 1, 1)]


def _load_model(args, n_landmarks, n_boundaries):
    if args.checkpoint:
        params, config = pipeline.load_checkpoint(args.checkpoint)
        if (config.n_landmarks, config.n_boundaries) != (n_landmarks, n_boundaries):
            raise InputError(f"checkpoint expects {config.n_landmarks}+{config.n_boundaries} channels, "
                             f"reference has {n_landmarks}+{n_boundaries}")
        return params, config
    config = pipeline.ModelConfig(n_landmarks=n_landmarks, n_boundaries=n_boundaries, table=args.table,
                                  seed=args.seed)
    return pipeline.init_params(config), config


def _transfer_inputs(args):
    ann = dataio.read_pts(args.ref_pts)
    conv = _convention_from_file(args.boundaries, ann.n_points)
    table = pipeline.fusion.TABLES[args.table]
    side = table.image_size
    target = dataio.to_color(dataio.read_image(args.target))
    reference = dataio.to_color(dataio.read_image(args.reference))
    ref_pts = _rescale_points(ann.points, reference.shape[:2], side)
    ref_hm = heatmaps.render_heatmaps(heatmaps.LandmarkSet(ref_pts), conv.boundary_definition(), (side, side),
                                      args.sigma)
    return (_resize(target, side), _resize(reference, side), ref_hm.data), ann.n_points, len(conv.boundaries), \
        target.shape[:2]


# ---------------------------------------------------------------------------
# commands


def cmd_render(args, out):
    if not args.sigma > 0:
        raise InputError(f"--sigma must be positive, got {args.sigma}")
    if args.size < 1:
        raise InputError(f"--size must be positive, got {args.size}")
    ann = dataio.read_pts(args.pts)
    conv = _convention_from_file(args.boundaries, ann.n_points)
    pts = ann.points
    if args.image_size:
        w, h = args.image_size
        pts = _rescale_points(pts, (h, w), args.size)
    stack = heatmaps.render_heatmaps(heatmaps.LandmarkSet(pts), conv.boundary_definition(), (args.size, args.size),
                                     args.sigma)
    rhm.write(args.out, stack.data)
    H, W, C = stack.shape
    out.emit(f"wrote {args.out}: {H}x{W}x{C} ({ann.n_points} landmarks, {len(conv.boundaries)} boundaries)",
             command="render", out=args.out, shape=[H, W, C], landmarks=ann.n_points,
             boundaries=len(conv.boundaries))
    return 0


def cmd_visualize(args, out):
    data = rhm.read(args.input)
    if not 0 <= args.channel < data.shape[2]:
        raise InputError(f"--channel {args.channel} outside [0, {data.shape[2]})")
    ch = data[:, :, args.channel]
    lo = 0.0 if args.floor_zero else float(ch.min())
    span = float(ch.max()) - lo
    img = np.zeros_like(ch) if span <= 0 else (ch - lo) / span
    img = np.clip(img, 0.0, 1.0)
    dataio.write_image(args.out, img)
    out.emit(f"wrote {args.out} from channel {args.channel}", command="visualize", out=args.out,
             channel=args.channel, max=int(np.round(img.max() * 255)))
    return 0


def _pts_by_stem(directory):
    if not os.path.isdir(directory):
        raise InputError(f"{directory} is not a directory")
    return {os.path.splitext(os.path.basename(p))[0]: p for p in sorted(glob.glob(os.path.join(directory, "*.pts")))}


def cmd_evaluate(args, out):
    preds, truths = _pts_by_stem(args.pred_dir), _pts_by_stem(args.truth_dir)
    only_pred = sorted(set(preds) - set(truths))
    only_truth = sorted(set(truths) - set(preds))
    if only_pred or only_truth:
        raise InputError(f"unmatched stems: predictions only {only_pred}, ground truth only {only_truth}")
    if not preds:
        raise InputError("no .pts files to evaluate")
    names = sorted(preds)
    P = [dataio.read_pts(preds[n]).points for n in names]
    T = [dataio.read_pts(truths[n]).points for n in names]
    for n, p, t in zip(names, P, T):
        if p.shape != t.shape:
            raise InputError(f"{n}: prediction has {len(p)} points, ground truth {len(t)}")
    boxes, conv = {}, dataio.default_convention(len(T[0]))
    if args.manifest:
        man = dataio.load_manifest(args.manifest, check_paths=False)
        boxes, conv = man.boxes(), man.convention
    norms = []
    for n in names:
        box = boxes.get(n)
        if args.norm == "box_geomean" and box is None:
            raise InputError(f"box_geomean normalization needs a box for {n!r} in --manifest")
        try:
            norms.append(metrics.NormalizationSpec(
                args.norm, pupils=conv.pupils, corners=conv.eye_corners,
                box=None if box is None else (box[2], box[3])))
        except ValueError as e:
            raise InputError(str(e)) from None
    report = metrics.evaluate(names, P, T, norms, args.cutoff, args.threshold)
    curve = args.curve or os.path.splitext(args.report)[0] + "_curve.csv"
    report.write(args.report, curve)
    out.emit(f"NME {report.mean_nme:.6f}  AUC@{args.cutoff} {report.auc:.6f}  FR@{args.threshold} "
             f"{report.failure_rate:.6f}  ({len(names)} images)",
             command="evaluate", mean_nme=report.mean_nme, auc=report.auc, failure_rate=report.failure_rate,
             n_images=len(names), report=args.report, curve=curve)
    return 0


def cmd_selfcheck(args, out):
    failed = 0
    for name, ok, detail in selfcheck.run_battery(args.seed, quick=args.quick):
        failed += not ok
        out.emit(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}", item=name, ok=ok, detail=detail)
    out.emit(f"{'all checks passed' if not failed else f'{failed} check(s) failed'}", command="selfcheck",
             failed=failed)
    return 0 if not failed else 2


def cmd_transfer(args, out):
    inputs, M, P, _ = _transfer_inputs(args)
    params, config = _load_model(args, M, P)
    _, inter = pipeline.forward(*inputs, params, config)
    tensors = {}
    for s, r in inter["scales"].items():
        side = r["fs"].shape[0]
        tensors[f"fs.{s}"] = r["fs"]
        tensors[f"fe.{s}"] = r["fe"]
        tensors[f"theta.{s}"] = r["theta"]
        tensors[f"attention.{s}"] = r["art"].A.reshape(side, side)
        tensors[f"index.{s}"] = r["art"].D.reshape(side, side).astype(np.float64)
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, "transfer.rhm")
    manifest = rhm.write_named(path, tensors)
    out.emit(f"wrote {path} ({len(tensors)} tensors)", command="transfer", out=path, manifest=manifest,
             tensors=sorted(tensors),
             theta={s: r["theta"].ravel().tolist() for s, r in inter["scales"].items()})
    return 0


def cmd_fuse(args, out):
    inputs, M, P, target_hw = _transfer_inputs(args)
    params, config = _load_model(args, M, P)
    pred, inter = pipeline.forward(*inputs, params, config)
    rhm.write(args.out, pred)
    fields = {"command": "fuse", "out": args.out, "shape": list(pred.shape)}
    if args.out_pts:
        lm = heatmaps.decode_heatmaps(heatmaps.HeatmapStack(pred, M, args.sigma))
        side = pred.shape[0]
        H, W = target_hw
        pts = lm.points * [(W - 1) / (side - 1), (H - 1) / (side - 1)]
        dataio.write_pts(args.out_pts, dataio.PtsAnnotation(pts))
        fields["out_pts"] = args.out_pts
    out.emit(f"wrote {args.out}: {'x'.join(map(str, pred.shape))}", **fields)
    return 0


def cmd_overfit(args, out):
    if args.steps < 1:
        raise InputError("--steps must be at least 1")
    if not args.lr > 0:
        raise InputError("--lr must be positive")
    config = pipeline.ModelConfig(n_landmarks=args.landmarks, n_boundaries=args.n_boundaries, table=args.table,
                                  seed=args.seed)
    sample = pipeline.synthetic_sample(config)
    trace, params = pipeline.overfit_single(sample, config, args.steps, args.lr)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])
    if args.checkpoint:
        pipeline.save_checkpoint(args.checkpoint, params, config)
    out.emit(f"loss {trace[0]:.6g} -> {trace[-1]:.6g} over {args.steps} steps; trace in {args.out}",
             command="overfit", initial=trace[0], final=trace[-1], ratio=trace[-1] / trace[0], out=args.out)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    common.add_argument("--json", action="store_true", help="emit JSON lines on stdout")
    common.add_argument("--threads", type=int, help="worker cap; overrides RHT_THREADS")

    p = _Parser(prog="rht", description="Reference heatmap transformer tools")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("render", parents=[common], help="render landmark + boundary heatmaps to RHM1")
    r.add_argument("--pts", required=True)
    r.add_argument("--size", type=int, required=True, help="heatmap side in pixels")
    r.add_argument("--sigma", type=float, default=heatmaps.DEFAULT_SIGMA)
    r.add_argument("--boundaries", help="JSON convention or manifest with a boundaries list")
    r.add_argument("--image-size", type=int, nargs=2, metavar=("W", "H"),
                   help="frame of the .pts coordinates; omitted means the heatmap frame")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_render)

    v = sub.add_parser("visualize", parents=[common], help="write one RHM1 channel as a normalized PGM")
    v.add_argument("--in", dest="input", required=True)
    v.add_argument("--channel", type=int, default=0)
    v.add_argument("--floor-zero", action="store_true", help="map 0 (not the channel min) to black")
    v.add_argument("--out", required=True)
    v.set_defaults(fn=cmd_visualize)

    e = sub.add_parser("evaluate", parents=[common], help="NME / AUC / failure rate over paired .pts files")
    e.add_argument("--pred-dir", required=True)
    e.add_argument("--truth-dir", required=True)
    e.add_argument("--norm", choices=metrics.NORM_KINDS, default="interocular")
    e.add_argument("--manifest", help="dataset manifest supplying boxes and the landmark convention")
    e.add_argument("--report", required=True)
    e.add_argument("--curve", help="CSV for the cumulative error curve (default: <report>_curve.csv)")
    e.add_argument("--cutoff", type=float, default=metrics.DEFAULT_AUC_CUTOFF)
    e.add_argument("--threshold", type=float, default=metrics.DEFAULT_FAILURE_THRESHOLD)
    e.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("selfcheck", parents=[common], help="run the invariant battery")
    s.add_argument("--quick", action="store_true", help="fewer instances, no overfit smoke test")
    s.set_defaults(fn=cmd_selfcheck)

    for name, fn, helptext in (("transfer", cmd_transfer, "soft + hard transfer on an image pair"),
                               ("fuse", cmd_fuse, "full forward: predicted heatmaps for the target")):
        t = sub.add_parser(name, parents=[common], help=helptext)
        t.add_argument("--target", required=True, help="PGM/PPM target image")
        t.add_argument("--reference", required=True, help="PGM/PPM reference image")
        t.add_argument("--ref-pts", required=True, help="reference annotation")
        t.add_argument("--boundaries", help="JSON convention with a boundaries list")
        t.add_argument("--sigma", type=float, default=heatmaps.DEFAULT_SIGMA)
        t.add_argument("--table", choices=sorted(pipeline.fusion.TABLES), default="quarter")
        t.add_argument("--checkpoint", help="directory with params.rhm and config.json")
        if name == "transfer":
            t.add_argument("--out-dir", required=True)
        else:
            t.add_argument("--out", required=True)
            t.add_argument("--out-pts", help="also write decoded landmarks in target-image pixels")
        t.set_defaults(fn=fn)

    o = sub.add_parser("overfit", parents=[common], help="fit one synthetic sample and write the loss trace")
    o.add_argument("--steps", type=int, default=50)
    o.add_argument("--lr", type=float, default=1e-3)
    o.add_argument("--table", choices=sorted(pipeline.fusion.TABLES), default="quarter")
    o.add_argument("--landmarks", type=int, default=5)
    o.add_argument("--n-boundaries", type=int, default=2)
    o.add_argument("--checkpoint", help="save the fitted parameters here")
    o.add_argument("--out", required=True, help="CSV loss trace")
    o.set_defaults(fn=cmd_overfit)
    return p


def main(argv=None):
    parser = build_parser()
    as_json = "--json" in (sys.argv[1:] if argv is None else argv)
    out = _Out(as_json)
    try:
        args = parser.parse_args(argv)
        out = _Out(args.json)
        if args.threads is not None:
            if args.threads < 1:
                raise InputError("--threads must be at least 1")
            os.environ["RHT_THREADS"] = str(args.threads)
        return args.fn(args, out)
    except SystemExit as e:  # --help
        return e.code or 0
    except (InputError, ValueError, OSError, KeyError, json.JSONDecodeError) as e:
        msg = str(e) if not isinstance(e, KeyError) else f"missing key {e}"
        print(f"error: {msg}", file=sys.stderr)
        if out.as_json:
            print(json.dumps({"status": "error", "exit": 1, "message": msg}))
        return 1
    except Exception as e:
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        if out.as_json:
            print(json.dumps({"status": "error", "exit": 2, "message": f"{type(e).__name__}: {e}"}))
        return 2


if __name__ == "__main__":
    sys.exit(main())
