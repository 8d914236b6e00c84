"""Landmark evaluation: normalized mean error, cumulative error curve, AUC, failure rate."""

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

DEFAULT_AUC_CUTOFF = 0.07
DEFAULT_FAILURE_THRESHOLD = 0.1
NORM_KINDS = ("interpupil", "interocular", "box_geomean", "diag")


@dataclass
class NormalizationSpec:
    """How the per-image normalizing distance is derived from the ground truth.

    interpupil uses the centroids of ``pupils`` (two index lists); interocular
    the outer eye corners ``corners`` (two indices); box_geomean sqrt(w*h) of
    ``box``; diag the box diagonal, falling back to the tight box around the
    ground-truth points when no box is given.
    """

    kind: str
    pupils: tuple = None
    corners: tuple = None
    box: tuple = None  # (w, h)

    def __post_init__(self):
        if self.kind not in NORM_KINDS:
            raise ValueError(f"unknown normalization {self.kind!r}; expected one of {NORM_KINDS}")
        need = {"interpupil": "pupils", "interocular": "corners", "box_geomean": "box"}.get(self.kind)
        if need and getattr(self, need) is None:
            raise ValueError(f"{self.kind} normalization requires {need}")

    def distance(self, truth):
        pts = _points(truth)
        if self.kind == "interpupil":
            a = pts[list(self.pupils[0])].mean(axis=0)
            b = pts[list(self.pupils[1])].mean(axis=0)
            d = float(np.linalg.norm(a - b))
        elif self.kind == "interocular":
            d = float(np.linalg.norm(pts[self.corners[0]] - pts[self.corners[1]]))
        else:
            if self.box is not None:
                w, h = self.box
            else:
                w, h = pts.max(axis=0) - pts.min(axis=0)
            d = float(np.sqrt(w * h)) if self.kind == "box_geomean" else float(np.hypot(w, h))
        if not d > 0:
            raise ValueError(f"{self.kind} normalizing distance must be positive, got {d}")
        return d


def _points(ls):
    return np.asarray(getattr(ls, "points", ls), dtype=np.float64).reshape(-1, 2)


def nme(pred, truth, norm, visible_only=False):
    """Mean Euclidean landmark error divided by the normalizing distance.

    All landmarks count unless ``visible_only`` is set, in which case the
    ground truth's invisible points are skipped.
    """
    p, t = _points(pred), _points(truth)
    if p.shape != t.shape:
        raise ValueError(f"landmark count mismatch: {len(p)} predicted vs {len(t)} ground truth")
    d = norm if isinstance(norm, (int, float)) else norm.distance(truth)
    if not d > 0:
        raise ValueError(f"normalizing distance must be positive, got {d}")
    err = np.linalg.norm(p - t, axis=1)
    if visible_only and getattr(truth, "visibility", None) is not None:
        err = err[np.asarray(truth.visibility) == 1]
        if err.size == 0:
            raise ValueError("no visible landmarks to evaluate")
    return float(err.mean() / d)


def cumulative_curve(nmes, cutoff=DEFAULT_AUC_CUTOFF, steps=1001):
    """Fraction of images with NME <= x at ``steps`` evenly spaced x in [0, cutoff]."""
    nmes = np.asarray(nmes, dtype=np.float64)
    if nmes.size == 0:
        raise ValueError("no NME values")
    if not cutoff > 0 or steps < 2:
        raise ValueError("cutoff must be positive and steps at least 2")
    xs = np.linspace(0.0, cutoff, steps)
    srt = np.sort(nmes)
    ys = np.searchsorted(srt, xs, side="right") / nmes.size
    return xs, ys


def auc(curve):
    """Trapezoidal area under a cumulative curve, normalized by its x-range."""
    xs, ys = curve
    return float(np.trapezoid(ys, xs) / (xs[-1] - xs[0]))


def failure_rate(nmes, threshold=DEFAULT_FAILURE_THRESHOLD):
    """Fraction of images whose NME exceeds ``threshold``.

    Written as one minus the cumulative fraction so it matches the curve's
    complement bit for bit.
    """
    nmes = np.asarray(nmes, dtype=np.float64)
    if nmes.size == 0:
        raise ValueError("no NME values")
    return 1.0 - np.count_nonzero(nmes <= threshold) / nmes.size


@dataclass
class EvaluationReport:
    names: list
    nmes: list
    mean_nme: float
    auc: float
    auc_cutoff: float
    failure_rate: float
    failure_threshold: float
    norm: str
    curve: tuple = field(default=None, repr=False)

    def to_dict(self):
        d = asdict(self)
        d.pop("curve")
        d["per_image"] = dict(zip(d.pop("names"), d.pop("nmes")))
        return d

    def write(self, report_path, curve_path=None):
        with open(report_path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        if curve_path is not None:
            with open(curve_path, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["nme", "fraction"])
                for x, y in zip(*self.curve):
                    w.writerow([repr(float(x)), repr(float(y))])


def evaluate(names, preds, truths, norms, cutoff=DEFAULT_AUC_CUTOFF,
             threshold=DEFAULT_FAILURE_THRESHOLD, steps=1001, visible_only=False):
    """Per-image NME plus the summary statistics over a test set."""
    if isinstance(norms, (NormalizationSpec, int, float)):
        norms = [norms] * len(preds)
    errs = [nme(p, t, n, visible_only) for p, t, n in zip(preds, truths, norms)]
    curve = cumulative_curve(errs, cutoff, steps)
    kind = norms[0].kind if norms and isinstance(norms[0], NormalizationSpec) else "custom"
    return EvaluationReport(
        names=list(names), nmes=errs, mean_nme=float(np.mean(errs)), auc=auc(curve), auc_cutoff=cutoff,
        failure_rate=failure_rate(errs, threshold), failure_threshold=threshold, norm=kind, curve=curve)
