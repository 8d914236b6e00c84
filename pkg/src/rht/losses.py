"""Training objective: masked heatmap loss, hard/soft consistency loss, weighted sum."""

import json
from dataclasses import asdict, dataclass

import numpy as np

DEFAULT_LAMBDA = 0.1


def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def _check_heatmap_args(pred, truth, visibility, n_landmarks):
    if isinstance(pred, (list, tuple)):
        preds, truths, vis = list(pred), _as_list(truth), _as_list(visibility)
    else:
        # one image: the visibility is its flag vector, whatever its container
        preds, truths, vis = [pred], [truth], [visibility]
    if not len(preds) == len(truths) == len(vis) or not preds:
        raise ValueError("pred, truth and visibility must list the same, non-zero number of images")
    out = []
    for p, t, v in zip(preds, truths, vis):
        p, t = np.asarray(p), np.asarray(t)
        v = np.asarray(v).reshape(-1)
        if p.shape != t.shape or p.ndim != 3:
            raise ValueError(f"prediction {p.shape} and truth {t.shape} must be equal H x W x C")
        if len(v) != n_landmarks or n_landmarks > p.shape[2]:
            raise ValueError(f"expected {n_landmarks} visibility flags within {p.shape[2]} channels, got {len(v)}")
        if not np.all((v == 0) | (v == 1)):
            raise ValueError("visibility flags must be 0 or 1")
        out.append((p, t, v))
    return out


def heatmap_loss(pred, truth, visibility, n_landmarks):
    """Visibility-masked squared error, averaged over landmarks, boundaries and images.

    ``pred``/``truth`` are (H, W, M+P) arrays or lists of them (one per image);
    ``visibility`` holds the M flags per image.  Each channel contributes its
    squared L2 norm summed over all pixels.  With no boundary channels the
    boundary term is dropped.
    """
    items = _check_heatmap_args(pred, truth, visibility, n_landmarks)
    M = n_landmarks
    total = 0.0
    for p, t, v in items:
        sq = ((p - t) ** 2).sum(axis=(0, 1))
        P = p.shape[2] - M
        term = float((v * sq[:M]).sum()) / M if M else 0.0
        if P:
            term += float(sq[M:].sum()) / P
        total += term
    return total / len(items)


def heatmap_loss_grad(pred, truth, visibility, n_landmarks):
    """Gradient of ``heatmap_loss`` with respect to each prediction (same nesting as ``pred``)."""
    items = _check_heatmap_args(pred, truth, visibility, n_landmarks)
    N, M = len(items), n_landmarks
    grads = []
    for p, t, v in items:
        P = p.shape[2] - M
        w = np.concatenate([v / M if M else np.zeros(0), np.full(P, 1.0 / P) if P else np.zeros(0)])
        grads.append(2.0 * (p - t) * w / N)
    return grads if isinstance(pred, (list, tuple)) else grads[0]


def _check_consistency(fe, fs, attention):
    fe, fs = np.asarray(fe), np.asarray(fs)
    if fe.shape != fs.shape or fe.ndim != 3:
        raise ValueError(f"hard {fe.shape} and soft {fs.shape} features must be equal H x W x C")
    a = np.asarray(attention).reshape(fe.shape[0], fe.shape[1])
    return fe, fs, a[:, :, None]


def consistency_loss(fe, fs, attention):
    """Mean absolute difference between attention-weighted hard features and soft features."""
    fe, fs, a = _check_consistency(fe, fs, attention)
    return float(np.abs(fe * a - fs).sum()) / fe.size


def consistency_loss_grad(fe, fs, attention):
    """Returns (d_fe, d_fs) with the attention held constant; sign(0) is taken as 0."""
    fe, fs, a = _check_consistency(fe, fs, attention)
    s = np.sign(fe * a - fs) / fe.size
    return s * a, -s


@dataclass
class LossReport:
    l1: float
    l2: float
    overall: float
    lam: float

    def to_json(self):
        d = asdict(self)
        return json.dumps({"l1": d["l1"], "l2": d["l2"], "lambda": d["lam"], "overall": d["overall"]})

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(l1=d["l1"], l2=d["l2"], overall=d["overall"], lam=d["lambda"])


def overall_loss(l1, l2, lam=DEFAULT_LAMBDA):
    if l1 < 0 or l2 < 0:
        raise ValueError(f"loss terms must be non-negative, got l1={l1}, l2={l2}")
    return LossReport(l1=l1, l2=l2, overall=l1 + lam * l2, lam=lam)
