"""Ground-truth landmark/boundary heatmaps and sub-pixel decoding.

Pixel ``(i, j)`` (row, column) is sampled at continuous coordinate
``x = j, y = i``; the origin is the center of the top-left pixel.
"""

from dataclasses import dataclass, field

import numpy as np

DEFAULT_SIGMA = 1.5


@dataclass
class LandmarkSet:
    points: np.ndarray  # (M, 2) as (x, y)
    visibility: np.ndarray = None  # (M,) of 0/1
    image_size: tuple = None  # (width, height)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.visibility is None:
            self.visibility = np.ones(len(self.points), dtype=np.int64)
        self.visibility = np.asarray(self.visibility, dtype=np.int64).reshape(-1)
        if len(self.points) < 1:
            raise ValueError("landmark set is empty")
        if len(self.visibility) != len(self.points):
            raise ValueError(
                f"visibility has {len(self.visibility)} flags for {len(self.points)} points")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("landmark coordinates must be finite")
        if not np.all((self.visibility == 0) | (self.visibility == 1)):
            raise ValueError("visibility flags must be 0 or 1")

    def __len__(self):
        return len(self.points)

    def scaled(self, sx, sy):
        """Copy with coordinates multiplied per axis (image frame -> heatmap frame)."""
        return LandmarkSet(self.points * [sx, sy], self.visibility.copy())


@dataclass
class BoundaryDefinition:
    boundaries: list = field(default_factory=list)

    def __post_init__(self):
        self.boundaries = [list(map(int, b)) for b in self.boundaries]
        for b in self.boundaries:
            if len(b) < 2:
                raise ValueError(f"boundary {b} needs at least two landmarks")
            if any(b[i] == b[i + 1] for i in range(len(b) - 1)):
                raise ValueError(f"boundary {b} repeats a landmark index back to back")

    def __len__(self):
        return len(self.boundaries)

    def validate(self, n_landmarks):
        for b in self.boundaries:
            bad = [i for i in b if not 0 <= i < n_landmarks]
            if bad:
                raise ValueError(f"boundary references landmark indices {bad} outside [0, {n_landmarks})")


@dataclass
class HeatmapStack:
    data: np.ndarray  # (H, W, M + P)
    n_landmarks: int = None
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"heatmap stack must be H x W x C, got shape {self.data.shape}")
        if self.n_landmarks is None:
            self.n_landmarks = self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    @property
    def landmark_channels(self):
        return self.data[:, :, :self.n_landmarks]

    @property
    def boundary_channels(self):
        return self.data[:, :, self.n_landmarks:]

    @property
    def n_boundaries(self):
        return self.data.shape[2] - self.n_landmarks


def _pixel_grid(out_size):
    H, W = out_size
    if H < 1 or W < 1:
        raise ValueError(f"output size must be positive, got {out_size}")
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    return xs, ys


def render_landmark_heatmaps(landmarks, out_size, sigma=DEFAULT_SIGMA):
    """One isotropic Gaussian per landmark; invisible landmarks get an all-zero channel.

    Coordinates must already be in the ``out_size`` frame.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    xs, ys = _pixel_grid(out_size)
    M = len(landmarks)
    data = np.zeros((out_size[0], out_size[1], M))
    for m, ((x, y), vis) in enumerate(zip(landmarks.points, landmarks.visibility)):
        if vis:
            data[:, :, m] = np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2 * sigma ** 2))
    return HeatmapStack(data, n_landmarks=M, sigma=sigma)


def polyline_distance(xs, ys, vertices):
    """Euclidean distance from every (xs, ys) sample to a piecewise-linear polyline."""
    vertices = np.asarray(vertices, dtype=np.float64)
    best = np.full(xs.shape, np.inf)
    if len(vertices) == 1:
        return np.hypot(xs - vertices[0, 0], ys - vertices[0, 1])
    for (ax, ay), (bx, by) in zip(vertices[:-1], vertices[1:]):
        vx, vy = bx - ax, by - ay
        seg2 = vx * vx + vy * vy
        if seg2 == 0.0:
            t = np.zeros_like(xs)
        else:
            t = np.clip(((xs - ax) * vx + (ys - ay) * vy) / seg2, 0.0, 1.0)
        d = np.hypot(xs - (ax + t * vx), ys - (ay + t * vy))
        np.minimum(best, d, out=best)
    return best


def render_boundary_heatmaps(landmarks, boundaries, out_size, sigma=DEFAULT_SIGMA):
    """Truncated Gaussian of the distance to each boundary's polyline (zero beyond 3 sigma).

    Invisible landmarks are dropped from the polyline; a boundary left with no
    visible points renders as zeros.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    boundaries.validate(len(landmarks))
    xs, ys = _pixel_grid(out_size)
    data = np.zeros((out_size[0], out_size[1], len(boundaries)))
    for p, seq in enumerate(boundaries.boundaries):
        verts = [landmarks.points[i] for i in seq if landmarks.visibility[i]]
        if not verts:
            continue
        d = polyline_distance(xs, ys, verts)
        data[:, :, p] = np.where(d > 3 * sigma, 0.0, np.exp(-d ** 2 / (2 * sigma ** 2)))
    return HeatmapStack(data, n_landmarks=0, sigma=sigma)


def render_heatmaps(landmarks, boundaries, out_size, sigma=DEFAULT_SIGMA):
    """Landmark channels followed by boundary channels, as the network targets."""
    lm = render_landmark_heatmaps(landmarks, out_size, sigma)
    if boundaries is None or len(boundaries) == 0:
        return lm
    bd = render_boundary_heatmaps(landmarks, boundaries, out_size, sigma)
    return HeatmapStack(np.concatenate([lm.data, bd.data], axis=2), n_landmarks=len(landmarks), sigma=sigma)


def _axis_offset(lo, mid, hi, sigma):
    """Sub-pixel peak offset along one axis from the samples at -1, 0, +1.

    ``lo``/``hi`` are None where the neighbor falls off the grid.  A Gaussian
    is a parabola in log space, so three positive samples give the exact
    offset; with one neighbor missing the known sigma pins the curvature.
    Anything else falls back to the intensity-weighted centroid.
    """
    if lo is not None and hi is not None and lo > 0 and hi > 0 and mid > 0:
        llo, lmid, lhi = np.log(lo), np.log(mid), np.log(hi)
        curv = llo - 2 * lmid + lhi
        if curv < 0:
            return float(np.clip(0.5 * (llo - lhi) / curv, -0.5, 0.5))
    if sigma and mid > 0:
        if hi is not None and hi > 0 and (lo is None or lo <= 0):
            return float(np.clip(0.5 + sigma ** 2 * (np.log(hi) - np.log(mid)), -0.5, 0.5))
        if lo is not None and lo > 0 and (hi is None or hi <= 0):
            return float(np.clip(-0.5 - sigma ** 2 * (np.log(lo) - np.log(mid)), -0.5, 0.5))
    w = [v if v is not None else 0.0 for v in (lo, mid, hi)]
    total = sum(w)
    return (w[2] - w[0]) / total if total > 0 else 0.0


def decode_heatmaps(stack, threshold=1e-6):
    """Recover landmark coordinates from the landmark channels of a stack.

    The peak is the first global argmax in row-major order; refinement looks
    at the 3x3 window around it.  Channels peaking below ``threshold`` are
    reported invisible at (0, 0).
    """
    data = stack.landmark_channels
    if data.shape[2] < 1:
        raise ValueError("heatmap stack has no landmark channels")
    H, W, M = data.shape
    sigma = stack.sigma
    points = np.zeros((M, 2))
    vis = np.zeros(M, dtype=np.int64)
    for m in range(M):
        ch = data[:, :, m]
        idx = int(np.argmax(ch))
        r, c = divmod(idx, W)
        peak = ch[r, c]
        if not peak >= threshold:
            continue
        left = ch[r, c - 1] if c > 0 else None
        right = ch[r, c + 1] if c < W - 1 else None
        up = ch[r - 1, c] if r > 0 else None
        down = ch[r + 1, c] if r < H - 1 else None
        points[m] = (c + _axis_offset(left, peak, right, sigma),
                     r + _axis_offset(up, peak, down, sigma))
        vis[m] = 1
    return LandmarkSet(points, vis)
