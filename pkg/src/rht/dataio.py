"""Annotations, images, dataset manifests, augmentation and reference selection.

Images are float arrays in [0, 1], either (H, W) grayscale or (H, W, 3)
color.  Landmark coordinates follow the pixel-center convention of
:mod:`rht.heatmaps`.
"""

import json
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .heatmaps import BoundaryDefinition, LandmarkSet
from .htm import bilinear_sample

# ---------------------------------------------------------------------------
# .pts annotations


@dataclass
class PtsAnnotation:
    points: np.ndarray
    version: int = 1

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)

    @property
    def n_points(self):
        return len(self.points)

    def landmarks(self, visibility=None):
        return LandmarkSet(self.points, visibility)


_HEADER_RE = re.compile(r"^\s*(version|n_points)\s*:\s*(\S+)\s*$")


def parse_pts(text):
    """Parse the 300W layout ``version: 1 / n_points: M / { x y ... }``."""
    lines = [ln.strip() for ln in text.replace("\r\n", "\n").replace("\r", "\n").split("\n")]
    lines = [ln for ln in lines if ln]
    header = {}
    i = 0
    while i < len(lines) and lines[i] != "{":
        m = _HEADER_RE.match(lines[i])
        if not m:
            raise ValueError(f"malformed .pts header line: {lines[i]!r}")
        try:
            header[m.group(1)] = int(m.group(2))
        except ValueError:
            raise ValueError(f"non-integer {m.group(1)} value {m.group(2)!r}") from None
        i += 1
    if "n_points" not in header:
        raise ValueError(".pts header lacks n_points")
    if i == len(lines):
        raise ValueError(".pts file has no opening brace")
    try:
        close = lines.index("}", i + 1)
    except ValueError:
        raise ValueError(".pts file has no closing brace") from None
    if any(lines[close + 1:]):
        raise ValueError("unexpected content after closing brace")
    pts = []
    for ln in lines[i + 1:close]:
        toks = ln.split()
        if len(toks) != 2:
            raise ValueError(f"expected two coordinates per line, got {ln!r}")
        try:
            pts.append((float(toks[0]), float(toks[1])))
        except ValueError:
            raise ValueError(f"non-numeric coordinate in {ln!r}") from None
    if len(pts) != header["n_points"]:
        raise ValueError(f"header declares {header['n_points']} points but {len(pts)} were listed")
    return PtsAnnotation(np.array(pts).reshape(-1, 2), header.get("version", 1))


def format_pts(ann, precision=3):
    """Canonical text; ``precision=None`` writes shortest round-trip floats."""
    pts = ann.points if isinstance(ann, PtsAnnotation) else np.asarray(getattr(ann, "points", ann))
    version = getattr(ann, "version", 1)
    fmt = repr if precision is None else (lambda v: f"{v:.{precision}f}")
    body = "".join(f"{fmt(float(x))} {fmt(float(y))}\n" for x, y in pts)
    return f"version: {version}\nn_points:  {len(pts)}\n{{\n{body}}}\n"


def read_pts(path):
    with open(path, newline="") as f:
        return parse_pts(f.read())


def write_pts(path, ann, precision=3):
    with open(path, "w", newline="") as f:
        f.write(format_pts(ann, precision))


# ---------------------------------------------------------------------------
# PGM / PPM


def _read_token(buf, pos):
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ValueError("truncated PNM header")
    return buf[start:pos], pos


def decode_pnm(buf):
    """Binary P5 (gray) / P6 (color) to a float image in [0, 1]."""
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported PNM type {magic!r}")
    w, pos = _read_token(buf, pos)
    h, pos = _read_token(buf, pos)
    maxval, pos = _read_token(buf, pos)
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 65536:
        raise ValueError(f"bad maxval {maxval}")
    pos += 1  # single whitespace byte before the raster
    ch = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    count = w * h * ch
    if len(buf) - pos < count * dtype.itemsize:
        raise ValueError("PNM raster truncated")
    raw = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
    img = raw.astype(np.float64).reshape((h, w, ch) if ch == 3 else (h, w)) / maxval
    return img


def encode_pnm(image):
    """8-bit binary PGM for (H, W) input, PPM for (H, W, 3); values clipped to [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode image of shape {img.shape}")
    raster = np.rint(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + raster.tobytes()


def read_image(path):
    with open(path, "rb") as f:
        return decode_pnm(f.read())


def write_image(path, image):
    with open(path, "wb") as f:
        f.write(encode_pnm(image))


def to_color(image):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return np.repeat(img[:, :, None], 3, axis=2)
    return img


def to_gray(image):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img @ np.array([0.299, 0.587, 0.114]) if img.shape[2] == 3 else img.mean(axis=2)


# ---------------------------------------------------------------------------
# landmark conventions and manifests

# 68-point 300W layout
_JAW = list(range(0, 17))
_FLIP_68 = (
    list(range(16, -1, -1))
    + list(range(26, 16, -1))
    + [27, 28, 29, 30]
    + [35, 34, 33, 32, 31]
    + [45, 44, 43, 42, 47, 46]
    + [39, 38, 37, 36, 41, 40]
    + [54, 53, 52, 51, 50, 49, 48]
    + [59, 58, 57, 56, 55]
    + [64, 63, 62, 61, 60]
    + [67, 66, 65]
)
_BOUNDARIES_68 = [
    _JAW,
    [17, 18, 19, 20, 21],
    [22, 23, 24, 25, 26],
    [27, 28, 29, 30],
    [31, 32, 33, 34, 35],
    [36, 37, 38, 39],
    [39, 40, 41, 36],
    [42, 43, 44, 45],
    [45, 46, 47, 42],
    [48, 49, 50, 51, 52, 53, 54],
    [48, 60, 61, 62, 63, 64, 54],
    [48, 60, 67, 66, 65, 64, 54],
    [54, 55, 56, 57, 58, 59, 48],
]


@dataclass
class Convention:
    n_landmarks: int
    pupils: list = None
    eye_corners: list = None
    boundaries: list = field(default_factory=list)
    flip_permutation: list = None

    def __post_init__(self):
        if self.flip_permutation is not None:
            perm = list(self.flip_permutation)
            if sorted(perm) != list(range(self.n_landmarks)):
                raise ValueError("flip permutation must be a permutation of the landmark indices")
            if any(perm[perm[i]] != i for i in range(len(perm))):
                raise ValueError("flip permutation must be an involution")
        self.boundary_definition().validate(self.n_landmarks)

    def boundary_definition(self):
        return BoundaryDefinition(self.boundaries)

    @classmethod
    def from_dict(cls, d):
        return cls(n_landmarks=d["n_landmarks"], pupils=d.get("pupils"), eye_corners=d.get("eye_corners"),
                   boundaries=d.get("boundaries", []), flip_permutation=d.get("flip_permutation"))

    def to_dict(self):
        return {"n_landmarks": self.n_landmarks, "pupils": self.pupils, "eye_corners": self.eye_corners,
                "boundaries": self.boundaries, "flip_permutation": self.flip_permutation}


W300_68 = Convention(
    n_landmarks=68,
    pupils=[list(range(36, 42)), list(range(42, 48))],
    eye_corners=[36, 45],
    boundaries=_BOUNDARIES_68,
    flip_permutation=_FLIP_68,
)


def default_convention(n_landmarks):
    if n_landmarks == 68:
        return W300_68
    return Convention(n_landmarks=n_landmarks)


@dataclass
class ManifestEntry:
    image: str
    pts: str
    box: list = None  # [x, y, w, h]
    visibility: str = None
    tags: list = field(default_factory=list)

    @property
    def stem(self):
        return os.path.splitext(os.path.basename(self.pts))[0]

    def load_landmarks(self):
        ann = read_pts(self.pts)
        vis = None
        if self.visibility:
            with open(self.visibility) as f:
                vis = [int(t) for t in f.read().split()]
        return ann.landmarks(vis)


@dataclass
class DatasetManifest:
    entries: list
    convention: Convention
    root: str = "."

    def boxes(self):
        return {e.stem: e.box for e in self.entries if e.box is not None}


def load_manifest(path, check_paths=True):
    """Load a JSON manifest; relative paths resolve against the manifest's directory."""
    root = os.path.dirname(os.path.abspath(path))
    with open(path) as f:
        raw = json.load(f)
    conv = Convention.from_dict(raw["convention"]) if "convention" in raw else None
    entries = []
    for e in raw.get("entries", []):
        resolved = {}
        for key in ("image", "pts", "visibility"):
            p = e.get(key)
            if p is not None and not os.path.isabs(p):
                p = os.path.join(root, p)
            resolved[key] = p
        entry = ManifestEntry(image=resolved["image"], pts=resolved["pts"], box=e.get("box"),
                              visibility=resolved["visibility"], tags=list(e.get("tags", [])))
        if check_paths:
            for key in ("image", "pts", "visibility"):
                p = getattr(entry, key)
                if p is not None and not os.path.exists(p):
                    raise FileNotFoundError(f"manifest entry references missing {key} file {p}")
        entries.append(entry)
    if conv is None:
        if not entries:
            raise ValueError("manifest has neither a convention block nor entries")
        conv = default_convention(read_pts(entries[0].pts).n_points)
    return DatasetManifest(entries, conv, root)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentationPolicy:
    rotation_max: float = 45.0  # degrees
    scale_jitter: float = 0.20
    crop_jitter: float = 0.10
    gray_p: float = 0.20
    blur_p: float = 0.30
    occlusion_p: float = 0.40
    flip_p: float = 0.50
    occlusion_range: tuple = (0.10, 0.30)  # rectangle side as a fraction of the shorter image side
    max_retries: int = 8
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("gray_p", "blur_p", "occlusion_p", "flip_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability, got {v}")

    @classmethod
    def null(cls, **kw):
        off = dict(rotation_max=0.0, scale_jitter=0.0, crop_jitter=0.0, gray_p=0.0, blur_p=0.0,
                   occlusion_p=0.0, flip_p=0.0)
        return cls(**{**off, **kw})

    def rng(self):
        return np.random.default_rng(self.rng_seed)


def geometric_matrix(size, angle_deg=0.0, scale=1.0, shift=(0.0, 0.0), flip=False):
    """Forward 3x3 map of pixel coordinates: rotate/scale about the center, shift, then mirror."""
    H, W = size
    cx, cy = (W - 1) / 2.0, (H - 1) / 2.0
    a = np.deg2rad(angle_deg)
    cos, sin = np.cos(a) * scale, np.sin(a) * scale
    m = np.array([[cos, -sin, cx + shift[0] - cos * cx + sin * cy],
                  [sin, cos, cy + shift[1] - sin * cx - cos * cy],
                  [0.0, 0.0, 1.0]])
    if flip:
        m = np.array([[-1.0, 0.0, W - 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]) @ m
    return m


def warp_image(image, matrix, out_size=None):
    """Resample ``image`` so output pixel p holds input at inverse(matrix) @ p."""
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    H, W = out_size or img.shape[:2]
    inv = np.linalg.inv(matrix)
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    src_x = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    src_y = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    out = bilinear_sample(img, np.stack([src_x, src_y], axis=-1))
    return out[:, :, 0] if squeeze else out


def transform_landmarks(landmarks, matrix, size, flip_permutation=None, flipped=False):
    """Map points through ``matrix``; points leaving the frame become invisible."""
    H, W = size
    pts = landmarks.points @ matrix[:2, :2].T + matrix[:2, 2]
    vis = landmarks.visibility.copy()
    if flipped and flip_permutation is not None:
        perm = np.asarray(flip_permutation)
        pts, vis = pts[perm], vis[perm]
    inside = (pts[:, 0] >= 0) & (pts[:, 0] <= W - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= H - 1)
    return LandmarkSet(pts, vis * inside)


def draw_geometry(policy, draw, size):
    """Draw one random geometric transform; returns (matrix, flipped)."""
    H, W = size
    angle = draw.uniform(-policy.rotation_max, policy.rotation_max)
    scale = 1.0 + draw.uniform(-policy.scale_jitter, policy.scale_jitter)
    shift = (draw.uniform(-policy.crop_jitter, policy.crop_jitter) * W,
             draw.uniform(-policy.crop_jitter, policy.crop_jitter) * H)
    flipped = bool(draw.random() < policy.flip_p)
    return geometric_matrix(size, angle, scale, shift, flipped), flipped


def box_blur(image):
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    p = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    H, W = img.shape[:2]
    out = sum(p[dy:dy + H, dx:dx + W] for dy in range(3) for dx in range(3)) / 9.0
    return out[:, :, 0] if squeeze else out


def augment(image, landmarks, policy, draw, flip_permutation=None):
    """Random geometric + photometric augmentation applied jointly to image and landmarks.

    ``draw`` is a ``numpy.random.Generator``; all randomness comes from it.
    Geometry is redrawn up to ``policy.max_retries`` times if no landmark
    stays in frame, after which the inputs are returned unchanged.
    """
    img = np.asarray(image, dtype=np.float64)
    size = img.shape[:2]
    for _ in range(policy.max_retries):
        matrix, flipped = draw_geometry(policy, draw, size)
        moved = transform_landmarks(landmarks, matrix, size, flip_permutation, flipped)
        if moved.visibility.any():
            break
    else:
        return img.copy(), LandmarkSet(landmarks.points.copy(), landmarks.visibility.copy())

    out = warp_image(img, matrix)
    if draw.random() < policy.gray_p and out.ndim == 3:
        out = np.repeat(to_gray(out)[:, :, None], out.shape[2], axis=2)
    if draw.random() < policy.blur_p:
        out = box_blur(out)
    if draw.random() < policy.occlusion_p:
        H, W = size
        lo, hi = policy.occlusion_range
        side = min(H, W)
        rh = max(1, int(round(draw.uniform(lo, hi) * side)))
        rw = max(1, int(round(draw.uniform(lo, hi) * side)))
        y0 = int(draw.integers(0, H - rh + 1))
        x0 = int(draw.integers(0, W - rw + 1))
        out[y0:y0 + rh, x0:x0 + rw] = draw.uniform(0.0, 1.0)
    return out, moved


# ---------------------------------------------------------------------------
# reference selection


@dataclass
class Descriptor:
    vector: np.ndarray
    degenerate: bool = False


def describe(image, grid=4, bins=8):
    """Grid of gradient-orientation histograms (4 x 4 cells x 8 bins), l2-normalized.

    Orientation is the full-circle gradient angle, hard-binned and weighted by
    gradient magnitude.  A constant image yields a zero, degenerate descriptor.
    """
    g = to_gray(image)
    if g.shape[0] < 2 * grid or g.shape[1] < 2 * grid:
        raise ValueError(f"image {g.shape} is smaller than {2 * grid}x{2 * grid}")
    gy, gx = np.gradient(g)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    b = np.minimum((ang / (2 * np.pi / bins)).astype(np.int64), bins - 1)
    H, W = g.shape
    cy = np.minimum(np.arange(H) * grid // H, grid - 1)
    cx = np.minimum(np.arange(W) * grid // W, grid - 1)
    cell = cy[:, None] * grid + cx[None, :]
    hist = np.zeros(grid * grid * bins)
    np.add.at(hist, (cell * bins + b).ravel(), mag.ravel())
    n = np.linalg.norm(hist)
    if n == 0:
        return Descriptor(hist, True)
    return Descriptor(hist / n, False)


def _vec(d):
    return np.asarray(d.vector if isinstance(d, Descriptor) else d, dtype=np.float64)


def similarities(target, gallery):
    """Cosine similarity of ``target`` to every gallery descriptor (zero vectors score 0)."""
    t = _vec(target)
    tn = np.linalg.norm(t)
    out = np.zeros(len(gallery))
    for i, g in enumerate(gallery):
        v = _vec(g)
        gn = np.linalg.norm(v)
        if tn > 0 and gn > 0:
            out[i] = float(t @ v) / (tn * gn)
    return out


def select_reference(target, gallery):
    """Index of the most similar gallery descriptor; smallest index wins ties."""
    if len(gallery) == 0:
        raise ValueError("reference gallery is empty")
    return int(np.argmax(similarities(target, gallery)))
