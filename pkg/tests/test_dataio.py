import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rht import dataio
from rht.heatmaps import HeatmapStack, LandmarkSet, decode_heatmaps, render_landmark_heatmaps

CANONICAL = "version: 1\nn_points:  3\n{\n1.5 2.0\n10 20\n-3.25 4e1\n}\n"


# ---------------------------------------------------------------------------
# .pts


def test_parse_canonical():
    ann = dataio.parse_pts(CANONICAL)
    assert ann.n_points == 3
    np.testing.assert_array_equal(ann.points, [[1.5, 2.0], [10, 20], [-3.25, 40]])


def test_parse_crlf_and_spacing():
    ann = dataio.parse_pts(CANONICAL.replace("\n", "\r\n").replace("version: 1", "version:1"))
    assert ann.n_points == 3


def test_count_mismatch():
    body = "".join(f"{i} {i}\n" for i in range(67))
    with pytest.raises(ValueError, match="68"):
        dataio.parse_pts(f"version: 1\nn_points: 68\n{{\n{body}}}\n")


@pytest.mark.parametrize("text", [
    "version: 1\n{\n1 2\n}\n",
    "version: 1\nn_points: 1\n1 2\n",
    "version: 1\nn_points: 1\n{\n1 2\n",
    "version: 1\nn_points: 1\n{\n1 x\n}\n",
    "version: 1\nn_points: 1\n{\n1 2 3\n}\n",
    "garbage\nn_points: 1\n{\n1 2\n}\n",
])
def test_malformed(text):
    with pytest.raises(ValueError):
        dataio.parse_pts(text)


def test_round_trip(tmp_path):
    ann = dataio.parse_pts(CANONICAL)
    dataio.write_pts(tmp_path / "a.pts", ann)
    again = dataio.read_pts(tmp_path / "a.pts")
    np.testing.assert_array_equal(again.points, ann.points)
    text = dataio.format_pts(ann)
    assert dataio.format_pts(dataio.parse_pts(text)) == text


@settings(max_examples=50, deadline=None)
@given(pts=st.lists(st.tuples(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4)), min_size=1, max_size=20))
def test_exact_round_trip_property(pts):
    text = dataio.format_pts(np.array(pts), precision=None)
    ann = dataio.parse_pts(text)
    np.testing.assert_array_equal(ann.points, np.array(pts))
    assert dataio.format_pts(ann, precision=None) == text


# ---------------------------------------------------------------------------
# images


def test_pgm_ppm_round_trip(tmp_path, rng):
    gray = np.round(rng.random((5, 7)) * 255) / 255
    color = np.round(rng.random((4, 3, 3)) * 255) / 255
    dataio.write_image(tmp_path / "g.pgm", gray)
    dataio.write_image(tmp_path / "c.ppm", color)
    np.testing.assert_allclose(dataio.read_image(tmp_path / "g.pgm"), gray, atol=1e-12)
    np.testing.assert_allclose(dataio.read_image(tmp_path / "c.ppm"), color, atol=1e-12)
    assert (tmp_path / "g.pgm").read_bytes().startswith(b"P5\n7 5\n255\n")


def test_pnm_comments_and_16_bit():
    raster = np.array([0, 65535, 1000, 30000], dtype=">u2").tobytes()
    img = dataio.decode_pnm(b"P5\n# made by hand\n2 2\n65535\n" + raster)
    np.testing.assert_allclose(img, np.array([[0, 65535], [1000, 30000]]) / 65535)


def test_pnm_errors():
    with pytest.raises(ValueError):
        dataio.decode_pnm(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError):
        dataio.decode_pnm(b"P5\n4 4\n255\n\x00\x00")


def test_gray_conversion():
    img = np.zeros((1, 1, 3))
    img[0, 0] = (1.0, 0.0, 0.0)
    assert dataio.to_gray(img)[0, 0] == pytest.approx(0.299)
    assert dataio.to_color(np.ones((2, 2))).shape == (2, 2, 3)


# ---------------------------------------------------------------------------
# conventions and manifests


def test_300w_convention():
    c = dataio.W300_68
    perm = np.array(c.flip_permutation)
    np.testing.assert_array_equal(perm[perm], np.arange(68))
    assert len(c.boundaries) == 13
    assert c.eye_corners == [36, 45]


def test_convention_rejects_non_involution():
    with pytest.raises(ValueError):
        dataio.Convention(3, flip_permutation=[1, 2, 0])
    with pytest.raises(ValueError):
        dataio.Convention(3, boundaries=[[0, 7]])


def test_manifest(tmp_path):
    (tmp_path / "imgs").mkdir()
    dataio.write_pts(tmp_path / "imgs" / "a.pts", dataio.parse_pts(CANONICAL))
    dataio.write_image(tmp_path / "imgs" / "a.pgm", np.zeros((4, 4)))
    (tmp_path / "imgs" / "a.vis").write_text("1 0 1\n")
    man = {"convention": {"n_landmarks": 3, "eye_corners": [0, 2], "boundaries": [[0, 1, 2]],
                          "flip_permutation": [2, 1, 0]},
           "entries": [{"image": "imgs/a.pgm", "pts": "imgs/a.pts", "box": [1, 2, 30, 40],
                        "visibility": "imgs/a.vis", "tags": ["test"]}]}
    (tmp_path / "m.json").write_text(json.dumps(man))
    m = dataio.load_manifest(tmp_path / "m.json")
    assert m.boxes() == {"a": [1, 2, 30, 40]}
    assert m.convention.boundary_definition().boundaries == [[0, 1, 2]]
    assert m.entries[0].load_landmarks().visibility.tolist() == [1, 0, 1]
    man["entries"][0]["image"] = "imgs/missing.pgm"
    (tmp_path / "m.json").write_text(json.dumps(man))
    with pytest.raises(FileNotFoundError):
        dataio.load_manifest(tmp_path / "m.json")


# ---------------------------------------------------------------------------
# augmentation


def square_points():
    return LandmarkSet([[8.0, 10.0], [23.0, 10.0], [10.0, 20.0], [21.0, 20.0]])


def test_null_augmentation_is_identity(rng):
    img = rng.random((32, 32, 3))
    lm = square_points()
    out, moved = dataio.augment(img, lm, dataio.AugmentationPolicy.null(), np.random.default_rng(0))
    np.testing.assert_allclose(out, img, atol=1e-12)
    np.testing.assert_allclose(moved.points, lm.points, atol=1e-12)


def test_flip_swaps_indices(rng):
    img = rng.random((32, 32))
    lm = square_points()
    policy = dataio.AugmentationPolicy.null(flip_p=1.0)
    out, moved = dataio.augment(img, lm, policy, np.random.default_rng(0), flip_permutation=(1, 0, 3, 2))
    W = 32
    want = np.array([[W - 1 - 23.0, 10.0], [W - 1 - 8.0, 10.0], [W - 1 - 21.0, 20.0], [W - 1 - 10.0, 20.0]])
    np.testing.assert_allclose(moved.points, want, atol=1e-12)
    np.testing.assert_allclose(out, img[:, ::-1], atol=1e-12)


def test_same_seed_same_output(rng):
    img = rng.random((32, 32, 3))
    policy = dataio.AugmentationPolicy(rng_seed=3)
    a = dataio.augment(img, square_points(), policy, policy.rng())
    b = dataio.augment(img, square_points(), policy, policy.rng())
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1].points, b[1].points)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_augment_preserves_counts(seed):
    r = np.random.default_rng(seed)
    lm = LandmarkSet(r.uniform(0, 31, size=(5, 2)), r.integers(0, 2, 5))
    _, moved = dataio.augment(r.random((32, 32)), lm, dataio.AugmentationPolicy(), r)
    assert len(moved.points) == 5 and len(moved.visibility) == 5


def test_retry_exhaustion_returns_input(rng):
    # every draw pushes the single point out of frame
    policy = dataio.AugmentationPolicy.null(crop_jitter=0.0)
    lm = LandmarkSet([[5.0, 5.0]], [0])
    img = rng.random((16, 16))
    out, moved = dataio.augment(img, lm, policy, np.random.default_rng(0))
    np.testing.assert_array_equal(out, img)
    np.testing.assert_array_equal(moved.points, lm.points)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_geometric_commutation(seed):
    r = np.random.default_rng(seed)
    size = (48, 48)
    pt = r.uniform(18, 30, size=(1, 2))
    policy = dataio.AugmentationPolicy(rotation_max=30, scale_jitter=0.1, crop_jitter=0.05, flip_p=0.5)
    matrix, flipped = dataio.draw_geometry(policy, r, size)
    moved = dataio.transform_landmarks(LandmarkSet(pt), matrix, size)
    rendered_then_warped = dataio.warp_image(render_landmark_heatmaps(LandmarkSet(pt), size).data, matrix)
    a = decode_heatmaps(HeatmapStack(rendered_then_warped)).points
    b = decode_heatmaps(render_landmark_heatmaps(moved, size)).points
    assert np.abs(a - b).max() <= 0.3


# ---------------------------------------------------------------------------
# descriptors and reference selection


def test_constant_image_descriptor():
    d = dataio.describe(np.full((16, 16), 0.4))
    assert d.degenerate and not d.vector.any()


def test_rotation_changes_descriptor(rng):
    img = rng.random((16, 16))
    a, b = dataio.describe(img), dataio.describe(np.rot90(img))
    assert not np.allclose(a.vector, b.vector)


def test_ramp_one_bin_per_cell():
    ys, xs = np.mgrid[0:16, 0:16].astype(float)
    h = dataio.describe(xs / 15).vector.reshape(16, 8)
    assert np.all(np.count_nonzero(h, axis=1) == 1)
    assert np.all(h[:, 0] > 0)  # gradient points along +x: angle 0
    h = dataio.describe(ys / 15).vector.reshape(16, 8)
    assert np.all(h[:, 2] > 0) and np.all(np.count_nonzero(h, axis=1) == 1)  # angle pi/2


def test_self_match(rng):
    gallery = [dataio.describe(rng.random((16, 16))) for _ in range(4)]
    assert dataio.select_reference(gallery[2], gallery) == 2
    assert dataio.similarities(gallery[2], gallery)[2] == pytest.approx(1.0)


def test_one_hot_match():
    gallery = list(np.eye(5))
    assert dataio.select_reference(np.eye(5)[3], gallery) == 3


def test_brute_force_cosine(rng):
    gallery = [rng.normal(size=12) for _ in range(5)]
    t = rng.normal(size=12)
    best, arg = -2.0, -1
    for i, g in enumerate(gallery):
        c = sum(a * b for a, b in zip(t, g)) / (np.sqrt(sum(a * a for a in t)) * np.sqrt(sum(b * b for b in g)))
        if c > best:
            best, arg = c, i
    assert dataio.select_reference(t, gallery) == arg


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_selection_permutation_equivariant(seed):
    r = np.random.default_rng(seed)
    gallery = [r.normal(size=8) for _ in range(6)]
    t = r.normal(size=8)
    perm = r.permutation(6)
    i = dataio.select_reference(t, gallery)
    j = dataio.select_reference(t, [gallery[p] for p in perm])
    assert perm[j] == i


def test_empty_gallery():
    with pytest.raises(ValueError):
        dataio.select_reference(np.ones(3), [])
