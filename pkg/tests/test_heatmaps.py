import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rht.heatmaps import (BoundaryDefinition, HeatmapStack, LandmarkSet, decode_heatmaps, polyline_distance,
                          render_boundary_heatmaps, render_heatmaps, render_landmark_heatmaps)


def test_landmark_at_pixel_center():
    st_ = render_landmark_heatmaps(LandmarkSet([[8, 8]]), (16, 16), 1.5)
    ch = st_.data[:, :, 0]
    assert ch[8, 8] == 1.0
    # pixel (i, j) is row i, column j; x=9, y=8 is row 8 column 9
    assert ch[8, 9] == pytest.approx(np.exp(-1 / (2 * 1.5 ** 2)))
    assert ch[8, 9] == pytest.approx(0.8007, abs=1e-4)


def test_invisible_landmark_channel_is_zero():
    st_ = render_landmark_heatmaps(LandmarkSet([[8, 8], [3, 4]], [1, 0]), (16, 16), 1.5)
    assert not st_.data[:, :, 1].any()
    assert st_.data[:, :, 0].max() == 1.0


def test_half_pixel_landmark_has_four_equal_maxima():
    ch = render_landmark_heatmaps(LandmarkSet([[7.5, 7.5]]), (16, 16), 1.5).data[:, :, 0]
    want = np.exp(-0.5 / 4.5)
    for r, c in [(7, 7), (7, 8), (8, 7), (8, 8)]:
        assert ch[r, c] == pytest.approx(want, abs=1e-15)
    assert ch.max() == pytest.approx(want, abs=1e-15)


def test_boundary_on_segment_is_one():
    lm = LandmarkSet([[2, 8], [13, 8]])
    b = render_boundary_heatmaps(lm, BoundaryDefinition([[0, 1]]), (16, 16), 1.5).data[:, :, 0]
    assert np.all(b[8, 2:14] == 1.0)


def test_boundary_off_segment_value():
    lm = LandmarkSet([[2, 8], [13, 8]])
    b = render_boundary_heatmaps(lm, BoundaryDefinition([[0, 1]]), (16, 16), 1.5).data[:, :, 0]
    # distance 4 < 3 sigma = 4.5, so not truncated
    assert b[12, 8] == pytest.approx(np.exp(-16 / 4.5))
    assert b[12, 8] == pytest.approx(0.0286, abs=1e-4)


def test_boundary_truncated_beyond_three_sigma():
    lm = LandmarkSet([[2, 8], [13, 8]])
    b = render_boundary_heatmaps(lm, BoundaryDefinition([[0, 1]]), (16, 16), 1.5).data[:, :, 0]
    assert b[13, 8] == 0.0  # d = 5
    ys, xs = np.mgrid[0:16, 0:16]
    d = polyline_distance(xs.astype(float), ys.astype(float), np.array([[2, 8], [13, 8]], float))
    assert np.all(b[d > 4.5] == 0)
    assert np.all(b[d <= 4.5] > 0)


def test_polyline_distance_endpoints():
    v = np.array([[0.0, 0.0], [4.0, 0.0], [4.0, 3.0]])
    d = polyline_distance(np.array([-3.0, 2.0, 7.0]), np.array([4.0, 1.0, 3.0]), v)
    np.testing.assert_allclose(d, [5.0, 1.0, 3.0])


def test_no_boundaries_gives_empty_stack():
    st_ = render_boundary_heatmaps(LandmarkSet([[1, 1]]), BoundaryDefinition([]), (8, 8), 1.5)
    assert st_.data.shape == (8, 8, 0)


def test_render_heatmaps_channel_order():
    lm = LandmarkSet([[2, 2], [6, 6], [10, 2]])
    st_ = render_heatmaps(lm, BoundaryDefinition([[0, 1, 2]]), (12, 12))
    assert st_.data.shape == (12, 12, 4)
    assert st_.n_landmarks == 3 and st_.n_boundaries == 1
    assert st_.landmark_channels[2, 2, 0] == 1.0
    assert st_.boundary_channels[6, 6, 0] == 1.0


def test_decode_at_pixel_center():
    pts = np.array([[8.0, 8.0], [3.0, 12.0]])
    got = decode_heatmaps(render_landmark_heatmaps(LandmarkSet(pts), (16, 16), 1.5))
    np.testing.assert_allclose(got.points, pts, atol=1e-6)
    assert got.visibility.tolist() == [1, 1]


def test_decode_subpixel_example():
    got = decode_heatmaps(render_landmark_heatmaps(LandmarkSet([[7.3, 8.0]]), (16, 16), 1.5))
    assert np.abs(got.points[0] - [7.3, 8.0]).max() <= 0.2


def test_decode_zero_channel_is_invisible():
    data = np.zeros((8, 8, 2))
    data[3, 4, 0] = 1.0
    got = decode_heatmaps(HeatmapStack(data, 2))
    assert got.visibility.tolist() == [1, 0]
    assert got.points[1].tolist() == [0.0, 0.0]


def test_decode_ignores_boundary_channels():
    lm = LandmarkSet([[5, 5], [9, 5]])
    st_ = render_heatmaps(lm, BoundaryDefinition([[0, 1]]), (16, 16))
    assert len(decode_heatmaps(st_).points) == 2


def test_invalid_inputs():
    with pytest.raises(ValueError):
        LandmarkSet([[1, 2]], [1, 1])
    with pytest.raises(ValueError):
        LandmarkSet([[np.nan, 2]])
    with pytest.raises(ValueError):
        BoundaryDefinition([[3]])
    with pytest.raises(ValueError):
        render_boundary_heatmaps(LandmarkSet([[1, 1]]), BoundaryDefinition([[0, 5]]), (8, 8))
    with pytest.raises(ValueError):
        render_landmark_heatmaps(LandmarkSet([[1, 1]]), (8, 8), 0.0)


coord = st.floats(0.0, 31.0, allow_nan=False)


@settings(max_examples=150, deadline=None)
@given(x=coord, y=coord, sigma=st.floats(1.0, 3.0))
def test_round_trip_property(x, y, sigma):
    stack = render_landmark_heatmaps(LandmarkSet([[x, y]]), (32, 32), sigma)
    got = decode_heatmaps(stack).points[0]
    assert abs(got[0] - x) <= 0.2 and abs(got[1] - y) <= 0.2


@settings(max_examples=40, deadline=None)
@given(pts=st.lists(st.tuples(coord, coord), min_size=2, max_size=6), seed=st.integers(0, 2 ** 16))
def test_order_invariance(pts, seed):
    pts = np.array(pts)
    perm = np.random.default_rng(seed).permutation(len(pts))
    a = render_landmark_heatmaps(LandmarkSet(pts), (32, 32)).data
    b = render_landmark_heatmaps(LandmarkSet(pts[perm]), (32, 32)).data
    np.testing.assert_array_equal(a[:, :, perm], b)


@settings(max_examples=40, deadline=None)
@given(pts=st.lists(st.tuples(coord, coord), min_size=3, max_size=6))
def test_values_in_unit_interval(pts):
    lm = LandmarkSet(pts)
    st_ = render_heatmaps(lm, BoundaryDefinition([list(range(len(pts)))]), (32, 32))
    assert st_.data.min() >= 0.0 and st_.data.max() <= 1.0
