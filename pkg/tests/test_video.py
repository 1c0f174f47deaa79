import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from vpsketch.video import (
    Brick,
    Histogram,
    RegionLabeling,
    VideoVolume,
    build_histogram,
    l1_gap,
    make_bin_edges,
    make_volume,
    quantize,
    tv_distance,
    LABEL_SKETCHABLE,
    LABEL_TRACKABLE,
)


def test_volume_shape_and_accessors():
    data = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    vol = make_volume(data)
    assert (vol.frames, vol.height, vol.width) == (2, 3, 4)
    assert vol.n_sites == 24
    assert vol.max_value == 255
    assert np.array_equal(vol.frame(1), data[1])


def test_volume_rejects_bad_input():
    with pytest.raises(ValueError):
        make_volume(np.zeros((2, 2), dtype=np.uint8))
    with pytest.raises(ValueError):
        make_volume(np.zeros((1, 2, 2), dtype=np.uint8), bit_depth=9)
    with pytest.raises(ValueError):
        make_volume(np.full((1, 2, 2), 16, dtype=np.uint8), bit_depth=4)


def test_volume_is_immutable():
    vol = make_volume(np.zeros((1, 2, 2), dtype=np.uint8))
    with pytest.raises(ValueError):
        vol.data[0, 0, 0] = 1


def test_quantize_midpoint_rounds_up():
    vol = make_volume(np.full((1, 2, 2), 128, dtype=np.uint8))
    q = quantize(vol, 4)
    # 128 * 15 / 255 = 7.529..., +0.5 floor -> 8
    assert q.bit_depth == 4
    assert np.all(q.data == 8)


def test_quantize_endpoints_exact():
    vol = make_volume(np.array([[[0, 255]]], dtype=np.uint8))
    q = quantize(vol, 4)
    assert q.data.ravel().tolist() == [0, 15]


def test_quantize_identity_at_same_depth():
    vol = make_volume(np.array([[[3, 7]]], dtype=np.uint8), bit_depth=4)
    assert quantize(vol, 4) is vol


@given(st.integers(1, 8), st.integers(0, 255))
def test_quantize_stays_in_range(depth, value):
    vol = make_volume(np.full((1, 1, 1), value, dtype=np.uint8))
    q = quantize(vol, depth)
    assert 0 <= int(q.data[0, 0, 0]) <= q.max_value


def test_histogram_identical_values_single_bin():
    edges = make_bin_edges(0, 10, 5)
    h = build_histogram(np.full(50, 3.0), edges)
    assert h.mass[1] == 1.0
    assert h.mass.sum() == 1.0


def test_histogram_clamps_out_of_range():
    edges = make_bin_edges(0, 1, 4)
    h = build_histogram(np.array([-5.0, 0.1, 9.0]), edges)
    assert h.mass[0] == pytest.approx(2 / 3)
    assert h.mass[-1] == pytest.approx(1 / 3)


def test_degenerate_range_widens():
    edges = make_bin_edges(2.0, 2.0, 3)
    assert edges[0] < 2.0 < edges[-1]
    h = build_histogram(np.full(4, 2.0), edges)
    assert h.mass.sum() == pytest.approx(1.0)


def test_histogram_validation():
    with pytest.raises(ValueError):
        Histogram(bin_edges=np.array([0.0, 1.0]), mass=np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        Histogram(bin_edges=np.array([0.0, 1.0, 1.0]), mass=np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        Histogram(bin_edges=np.array([0.0, 0.5, 1.0]), mass=np.array([0.9, 0.2]))


def test_tv_distance_hand_value():
    edges = np.array([0.0, 0.5, 1.0])
    a = Histogram(bin_edges=edges, mass=np.array([0.5, 0.5]))
    b = Histogram(bin_edges=edges, mass=np.array([0.75, 0.25]))
    assert tv_distance(a, b) == pytest.approx(0.25)
    assert l1_gap(a, b) == pytest.approx(0.5)


def test_tv_distance_rejects_mismatched_bins():
    a = Histogram(bin_edges=np.array([0.0, 0.5, 1.0]), mass=np.array([0.5, 0.5]))
    b = Histogram(bin_edges=np.array([0.0, 1.0]), mass=np.array([1.0]))
    with pytest.raises(ValueError):
        tv_distance(a, b)


@st.composite
def _mass_vectors(draw):
    n = draw(st.integers(2, 12))
    raw = draw(
        st.lists(st.floats(0.0, 1.0, allow_nan=False), min_size=n, max_size=n).filter(
            lambda xs: sum(xs) > 1e-6
        )
    )
    arr = np.asarray(raw)
    return arr / arr.sum()


@given(_mass_vectors(), _mass_vectors())
@settings(max_examples=60)
def test_tv_distance_properties(pa, pb):
    n = min(pa.size, pb.size)
    pa, pb = pa[:n] / pa[:n].sum(), pb[:n] / pb[:n].sum()
    edges = np.arange(n + 1, dtype=np.float64)
    a = Histogram(bin_edges=edges, mass=pa)
    b = Histogram(bin_edges=edges, mass=pb)
    d = tv_distance(a, b)
    assert 0.0 <= d <= 1.0
    assert d == pytest.approx(tv_distance(b, a))
    assert tv_distance(a, a) == 0.0


def test_histogram_matches_normal_bin_probabilities():
    # Analytic oracle: bin mass of N(0,1) over [-3,3] with clamped tails.
    rng = np.random.default_rng(7)
    n = 200_000
    samples = rng.standard_normal(n)
    edges = make_bin_edges(-3.0, 3.0, 15)
    h = build_histogram(samples, edges)
    cdf = norm.cdf(edges)
    expected = np.diff(cdf)
    expected[0] += cdf[0]
    expected[-1] += 1.0 - cdf[-1]
    band = 3.0 * np.sqrt(expected * (1 - expected) / n)
    assert np.all(np.abs(h.mass - expected) <= band)


def test_region_labeling_consistency():
    labels = np.zeros((3, 22, 22), dtype=np.int16)
    labels[0:3, 0:11, 0:11] = LABEL_TRACKABLE
    labels[0, 11:22, 11:22] = LABEL_SKETCHABLE
    bricks = [
        Brick(x=0, y=0, t=1, size=11, n_frames=3),
        Brick(x=11, y=11, t=0, size=11, n_frames=1),
    ]
    lab = RegionLabeling(label_map=labels, bricks=bricks)
    assert lab.implicit_region_ids == [0]
    assert lab.explicit_mask().sum() == 11 * 11 * 3 + 11 * 11
    total = lab.explicit_mask().sum() + (lab.label_map >= 0).sum()
    assert total == labels.size


def test_region_labeling_rejects_overlap():
    labels = np.full((1, 11, 22), LABEL_SKETCHABLE, dtype=np.int16)
    bricks = [
        Brick(x=0, y=0, t=0),
        Brick(x=5, y=0, t=0),
    ]
    with pytest.raises(ValueError):
        RegionLabeling(label_map=labels, bricks=bricks)


def test_region_labeling_rejects_out_of_bounds():
    labels = np.zeros((1, 8, 8), dtype=np.int16)
    with pytest.raises(ValueError):
        RegionLabeling(label_map=labels, bricks=[Brick(x=0, y=0, t=0)])
