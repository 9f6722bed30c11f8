import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kitsseg import _accel
from kitsseg.volcore import Geometry, LabelMap, MultiChannelProb, Volume
from kitsseg.xform import (
    BoundingBox,
    EmptyForegroundError,
    IntensityWindow,
    crop,
    foreground_bbox,
    normalize_ct,
    resample,
    resample_to_geometry,
    resampled_shape,
    uncrop,
)


def _sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


@pytest.mark.parametrize(
    "hu, expected",
    [(-54.0, _sigmoid(-1.0)), (94.0, 0.5), (242.0, _sigmoid(1.0))],
)
def test_normalize_ct_closed_form(hu, expected):
    v = Volume(Geometry((1, 1, 1)), np.full((1, 1, 1), hu))
    out = normalize_ct(v, IntensityWindow(-54, 242))
    assert out.data[0, 0, 0] == pytest.approx(expected, abs=1e-7)


def test_normalize_known_values():
    assert _sigmoid(-1.0) == pytest.approx(0.268941, abs=1e-6)
    assert _sigmoid(1.0) == pytest.approx(0.731058, abs=1e-6)


def test_normalize_no_clipping_and_geometry():
    g = Geometry((3, 1, 1), (0.78, 0.78, 0.78), (1, 2, 3))
    v = Volume(g, np.array([-1000.0, -54.0, 500.0]).reshape(3, 1, 1))
    out = normalize_ct(v)
    assert out.geometry == g
    # beyond the window the values keep moving (no clamp at sigmoid(+-1))
    assert out.data[0, 0, 0] < _sigmoid(-1.0) - 0.2
    assert out.data[2, 0, 0] > _sigmoid(1.0) + 0.2
    assert ((out.data > 0) & (out.data < 1)).all()


def test_intensity_window_invalid():
    with pytest.raises(ValueError):
        IntensityWindow(10, 10)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-1024, 1500), min_size=2, max_size=40, unique=True))
def test_normalize_strictly_monotonic(values):
    values = sorted(values)
    v = Volume(Geometry((len(values), 1, 1)), np.array(values, dtype=float).reshape(-1, 1, 1))
    out = normalize_ct(v).data.ravel()
    assert (np.diff(out) > 0).all()


def test_resample_identity(backend, rng):
    g = Geometry((5, 6, 7), (0.78, 1.2, 2.5), (3, 4, 5))
    v = Volume(g, rng.normal(size=g.shape))
    out = resample(v, g.spacing)
    assert out.geometry == g
    assert out.data.tobytes() == v.data.tobytes()
    # the general path (not the early return) is exact too
    from kitsseg.xform import _resample_array

    assert np.float32(_resample_array(v.data, g, g, "trilinear")).tobytes() == v.data.tobytes()


@pytest.mark.parametrize("target", [(0.5, 0.5, 0.5), (2.0, 3.0, 1.7), (0.78, 0.78, 0.78)])
def test_resample_constant(backend, target):
    g = Geometry((6, 5, 4), (1.0, 1.5, 0.9))
    v = Volume(g, np.full(g.shape, 0.7))
    out = resample(v, target)
    assert np.all(out.data == np.float32(0.7))


def test_resample_ramp_hand_computed(backend):
    v = Volume(Geometry((4, 1, 1)), np.arange(4.0).reshape(4, 1, 1))
    out = resample(v, (0.5, 1.0, 1.0))
    assert out.geometry.shape == (8, 1, 1)
    assert out.geometry.origin == v.geometry.origin
    # output voxel j samples source coordinate 0.5*j - 0.25, clamped to [0, 3]
    expected = [0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0]
    assert out.data.ravel().tolist() == pytest.approx(expected, abs=1e-7)


def test_resampled_shape_round_half_up():
    assert resampled_shape((5, 3, 1), (1, 1, 1), (2, 2, 2)) == (3, 2, 1)  # 2.5 -> 3, 1.5 -> 2, 0.5 -> 1
    assert resampled_shape((1, 1, 1), (1, 1, 1), (10, 10, 10)) == (1, 1, 1)


def test_resample_errors():
    v = Volume(Geometry((2, 2, 2)), np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        resample(v, (1, 0, 1))
    lab = LabelMap(Geometry((2, 2, 2)), np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        resample(lab, (2, 2, 2), "trilinear")


def test_resample_to_geometry_identity_and_roundtrip(backend):
    g = Geometry((9, 8, 7), (0.78, 0.78, 0.78), (10, 20, 30))
    v = Volume(g, np.full(g.shape, -3.5))
    assert resample_to_geometry(v, g) is v
    down = resample(v, (2.0, 2.0, 2.0))
    back = resample_to_geometry(down, g)
    assert back.geometry == g and np.all(back.data == np.float32(-3.5))


def _sphere(shape, spacing, radius_mm):
    idx = np.indices(shape).astype(float)
    center = [(n * s) / 2 for n, s in zip(shape, spacing)]
    r2 = sum(((idx[a] + 0.5) * spacing[a] - center[a]) ** 2 for a in range(3))
    return (r2 <= radius_mm**2).astype(np.uint8)


def test_sphere_nearest_volume_ratio(backend):
    s = (0.78, 0.78, 0.78)
    g = Geometry((40, 40, 40), s)
    lab = LabelMap(g, _sphere(g.shape, g.spacing, 10.0))
    native = Geometry(resampled_shape(g.shape, g.spacing, (1, 1, 1)), (1, 1, 1))
    out = resample_to_geometry(lab, native, "nearest")
    analytic_ratio = np.prod(g.spacing) / 1.0  # voxel count scales with 1 / voxel volume
    ratio = out.data.sum() / lab.data.sum()
    assert abs(ratio - analytic_ratio) / analytic_ratio < 0.10
    assert set(np.unique(out.data)) <= {0, 1}


@settings(max_examples=30, deadline=None)
@given(
    shape=st.tuples(*[st.integers(1, 6)] * 3),
    target=st.tuples(*[st.sampled_from([0.4, 0.78, 1.0, 1.3, 2.0, 3.1])] * 3),
    seed=st.integers(0, 10**6),
)
def test_nearest_never_invents_labels(shape, target, seed):
    r = np.random.default_rng(seed)
    data = r.choice([0, 2], size=shape)
    lab = LabelMap(Geometry(shape), data)
    out = resample(lab, target, "nearest")
    assert set(np.unique(out.data)) <= set(np.unique(data))


def test_resample_multichannel_stays_in_unit_range(rng):
    g = Geometry((5, 5, 5))
    p = MultiChannelProb(g, rng.random((3, 5, 5, 5)))
    out = resample(p, (0.7, 1.3, 0.4))
    assert out.num_channels == 3 and out.data.min() >= 0 and out.data.max() <= 1


def test_numba_and_numpy_resample_bit_identical(rng):
    if not _accel.HAVE_NUMBA:
        pytest.skip("numba missing")
    g = Geometry((11, 9, 7), (0.78, 1.1, 2.0), (1, 2, 3))
    v = Volume(g, rng.normal(size=g.shape) * 100)
    prev = _accel.backend()
    try:
        outs = {}
        for b in ("numpy", "numba"):
            _accel.set_backend(b)
            outs[b] = (
                resample(v, (1.0, 0.6, 1.7)).data.tobytes(),
                resample(v, (1.0, 0.6, 1.7), "nearest").data.tobytes(),
            )
    finally:
        _accel.set_backend(prev)
    assert outs["numpy"] == outs["numba"]


# -------------------------------------------------------------- bbox / crop


def test_bbox_single_voxel():
    data = np.zeros((8, 8, 8))
    data[3, 4, 5] = 1
    box = foreground_bbox(LabelMap(Geometry((8, 8, 8)), data), 0)
    assert box.lo == (3, 4, 5) and box.hi == (3, 4, 5)


def test_bbox_margin_clamped():
    data = np.zeros((12, 12, 12))
    data[1, 1, 1] = 1
    data[10, 2, 3] = 2
    box = foreground_bbox(LabelMap(Geometry((12, 12, 12)), data), 2)
    assert box.lo == (0, 0, 0) and box.hi == (11, 4, 5)


def test_bbox_empty():
    with pytest.raises(EmptyForegroundError):
        foreground_bbox(LabelMap(Geometry((3, 3, 3)), np.zeros((3, 3, 3))), 1)


def test_bbox_invalid():
    with pytest.raises(ValueError):
        BoundingBox((0, 0, 0), (3, 1, 1), Geometry((3, 3, 3)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), margin=st.integers(0, 4))
def test_bbox_contains_all_foreground(seed, margin):
    r = np.random.default_rng(seed)
    shape = tuple(r.integers(1, 10, size=3))
    data = (r.random(shape) < 0.05).astype(np.uint8)
    data[tuple(r.integers(0, s) for s in shape)] = 1
    box = foreground_bbox(LabelMap(Geometry(shape), data), margin)
    for v in zip(*np.nonzero(data)):
        assert box.contains(v)


def test_crop_full_is_identity(rng):
    g = Geometry((4, 5, 6), (1, 2, 3), (7, 8, 9))
    v = Volume(g, rng.normal(size=g.shape))
    box = BoundingBox((0, 0, 0), (3, 4, 5), g)
    out = crop(v, box)
    assert out.geometry == g and np.array_equal(out.data, v.data)


def test_crop_origin_shift():
    g = Geometry((5, 5, 5))
    box = BoundingBox((2, 0, 0), (4, 4, 4), g)
    out = crop(Volume(g, np.zeros(g.shape)), box)
    assert out.geometry.origin == (2.0, 0.0, 0.0)


def test_crop_geometry_mismatch():
    box = BoundingBox((0, 0, 0), (1, 1, 1), Geometry((4, 4, 4)))
    with pytest.raises(ValueError):
        crop(Volume(Geometry((5, 5, 5)), np.zeros((5, 5, 5))), box)
    with pytest.raises(ValueError):
        uncrop(Volume(Geometry((3, 3, 3)), np.zeros((3, 3, 3))), box)


def test_uncrop_empty_interior():
    g = Geometry((6, 6, 6))
    box = BoundingBox((1, 1, 1), (3, 3, 3), g)
    lab = LabelMap(box.geometry, np.zeros(box.shape))
    out = uncrop(lab, box, 0)
    assert out.geometry == g and not out.data.any()


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_crop_uncrop_roundtrip(seed):
    r = np.random.default_rng(seed)
    shape = tuple(int(s) for s in r.integers(1, 9, size=3))
    g = Geometry(shape, r.uniform(0.5, 2, size=3), r.uniform(-50, 50, size=3))
    lo = [int(r.integers(0, s)) for s in shape]
    hi = [int(r.integers(l, s)) for l, s in zip(lo, shape)]
    box = BoundingBox(lo, hi, g)
    v = Volume(g, r.normal(size=shape) + 5)
    back = uncrop(crop(v, box), box, 0)
    assert back.geometry == g
    assert np.array_equal(back.data[box.slices], v.data[box.slices])
    outside = np.ones(shape, dtype=bool)
    outside[box.slices] = False
    assert not back.data[outside].any()
    lab = LabelMap(g, r.integers(0, 4, size=shape))
    lback = uncrop(crop(lab, box), box, 0)
    assert np.array_equal(lback.data[box.slices], lab.data[box.slices])
    p = MultiChannelProb(g, r.random((2,) + shape))
    pback = uncrop(crop(p, box), box, 0)
    assert np.array_equal(pback.data[(slice(None),) + box.slices], p.data[(slice(None),) + box.slices])
