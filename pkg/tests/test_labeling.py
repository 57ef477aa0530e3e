import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from floodkd.errors import DegenerateInputError, SchemaError
from floodkd.labeling import (dilate, dilate_cloud_mask, edge_maps, erode, improve_weak_label,
                              otsu_bin_split, otsu_segment, otsu_threshold, weak_label_from_ndwi,
                              weight_map)
from floodkd.raster import CLOUD, DRY, INVALID, WATER, ClassMask, Raster

from oracles import (chebyshev_dilate_bruteforce, edge_maps_bruteforce, morph_bruteforce,
                     otsu_bruteforce)

codes_strategy = hnp.arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)),
                            elements=st.integers(0, 3))


def nd(values):
    return Raster(("NDWI",), np.asarray(values, np.float32)[None])


def occ(values):
    return Raster(("occurrence",), np.asarray(values, np.float32)[None])


# --- morphology ---------------------------------------------------------------

def test_erode_5x5_block():
    out = erode(np.ones((5, 5), bool))
    expected = np.zeros((5, 5), bool)
    expected[1:4, 1:4] = True
    np.testing.assert_array_equal(out, expected)
    np.testing.assert_array_equal(out, morph_bruteforce(np.ones((5, 5), bool), "erode"))


def test_dilate_empty_and_closing():
    assert not dilate(np.zeros((4, 4), bool), 3).any()
    single = np.zeros((7, 7), bool)
    single[3, 3] = True
    closed = erode(dilate(single))
    assert closed[3, 3] and closed.sum() >= 1
    assert np.array_equal(dilate(single, 0), single)


def test_morphology_matches_bruteforce_many(rng):
    for _ in range(60):
        m = rng.random(rng.integers(1, 20, 2)) < rng.random()
        for border in (False, True):
            np.testing.assert_array_equal(dilate(m, border_value=border),
                                          morph_bruteforce(m, "dilate", border))
            np.testing.assert_array_equal(erode(m, border_value=border),
                                          morph_bruteforce(m, "erode", border))


@given(hnp.arrays(bool, st.tuples(st.integers(1, 15), st.integers(1, 15))), st.integers(0, 3),
       st.booleans())
def test_erode_dilate_duality(m, k, border):
    np.testing.assert_array_equal(erode(m, k, border), ~dilate(~m, k, not border))


# --- cloud dilation -------------------------------------------------------------

def test_dilate_cloud_examples():
    m = ClassMask.full(7, 7, DRY)
    assert dilate_cloud_mask(m, 0) == m
    codes = np.zeros((7, 7), np.uint8)
    codes[3, 3] = CLOUD
    out = dilate_cloud_mask(ClassMask(codes), 1).codes
    assert np.all(out[2:5, 2:5] == CLOUD) and np.count_nonzero(out == CLOUD) == 9


def test_dilate_cloud_bruteforce(rng):
    for _ in range(20):
        codes = rng.choice([DRY, WATER, CLOUD, INVALID], size=(12, 10), p=[0.5, 0.3, 0.05, 0.15])
        m = ClassMask(codes)
        two = dilate_cloud_mask(m, 2)
        assert two == dilate_cloud_mask(dilate_cloud_mask(m, 1), 1)
        grown = chebyshev_dilate_bruteforce(codes == CLOUD, 2)
        np.testing.assert_array_equal(two.codes == CLOUD, grown)
        np.testing.assert_array_equal(two.codes[~grown], codes[~grown])


@given(codes_strategy, st.integers(0, 3), st.integers(0, 3))
def test_dilate_cloud_composes(codes, r1, r2):
    m = ClassMask(codes)
    assert dilate_cloud_mask(dilate_cloud_mask(m, r1), r2) == dilate_cloud_mask(m, r1 + r2)


# --- weak labels ------------------------------------------------------------------

def test_weak_label_threshold():
    out = weak_label_from_ndwi(nd([[0.01, -0.01, 0.0, 0.9]]),
                               ClassMask(np.array([[DRY, DRY, DRY, CLOUD]]))).codes
    np.testing.assert_array_equal(out, [[WATER, DRY, DRY, CLOUD]])


def test_weak_label_shape_mismatch():
    with pytest.raises(SchemaError):
        weak_label_from_ndwi(nd(np.zeros((2, 2))), ClassMask.full(3, 3))


@given(hnp.arrays(np.float32, (6, 5), elements=st.floats(-1, 1, width=32)),
       hnp.arrays(np.uint8, (6, 5), elements=st.integers(0, 3)))
def test_weak_label_water_set(values, cloud):
    out = weak_label_from_ndwi(nd(values), ClassMask(cloud)).codes
    np.testing.assert_array_equal(out == WATER, (values > 0) & (cloud < CLOUD))


def test_improve_examples():
    weak = ClassMask(np.array([[DRY, DRY, CLOUD, WATER, INVALID]]))
    out = improve_weak_label(weak, occ([[0.6, 0.4, 0.99, 0.0, 0.9]])).codes
    np.testing.assert_array_equal(out, [[WATER, DRY, CLOUD, WATER, INVALID]])
    assert improve_weak_label(weak, occ([[0.5, 0.5, 0.5, 0.5, 0.5]])) == weak
    with pytest.raises(SchemaError):
        improve_weak_label(weak, occ(np.zeros((2, 2))))


@given(codes_strategy, st.data())
def test_improve_monotone_idempotent(codes, data):
    prob = data.draw(hnp.arrays(np.float32, codes.shape, elements=st.floats(0, 1, width=32)))
    weak = ClassMask(codes)
    once = improve_weak_label(weak, occ(prob))
    assert np.all(once.codes[weak.codes == WATER] == WATER)
    assert np.all(once.codes[weak.codes >= CLOUD] == weak.codes[weak.codes >= CLOUD])
    assert improve_weak_label(once, occ(prob)) == once


# --- Otsu -------------------------------------------------------------------------------

def test_otsu_two_modes():
    band = np.array([0.2] * 40 + [0.8] * 60, np.float32)
    t = otsu_threshold(band)
    assert 0.2 < t <= 0.8


def test_otsu_gaussian_mixture(rng):
    x = np.concatenate([rng.normal(0.25, 0.05, 5000), rng.normal(0.75, 0.05, 5000)])
    t = otsu_threshold(x)
    # exhaustive oracle over the same histogram
    counts, edges = np.histogram(x, bins=256, range=(x.min(), x.max()))
    k = otsu_bruteforce(counts, (edges[:-1] + edges[1:]) / 2)
    assert t == pytest.approx(edges[k])
    assert abs(t - 0.5) <= 0.05


def test_otsu_constant_band():
    with pytest.raises(DegenerateInputError):
        otsu_threshold(np.full((4, 4), 0.3))


def test_otsu_matches_bruteforce(rng):
    for trial in range(60):
        n_bins = int(rng.integers(2, 40))
        counts = rng.integers(0, 50, n_bins) * (rng.random(n_bins) < 0.7)
        if np.count_nonzero(counts) < 2:
            counts[0], counts[-1] = 3, 5
        centers = np.sort(rng.random(n_bins))
        assert otsu_bin_split(counts, centers) == otsu_bruteforce(list(counts), list(centers)), trial


def test_otsu_segment_dark_river():
    vv = np.full((32, 32), 0.6, np.float32)
    vv[:, 14:18] = 0.05
    s1 = Raster.from_bands({"VV": vv, "VH": vv})
    out = otsu_segment(s1).codes
    assert np.all(out[:, 14:18] == WATER) and np.all(out[:, :14] == DRY)


def test_otsu_segment_inverted_contrast_fails():
    # bright water breaks the dark-water assumption by construction
    vv = np.full((16, 16), 0.1, np.float32)
    vv[:, :3] = 0.9
    out = otsu_segment(Raster.from_bands({"VV": vv, "VH": vv})).codes
    assert np.all(out[:, :3] == DRY) and np.all(out[:, 3:] == WATER)


def test_otsu_segment_missing_band():
    with pytest.raises(SchemaError):
        otsu_segment(Raster.from_bands({"VH": np.ones((4, 4))}))


# --- edges and weights -------------------------------------------------------------------

def test_edge_maps_block():
    e = edge_maps(ClassMask.full(5, 5, WATER))
    ring = np.ones((5, 5), bool)
    ring[1:4, 1:4] = False
    np.testing.assert_array_equal(e.inner, ring)
    assert e.inner.sum() == 16 and not e.outer.any()


def test_edge_maps_single_pixel_and_empty():
    codes = np.zeros((5, 5), np.uint8)
    assert not edge_maps(ClassMask(codes)).inner.any()
    codes[2, 2] = WATER
    e = edge_maps(ClassMask(codes))
    assert e.inner.sum() == 1 and e.inner[2, 2]
    hood = np.zeros((5, 5), bool)
    hood[1:4, 1:4] = True
    hood[2, 2] = False
    np.testing.assert_array_equal(e.outer, hood)


def test_edge_maps_bruteforce_64(rng):
    for _ in range(50):
        codes = rng.choice([DRY, WATER, CLOUD, INVALID], size=(64, 64), p=[0.45, 0.45, 0.05, 0.05])
        e = edge_maps(ClassMask(codes))
        inner, outer = edge_maps_bruteforce(codes)
        np.testing.assert_array_equal(e.inner, inner)
        np.testing.assert_array_equal(e.outer, outer)
        water = codes == WATER
        interior = water & ~e.inner
        rest = (codes == DRY) & ~e.outer
        parts = np.stack([e.inner, interior, e.outer, rest]).astype(int)
        np.testing.assert_array_equal(parts.sum(0), (codes < CLOUD).astype(int))


def test_weight_map_values():
    codes = np.zeros((7, 7), np.uint8)
    codes[2:5, 2:5] = WATER
    codes[0, 6] = CLOUD
    codes[6, 0] = INVALID
    w = weight_map(ClassMask(codes))
    assert w[2, 2] == 10 and w[3, 3] == 1       # inner edge, interior
    assert w[1, 1] == 5 and w[6, 6] == 1        # outer edge, plain dry
    assert w[0, 6] == 0 and w[6, 0] == 0
    assert set(np.unique(w)) <= {0.0, 1.0, 5.0, 10.0}
