import itertools

import numpy as np
import pytest

from radiomap.grid import (IDENTITY, D4Element, FeatureStack, GridError, NormalizationSpec, as_grid,
                           d4_azimuth, d4_compose, d4_elements, d4_inverse, d4_point, d4_transform,
                           denormalize, normalize, resize_bilinear, resize_nearest)


def test_eight_distinct_elements_identity_first():
    els = d4_elements()
    assert len(set(els)) == 8
    assert els[0] == IDENTITY and els[0].is_identity


def test_rot90_four_times_and_flip_twice_are_identity(rng):
    g = rng.normal(size=(7, 7))
    r = D4Element(1)
    out = g
    for _ in range(4):
        out = d4_transform(out, r)
    assert np.array_equal(out, g)
    f = D4Element(0, True)
    assert np.array_equal(d4_transform(d4_transform(g, f), f), g)


def test_quarter_turn_2x2_example():
    out = d4_transform(np.array([[1, 2], [3, 4]]), D4Element(1))
    assert out.tolist() == [[2, 4], [1, 3]]


def test_flip_mirrors_columns():
    out = d4_transform(np.array([[1, 2, 3]]), D4Element(0, True))
    assert out.tolist() == [[3, 2, 1]]


def test_odd_rotation_needs_square():
    with pytest.raises(GridError):
        d4_transform(np.zeros((3, 4)), D4Element(1))
    assert d4_transform(np.zeros((3, 4)), D4Element(2)).shape == (3, 4)


def test_inverse_examples():
    assert d4_inverse(IDENTITY) == IDENTITY
    assert d4_inverse(D4Element(1)) == D4Element(3)


@pytest.mark.parametrize("e", d4_elements(), ids=str)
def test_inverse_round_trip_every_element(e, rng):
    for _ in range(5):
        g = rng.normal(size=(2, 6, 6))
        assert np.array_equal(d4_transform(d4_transform(g, e), d4_inverse(e)), g)
        assert d4_compose(d4_inverse(e), e) == IDENTITY


def test_composition_closed_and_matches_transforms(rng):
    g = rng.normal(size=(5, 5))
    els = set(d4_elements())
    for a, b in itertools.product(d4_elements(), repeat=2):
        c = d4_compose(a, b)
        assert c in els
        assert np.array_equal(d4_transform(g, c), d4_transform(d4_transform(g, b), a))


@pytest.mark.parametrize("e", d4_elements(), ids=str)
def test_transform_is_a_permutation(e, rng):
    g = rng.normal(size=(6, 6))
    assert np.array_equal(np.sort(d4_transform(g, e).ravel()), np.sort(g.ravel()))


@pytest.mark.parametrize("e", d4_elements(), ids=str)
def test_point_map_follows_cells(e):
    # a marker at cell (i, j) lands where the point map sends the cell centre
    n = 6
    for i, j in [(0, 0), (1, 4), (5, 2)]:
        g = np.zeros((n, n))
        g[i, j] = 1
        r, c = d4_point(i + 0.5, j + 0.5, n, e)
        assert d4_transform(g, e)[int(r), int(c)] == 1
        assert (r % 1, c % 1) == (0.5, 0.5)


@pytest.mark.parametrize("e", d4_elements(), ids=str)
def test_azimuth_map_follows_points(e):
    n = 10
    r0, c0 = 5.0, 5.0
    for az in (0.0, 30.0, 90.0, 200.0, 333.0):
        dr, dc = -np.sin(np.radians(az)), np.cos(np.radians(az))
        a = d4_point(r0, c0, n, e)
        b = d4_point(r0 + dr, c0 + dc, n, e)
        mapped = np.degrees(np.arctan2(-(b[0] - a[0]), b[1] - a[1])) % 360
        assert abs((mapped - d4_azimuth(az, e) + 180) % 360 - 180) < 1e-9


def test_resize_identity_and_constant(rng):
    g = rng.normal(size=(5, 7))
    assert np.array_equal(resize_bilinear(g, 5, 7), g)
    c = np.full((3, 4), 2.5)
    assert np.allclose(resize_bilinear(c, 11, 6), 2.5, atol=0, rtol=0)


def test_resize_2x2_to_4x4_rows():
    out = resize_bilinear(np.array([[0.0, 0.0], [1.0, 1.0]]), 4, 4)
    # source rows (i + .5) / 2 - .5 -> -.25, .25, .75, 1.25, clamped to [0, 1]
    assert np.allclose(out, np.array([0.0, 0.25, 0.75, 1.0])[:, None] * np.ones((1, 4)), atol=1e-15)


def test_resize_range_and_monotone(rng):
    g = rng.uniform(size=(6, 5))
    out = resize_bilinear(g, 13, 9)
    assert out.min() >= g.min() - 1e-12 and out.max() <= g.max() + 1e-12
    for _ in range(10):
        bumped = g.copy()
        bumped[rng.integers(6), rng.integers(5)] += rng.uniform(0.1, 1.0)
        assert np.all(resize_bilinear(bumped, 13, 9) >= out - 1e-12)


def test_resize_rejects_bad_size():
    with pytest.raises(GridError):
        resize_bilinear(np.zeros((2, 2)), 0, 3)
    with pytest.raises(GridError):
        resize_nearest(np.zeros((2, 2)), 2, -1)


def test_resize_nearest_picks_source_values(rng):
    g = rng.normal(size=(4, 4))
    out = resize_nearest(g, 8, 8)
    assert np.array_equal(out[::2, ::2], g)
    assert set(resize_nearest(g, 3, 3).ravel()) <= set(g.ravel())


def test_normalize_examples():
    spec = NormalizationSpec(13, 160)
    assert normalize(13, spec) == 0.0
    assert normalize(160, spec) == 1.0
    assert normalize((13 + 160) / 2, spec) == 0.5
    assert normalize(500, spec) == 1.0 and normalize(-5, spec) == 0.0


def test_normalize_round_trip(rng):
    spec = NormalizationSpec()
    v = rng.uniform(13, 160, size=1000)
    assert np.all(np.abs(denormalize(normalize(v, spec), spec) - v) <= 1e-6 * np.abs(v))


def test_invalid_spec():
    with pytest.raises(GridError):
        NormalizationSpec(10, 10)


def test_feature_stack_invariants(rng):
    s = FeatureStack.from_grids([rng.normal(size=(3, 3)), np.zeros((3, 3))], ["a", "b"])
    assert s.shape == (3, 3) and len(s) == 2
    assert np.array_equal(s.channel("b"), np.zeros((3, 3)))
    assert s.append(np.ones((3, 3)), "c").channel_names == ["a", "b", "c"]
    with pytest.raises(GridError):
        FeatureStack.from_grids([np.zeros((2, 2)), np.zeros((2, 3))], ["a", "b"])
    with pytest.raises(GridError):
        FeatureStack(np.zeros((2, 2, 2)), ["a", "a"])
    with pytest.raises(GridError):
        as_grid([[np.nan]])
