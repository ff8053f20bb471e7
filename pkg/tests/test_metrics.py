import math

import numpy as np
import pytest

from oracles import boundary_points, flood_fill_components, pairwise_surface_distances, random_mask
from pyrseg.metrics import (adb, conform, connected_components, dice, evaluate_case, evaluate_set, extract_boundary,
                            hdb, jaccard, remove_small_components)


def cube(shape, lo, size):
    m = np.zeros(shape, bool)
    m[lo[0]:lo[0] + size, lo[1]:lo[1] + size, lo[2]:lo[2] + size] = True
    return m


# ---------------------------------------------------------------- overlap

def test_dice_examples():
    m = cube((5, 5, 5), (1, 1, 1), 2)
    assert dice(m, m) == 1.0
    assert dice(cube((6, 6, 6), (0, 0, 0), 2), cube((6, 6, 6), (3, 3, 3), 2)) == 0.0
    p, g = np.zeros((4, 1, 1), bool), np.zeros((4, 1, 1), bool)
    p[:4] = True
    g[:2] = True
    assert dice(p, g) == pytest.approx(2 / 3)
    assert jaccard(p, g) == 0.5
    assert dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 2))) == 1.0 == jaccard(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)))


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


def test_conform_values():
    assert conform(dice_value=1.0) == 1.0
    assert conform(dice_value=2 / 3) == pytest.approx(0.0, abs=1e-15)
    # direct evaluation gives 0.7247906; the reference figure 0.72478 is a truncation
    assert conform(dice_value=0.87904) == pytest.approx(0.72478, abs=2e-5)
    assert math.isnan(conform(dice_value=0.0))


def test_jaccard_dice_identity(rng):
    for _ in range(50):
        p, g = rng.random((8, 8, 8)) < 0.3, rng.random((8, 8, 8)) < 0.3
        d = dice(p, g)
        assert abs(jaccard(p, g) - d / (2 - d)) < 1e-6


# ---------------------------------------------------------------- boundaries

def test_boundary_examples():
    single = np.zeros((3, 3, 3), bool)
    single[1, 1, 1] = True
    assert np.array_equal(extract_boundary(single), single)
    b = extract_boundary(np.ones((3, 3, 3), bool))
    assert b.sum() == 26 and not b[1, 1, 1]
    assert not extract_boundary(np.zeros((3, 3, 3), bool)).any()


def test_boundary_matches_neighbour_oracle(rng):
    for _ in range(30):
        m = random_mask(rng, tuple(rng.integers(2, 10, 3)))
        assert {tuple(v) for v in np.argwhere(extract_boundary(m))} == {tuple(map(int, v)) for v in boundary_points(m)}


def test_distance_examples():
    p, g = np.zeros((4, 1, 1), bool), np.zeros((4, 1, 1), bool)
    p[0] = True
    g[2] = True
    assert adb(p, g) == 2.0
    g[:] = False
    g[3] = True
    assert hdb(p, g) == 3.0
    m = cube((6, 6, 6), (1, 1, 1), 3)
    assert adb(m, m) == 0.0 == hdb(m, m)


def test_empty_boundary_is_error():
    with pytest.raises(ValueError, match="empty boundary"):
        adb(np.zeros((3, 3, 3)), np.ones((3, 3, 3)))


def test_distances_match_pairwise_oracle(rng):
    for _ in range(40):
        shape = tuple(rng.integers(2, 13, 3))
        p, g = random_mask(rng, shape), random_mask(rng, shape)
        if not p.any() or not g.any():
            continue
        spacing = tuple(rng.uniform(0.5, 2.0, 3))
        a_ref, h_ref = pairwise_surface_distances(p, g, spacing)
        assert abs(adb(p, g, spacing) - a_ref) < 1e-5
        assert abs(hdb(p, g, spacing) - h_ref) < 1e-5


def test_hdb_at_least_adb(rng):
    for _ in range(200):
        p, g = rng.random((6, 6, 6)) < 0.3, rng.random((6, 6, 6)) < 0.3
        if p.any() and g.any():
            assert hdb(p, g) >= adb(p, g)


# ---------------------------------------------------------------- properties

def test_symmetry(rng):
    for _ in range(20):
        p, g = random_mask(rng, (8, 8, 8)), random_mask(rng, (8, 8, 8))
        if not p.any() or not g.any():
            continue
        for f in (dice, jaccard, adb, hdb):
            assert abs(f(p, g) - f(g, p)) < 1e-6


def test_translation_invariance(rng):
    for _ in range(10):
        p, g = np.zeros((16, 16, 16), bool), np.zeros((16, 16, 16), bool)
        p[2:10, 2:10, 2:10] = random_mask(rng, (8, 8, 8))
        g[2:10, 2:10, 2:10] = random_mask(rng, (8, 8, 8))
        if not p.any() or not g.any():
            continue
        shift = tuple(rng.integers(-2, 6, 3))
        ps, gs = np.roll(p, shift, axis=(0, 1, 2)), np.roll(g, shift, axis=(0, 1, 2))
        a = evaluate_case(p, g, postprocess=False)
        b = evaluate_case(ps, gs, postprocess=False)
        assert a.values() == b.values()


def test_spacing_linearity(rng):
    p, g = random_mask(rng, (10, 10, 10)), random_mask(rng, (10, 10, 10))
    base = evaluate_case(p, g, (0.5, 1.0, 2.0), postprocess=False)
    for s in (0.5, 2.0, 4.0):
        scaled = evaluate_case(p, g, (0.5 * s, 1.0 * s, 2.0 * s), postprocess=False)
        assert scaled.adb_mm == base.adb_mm * s and scaled.hdb_mm == base.hdb_mm * s
        assert (scaled.dice, scaled.jaccard, scaled.conform) == (base.dice, base.jaccard, base.conform)


# ---------------------------------------------------------------- components

def test_component_examples():
    m = cube((10, 10, 10), (0, 0, 0), 3) | cube((10, 10, 10), (6, 6, 6), 2)
    comps = connected_components(m)
    assert [c.size for c in comps] == [27, 8]
    assert connected_components(np.zeros((3, 3, 3))) == []


def test_connectivity_choice():
    m = np.zeros((3, 3, 3), bool)
    m[0, 0, 0] = m[1, 1, 1] = True  # corner-touching only
    assert len(connected_components(m, 26)) == 1
    assert len(connected_components(m, 6)) == 2


def test_ordering_by_size_then_flat_index():
    m = np.zeros((6, 6, 6), bool)
    m[5, 0, 0] = True  # flat index 5
    m[0, 2, 0] = True  # flat index 12
    m[0, 0, 3] = True  # flat index 108
    comps = connected_components(m, 6)
    assert [tuple(c.voxels[0]) for c in comps] == [(5, 0, 0), (0, 2, 0), (0, 0, 3)]


@pytest.mark.parametrize("connectivity", [6, 26])
def test_components_match_flood_fill(rng, connectivity):
    for _ in range(15):
        m = rng.random(tuple(rng.integers(3, 12, 3))) < rng.uniform(0.1, 0.4)
        ours = [sorted(map(tuple, c.voxels.tolist())) for c in connected_components(m, connectivity)]
        assert ours == flood_fill_components(m, connectivity)


def test_remove_small_components():
    big, small = cube((20, 20, 20), (0, 0, 0), 5), cube((20, 20, 20), (10, 10, 10), 2)  # 125 vs 8
    out = remove_small_components(big | small, min_fraction=0.1)
    assert np.array_equal(out, big)
    assert np.array_equal(remove_small_components(big | small, min_fraction=0.0), big | small)
    assert np.array_equal(remove_small_components(big, min_fraction=1.0), big)
    assert not remove_small_components(np.zeros((3, 3, 3))).any()
    with pytest.raises(ValueError):
        remove_small_components(big, min_fraction=1.5)


# ---------------------------------------------------------------- reports

def test_perfect_case_report():
    m = cube((8, 8, 8), (2, 2, 2), 3)
    rep = evaluate_set([evaluate_case(m, m, case="a")])
    assert rep.cases[0].values() == {"dice": 1.0, "conform": 1.0, "jaccard": 1.0, "adb_mm": 0.0, "hdb_mm": 0.0}
    lines = rep.to_csv().splitlines()
    assert lines[0] == "case,dice,conform,jaccard,adb_mm,hdb_mm"
    assert lines[1] == "a,1.000000,1.000000,1.000000,0.000,0.000"
    assert lines[-1] == "MEAN,1.000000,1.000000,1.000000,0.000,0.000"


def test_mean_over_cases():
    m = cube((8, 8, 8), (0, 0, 0), 2)
    two = cube((8, 8, 8), (4, 4, 4), 2)
    a = evaluate_case(m, m, case="a")
    b = evaluate_case(m | two, m, case="b", postprocess=False)  # dice 2*8/(16+8)
    rep = evaluate_set([a, b])
    assert rep.mean["dice"] == pytest.approx((1.0 + 2 / 3) / 2)


def test_failed_cases_are_reported_not_dropped():
    m = cube((6, 6, 6), (1, 1, 1), 2)
    far = cube((6, 6, 6), (4, 4, 4), 2)
    bad = evaluate_case(np.zeros((6, 6, 6)), m, case="empty")
    off = evaluate_case(far, m, case="disjoint", postprocess=False)
    wrong = evaluate_case(np.zeros((5, 5, 5)), m, case="dims")
    rep = evaluate_set([evaluate_case(m, m, case="ok"), bad, off, wrong])
    assert [c.case for c in rep.failed()] == ["empty", "disjoint", "dims"]
    assert math.isnan(off.conform) and off.dice == 0.0
    assert rep.mean["conform"] == 1.0  # undefined conform values are excluded
    assert "nan" in rep.to_csv().splitlines()[2]


def test_postprocessing_applied_to_prediction():
    gt = cube((20, 20, 20), (0, 0, 0), 5)
    pred = gt | cube((20, 20, 20), (15, 15, 15), 1)
    assert evaluate_case(pred, gt).dice == 1.0
    assert evaluate_case(pred, gt, postprocess=False).dice < 1.0
