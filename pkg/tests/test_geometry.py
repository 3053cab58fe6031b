import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ghzclock import geometry
from ghzclock.constants import A_LAT, C6, OMEGA_R


def test_standard_patterns():
    a4 = geometry.standard_arrangement(4)
    assert (a4.cols, a4.rows, a4.dx, a4.dy) == (2, 2, 2, 2)
    a9 = geometry.standard_arrangement(9)
    assert (a9.cols, a9.rows, a9.dx, a9.dy) == (3, 3, 2, 1)
    a2 = geometry.standard_arrangement(2)
    assert a2.positions == ((0, 0), (2, 0))
    a8 = geometry.standard_arrangement(8)
    assert a8.num_atoms == 8 and set(a8.positions) < set(a9.positions)


@pytest.mark.parametrize("n", [1, 3, 5, 7, 10])
def test_unsupported_size(n):
    with pytest.raises(geometry.GeometryError):
        geometry.standard_arrangement(n)


def test_duplicate_positions_rejected():
    with pytest.raises(geometry.GeometryError):
        geometry.Arrangement(((0, 0), (0, 0)))


def test_pair_interaction_formula():
    arr = geometry.Arrangement(((0, 0), (2, 0)))
    v = geometry.pair_interactions(arr)
    assert v[0, 1] == pytest.approx(C6 / (2 * 575e-9) ** 6, rel=1e-12)
    assert v[0, 0] == 0 and v[0, 1] == v[1, 0]


def test_interactions_loop_oracle(rng):
    pts = rng.choice(100, size=6, replace=False)
    arr = geometry.Arrangement(tuple((int(p % 10), int(p // 10)) for p in pts))
    v = geometry.pair_interactions(arr)
    for i, j in itertools.combinations(range(6), 2):
        (x1, y1), (x2, y2) = arr.positions[i], arr.positions[j]
        r = math.hypot(x1 - x2, y1 - y2) * A_LAT
        assert v[i, j] == pytest.approx(C6 / r**6, rel=1e-12)


def test_doubling_distances():
    arr = geometry.standard_arrangement(9)
    v1 = geometry.pair_interactions(arr)
    v2 = geometry.pair_interactions(arr.scaled(2))
    np.testing.assert_allclose(v2 * 64, v1, rtol=1e-12)


@pytest.mark.parametrize("n", [2, 4, 6, 8, 9])
def test_table_umin(n):
    value, err = geometry.TABLE_UMIN[n]
    assert abs(geometry.table_umin(n) - value) <= err


def test_caption_formula_is_pattern_diagonal():
    arr = geometry.standard_arrangement(4, wide=True)
    assert arr.caption_extent() == pytest.approx(math.hypot(2 * 3, 2 * 2) * A_LAT)
    assert geometry.caption_umin(arr) < geometry.min_pair_energy(arr)


def test_blockade_radius():
    assert geometry.blockade_radius() == pytest.approx((10.4e9 / 4e6) ** (1 / 6) * 1e-6, rel=1e-12)
    assert geometry.blockade_radius(rabi=64 * OMEGA_R) == pytest.approx(geometry.blockade_radius() / 2)
    assert geometry.blockade_radius(2 * C6) > geometry.blockade_radius(C6)
    with pytest.raises(geometry.GeometryError):
        geometry.blockade_radius(-1.0)


def test_capacity_exponents():
    for regime, exp in (("lattice_limited", 25 / 6), ("resonance_limited", -7 / 6)):
        out = geometry.capacity_scaling(40, 80, regime)
        slope = np.polyfit(np.log(out["n"]), np.log(out["n_b"]), 1)[0]
        assert slope == pytest.approx(exp, abs=1e-10)
    with pytest.raises(geometry.GeometryError):
        geometry.capacity_scaling(40, 80, "other")


def test_crossover_peak():
    n = np.linspace(20, 100, 801)
    nb = geometry.crossover_capacity(n, 47.0)
    assert n[np.argmax(nb)] == pytest.approx(47.0, abs=0.1)
    assert nb.max() == pytest.approx(1.0, abs=1e-3)


def test_arrangement_file_round_trip(tmp_path):
    arr = geometry.standard_arrangement(6)
    path = tmp_path / "arr.txt"
    geometry.save_arrangement(arr, path)
    back = geometry.load_arrangement(path)
    assert back.positions == arr.positions
    assert (back.cols, back.rows, back.dx, back.dy) == (arr.cols, arr.rows, arr.dx, arr.dy)


def test_preset_names():
    assert geometry.arrangement_from_name("standard-4-wide").dx == 3
    with pytest.raises(geometry.GeometryError):
        geometry.arrangement_from_name("ring-4")


@given(st.sets(st.tuples(st.integers(-8, 8), st.integers(-8, 8)), min_size=2, max_size=8))
def test_interaction_properties(points):
    arr = geometry.Arrangement(tuple(points))
    v = geometry.pair_interactions(arr)
    d = arr.distances()
    assert np.allclose(v, v.T)
    iu = np.triu_indices(arr.num_atoms, 1)
    assert np.all(v[iu] > 0)
    order = np.argsort(d[iu])
    vs, ds = v[iu][order], d[iu][order]
    # strictly decreasing where distances strictly increase
    for k in range(len(ds) - 1):
        if ds[k + 1] > ds[k] * (1 + 1e-12):
            assert vs[k + 1] < vs[k]
