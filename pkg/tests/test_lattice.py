import itertools

import numpy as np
import pytest

from qpwave import lattice
from qpwave.lattice import (
    Region,
    block_inner,
    canonical,
    encode,
    enumerate_region,
    is_canonical,
    linf,
    orbit,
    symbol,
)


def test_block_inner_zero_index():
    assert block_inner((0, 0), (0.9, 1.1)) == 0.0


def test_block_inner_direct_arithmetic():
    assert block_inner((2, -1), (1.25, 0.75)) == pytest.approx(1.75, abs=0)


def test_block_inner_symmetry_resonance():
    # a frequency with equal components is resonant for (1, -1)
    assert block_inner((1, -1), (1.0, 1.0)) == 0.0


def test_symbol_zero_index():
    assert symbol((0, 0, 0, 0), (0.9, 1.1, 1.2, 0.8)) == 0.0


def test_symbol_direct():
    assert symbol((1, 1), (0.75, 1.25)) == pytest.approx(4.0, rel=1e-15)


def test_symbol_is_linear_eigenvalue():
    lam = (1.05, 0.723, 0.8, 1.3)
    jt = (1, 0, 0, 2)
    expect = block_inner((1, 0), (1.05, 0.723)) ** 2 + block_inner((0, 2), (0.8, 1.3)) ** 2
    assert symbol(jt, lam) == pytest.approx(expect, rel=1e-15)


def test_symbol_dimension_mismatch():
    with pytest.raises(ValueError):
        symbol((1, 0), (1.0, 1.0, 1.0, 1.0))


def test_orbit_of_zero_is_fixed_point():
    assert orbit((0, 0, 0, 0)) == frozenset({(0, 0, 0, 0)})


def test_orbit_two_nonzero_blocks():
    o = orbit((1, 0, 0, 2))
    assert len(o) == 4
    assert (-1, 0, 0, -2) in o and (1, 0, 0, -2) in o


def test_orbit_idempotent():
    j = (2, -1, 0, 3)
    o = orbit(j)
    for member in o:
        assert orbit(member) == o


def test_symbol_orbit_invariant():
    rng = np.random.default_rng(3)
    lam = (1.05, 0.723, 1.4, 0.6)
    for _ in range(20):
        j = tuple(int(c) for c in rng.integers(-5, 6, size=4))
        s = symbol(j, lam)
        for member in orbit(j):
            assert symbol(member, lam) == s


def test_canonical_consistency():
    rng = np.random.default_rng(5)
    for _ in range(50):
        j = tuple(int(c) for c in rng.integers(-4, 5, size=4))
        c = canonical(j)
        assert is_canonical(c)
        assert c in orbit(j)
        # one canonical representative per orbit
        assert sum(1 for m in orbit(j) if is_canonical(m)) == 1


def test_full_box_count():
    assert len(enumerate_region(Region.full_box(1), 1)) == 9
    assert len(enumerate_region(Region.full_box(2), 1)) == 25
    assert len(enumerate_region(Region.full_box(1), 2)) == 81


def test_box_minus_s_count():
    S = orbit((1, 1))
    region = Region.box_minus(3, S)
    sites = enumerate_region(region, 1)
    assert len(sites) == 49 - len(S)
    for s in S:
        assert s not in sites


def test_generalized_box_matches_orthant_strip():
    cons = ("<", "<")
    region = Region.generalized(2, cons)
    sites = set(enumerate_region(region, 1))
    expected = {
        j for j in itertools.product(range(-2, 3), repeat=2)
        if not (j[0] < 0 and j[1] < 0)
    }
    assert sites == expected


def test_generalized_box_needs_two_constraints():
    with pytest.raises(ValueError):
        Region.generalized(2, ("<", None))


def test_box_minus_s_validates_membership():
    with pytest.raises(ValueError):
        Region.box_minus(1, [(5, 0)])


def test_enumeration_is_lexicographic():
    sites = enumerate_region(Region.full_box(2), 1)
    assert sites == sorted(sites)


def test_box_membership_is_linf():
    region = Region.full_box(3)
    for j in [(3, 3), (-3, 0), (0, -3)]:
        assert region.contains(j)
        assert linf(j) <= 3
    for j in [(4, 0), (0, -4), (4, 4)]:
        assert not region.contains(j)


def test_full_box_closed_under_orbit():
    sites = set(enumerate_region(Region.full_box(2), 2))
    for j in sites:
        assert orbit(j) <= sites


def test_encode_monotone_with_lex_order():
    pts = lattice.sites_array(Region.full_box(2), 1)
    codes = encode(pts, 5)
    assert np.all(np.diff(codes) > 0)


def test_sites_array_matches_enumeration():
    region = Region.box_minus(2, orbit((1, 0)))
    arr = lattice.sites_array(region, 1)
    assert [tuple(map(int, row)) for row in arr] == enumerate_region(region, 1)


def test_canonicalize_array_matches_scalar():
    rng = np.random.default_rng(11)
    pts = rng.integers(-4, 5, size=(40, 4)).astype(np.int64)
    arr = lattice.canonicalize_array(pts)
    for row_in, row_out in zip(pts, arr):
        assert tuple(map(int, row_out)) == canonical(tuple(map(int, row_in)))


def test_orbit_sizes_array():
    pts = np.array([[0, 0, 0, 0], [1, 0, 0, 0], [1, 0, 0, 2]], dtype=np.int64)
    assert list(lattice.orbit_sizes_array(pts)) == [1, 2, 4]


def test_validate_frequency_bounds():
    with pytest.raises(ValueError):
        lattice.validate_frequency((0.5, 1.0))   # boundary excluded
    with pytest.raises(ValueError):
        lattice.validate_frequency((1.0, 1.5))
    assert lattice.validate_frequency((0.51, 1.49)) == (0.51, 1.49)


def test_region_json_roundtrip_fields():
    region = Region.box_minus(3, orbit((1, 1)))
    doc = region.to_json_dict()
    assert doc["kind"] == "box_minus_s"
    assert doc["N"] == 3
    assert sorted(map(tuple, doc["S"])) == sorted(orbit((1, 1)))
