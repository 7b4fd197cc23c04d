"""Sphere geometry and rational map tests.

Expected values marked as frozen constants were derived by hand from the
defining formulas (chordal metric, chain rule) or recomputed with sympy in
a throwaway session; they are asserted as literals on purpose.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from motionlab.errors import DegenerateMapError, InvalidArgumentError
from motionlab.sphere import (
    EQUALITY_TOL,
    RationalMap,
    SpherePoint,
    aberth_roots,
    chordal_dist,
    chordal_dist_arrays,
    conjugate_by_rotation,
    critical_orbit_distance,
    critical_points,
    multiplier,
    orbit,
    preimage_fibers,
    preimages,
    r3_embed_arrays,
)

INF = SpherePoint.infinity()


def pt(re, im=0.0):
    return SpherePoint(complex(re, im))


def squaring_map():
    return RationalMap([0, 0, 1], [1])


def quad(c):
    return RationalMap([c, 0, 1], [1])


# ---------------------------------------------------------------------------
# chordal metric


def test_chordal_zero_one():
    # |0 - 1| / sqrt(1 * 2) = 1/sqrt(2)
    assert chordal_dist(pt(0), pt(1)) == pytest.approx(1 / math.sqrt(2), abs=1e-15)


def test_chordal_to_infinity():
    assert chordal_dist(pt(0), INF) == pytest.approx(1.0, abs=1e-15)
    assert chordal_dist(pt(1), INF) == pytest.approx(1 / math.sqrt(2), abs=1e-15)
    assert chordal_dist(INF, INF) == 0.0


def test_chordal_diameter_is_one():
    assert chordal_dist(pt(1e300), pt(-1e300)) <= 1.0
    assert chordal_dist(pt(0), INF) == 1.0


def test_point_equality_tolerance():
    assert pt(1.0) == pt(1.0 + 0.5 * EQUALITY_TOL)
    assert pt(1.0) != pt(1.0 + 1e-6)
    assert INF == SpherePoint.infinity()
    assert INF == pt(1e300)  # chordally closer than the tolerance


def test_point_rejects_nonfinite():
    with pytest.raises(InvalidArgumentError):
        SpherePoint(complex(math.inf, 0))
    with pytest.raises(InvalidArgumentError):
        SpherePoint(complex(0, math.nan))


finite_complex = st.builds(
    complex,
    st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False),
    st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False),
)
sphere_points = st.one_of(
    st.builds(SpherePoint, finite_complex),
    st.just(SpherePoint.infinity()),
)


@given(sphere_points, sphere_points)
@settings(max_examples=200, deadline=None)
def test_chordal_symmetry_and_range(p, q):
    d1 = chordal_dist(p, q)
    d2 = chordal_dist(q, p)
    assert d1 == d2
    assert 0.0 <= d1 <= 1.0 + 1e-15


@given(sphere_points, sphere_points, sphere_points)
@settings(max_examples=200, deadline=None)
def test_chordal_triangle_inequality(p, q, r):
    assert chordal_dist(p, r) <= chordal_dist(p, q) + chordal_dist(q, r) + 1e-12


@given(sphere_points, sphere_points)
@settings(max_examples=200, deadline=None)
def test_r3_embedding_halves_chordal(p, q):
    a = np.array(p.to_r3())
    b = np.array(q.to_r3())
    assert np.linalg.norm(a - b) == pytest.approx(2 * chordal_dist(p, q), abs=1e-9)
    assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-12)


def test_chordal_arrays_match_scalar():
    zs = np.array([0, 1, 1j, 2 - 3j, 1e200], dtype=complex)
    infs = np.array([False, False, False, False, False])
    d = chordal_dist_arrays(zs, infs, np.zeros(5, complex), np.ones(5, bool))
    for k, z in enumerate(zs):
        assert d[k] == pytest.approx(chordal_dist(SpherePoint(z), INF), abs=1e-15)


def test_r3_arrays_match_scalar():
    zs = np.array([0.3 + 0.4j, 5 - 2j, 0, 1e250], dtype=complex)
    infs = np.array([False, False, False, False])
    emb = r3_embed_arrays(zs, infs)
    for k, z in enumerate(zs):
        assert np.allclose(emb[k], SpherePoint(z).to_r3(), atol=1e-12)
    assert np.allclose(r3_embed_arrays(np.array([0j]), np.array([True]))[0], (0, 0, 1))


# ---------------------------------------------------------------------------
# map construction and evaluation


def test_degree_and_validation():
    f = squaring_map()
    assert f.degree == 2
    with pytest.raises(DegenerateMapError):
        RationalMap([0, 1], [1])  # degree 1
    with pytest.raises(DegenerateMapError):
        RationalMap([0, 0, 1], [0, 1])  # shared root at 0
    with pytest.raises(DegenerateMapError):
        RationalMap([0], [1])


def test_eval_squaring():
    f = squaring_map()
    assert f.eval(pt(2)) == pt(4)
    assert f.eval(pt(0, 1)) == pt(-1)
    assert f.eval(INF) == INF
    assert f.eval(pt(1e200)) == INF


def test_eval_with_pole():
    # (z^2 + 1)/(z^2 - 1) has poles at +-1 and fixes the value 1 at infinity
    f = RationalMap([1, 0, 1], [-1, 0, 1])
    assert f.eval(pt(1)) == INF
    assert f.eval(INF) == pt(1)
    assert f.eval(pt(0)) == pt(-1)


def test_eval_arrays_matches_scalar():
    f = RationalMap([1, 0, 1], [-1, 0, 1])
    zs = np.array([0, 2, 1, -1, 0.5j, 3 + 4j], dtype=complex)
    infs = np.zeros(6, dtype=bool)
    vals, oinf = f.eval_arrays(zs, infs)
    for k, z in enumerate(zs):
        expect = f.eval(SpherePoint(z))
        got = SpherePoint.infinity() if oinf[k] else SpherePoint(vals[k])
        assert got == expect
    vals, oinf = f.eval_arrays(np.array([0j]), np.array([True]))
    assert not oinf[0] and SpherePoint(vals[0]) == pt(1)


def test_json_round_trip():
    f = RationalMap([1 + 2j, 0, 1], [-1, 0.5j, 1])
    g = RationalMap.from_json_obj(f.to_json_obj())
    assert np.allclose(f.num, g.num) and np.allclose(f.den, g.den)


# ---------------------------------------------------------------------------
# orbits and multipliers


def test_orbit_squaring():
    f = squaring_map()
    pts = orbit(f, pt(2), 3)
    assert [p.z for p in pts[:4]] == [2, 4, 16, 256]


def test_multiplier_fixed_point_of_squaring():
    f = squaring_map()
    assert multiplier(f, pt(1), 1) == pytest.approx(2.0, abs=1e-12)


def test_multiplier_period_two_cycle():
    # z = e^{2 pi i/3} has f(z) = z^2 = e^{4 pi i / 3}, f^2(z) = z; chain rule
    # gives 2z * 2z^2 = 4 z^3 = 4.
    f = squaring_map()
    z = complex(math.cos(2 * math.pi / 3), math.sin(2 * math.pi / 3))
    assert multiplier(f, pt(z.real, z.imag), 2) == pytest.approx(4.0, abs=1e-10)


def test_multiplier_at_infinity():
    # infinity is superattracting for z^2: multiplier 0
    f = squaring_map()
    assert abs(multiplier(f, INF, 1)) == pytest.approx(0.0, abs=1e-12)


def test_multiplier_rotation_invariance():
    # conjugating by a sphere rotation moves the fixed point but not the
    # multiplier
    f = quad(-0.2 + 0.1j)
    # fixed point (1 + sqrt(1 - 4c))/2
    c = -0.2 + 0.1j
    beta = (1 + np.sqrt(1 - 4 * c)) / 2
    m0 = multiplier(f, pt(beta.real, beta.imag), 1)
    rng = np.random.default_rng(7)
    for _ in range(5):
        v = rng.normal(size=4)
        v /= np.linalg.norm(v)
        a = complex(v[0], v[1])
        b = complex(v[2], v[3])
        g = conjugate_by_rotation(f, a, b)
        q_num = a * beta + b
        q_den = -np.conj(b) * beta + np.conj(a)
        q = SpherePoint.from_ratio(q_num, q_den)
        m1 = multiplier(g, q, 1)
        assert abs(m1 - m0) <= 1e-8 * max(1.0, abs(m0))


def test_spherical_derivative_rotation_invariance():
    f = quad(0.1j)
    p = pt(0.3, -0.2)
    s0 = f.spherical_derivative(p)
    a, b = 0.6 + 0.0j, 0.8j
    g = conjugate_by_rotation(f, a, b)
    q = SpherePoint.from_ratio(a * p.z + b, -np.conj(b) * p.z + np.conj(a))
    assert g.spherical_derivative(q) == pytest.approx(s0, rel=1e-9)


# ---------------------------------------------------------------------------
# root finding and preimages


def test_aberth_on_wilkinson_like():
    roots = np.arange(1, 9, dtype=float)
    coeffs = np.array([1.0 + 0j])
    for r in roots:
        coeffs = np.convolve(coeffs, np.array([-r, 1.0], dtype=complex))
    got = np.sort_complex(aberth_roots(coeffs))
    assert np.allclose(got, roots, atol=1e-7)


def test_preimages_squaring():
    f = squaring_map()
    pre = preimages(f, pt(4))
    assert len(pre) == 2
    assert pre[0] == pt(-2) and pre[1] == pt(2)
    pre0 = preimages(f, pt(0))
    assert pre0[0] == pt(0) and pre0[1] == pt(0)  # multiplicity 2
    preinf = preimages(f, INF)
    assert all(p.is_inf for p in preinf) and len(preinf) == 2


def test_preimages_double_root_example():
    # f(z) = z^2 - 1, q = -1: the fiber is {0, 0}
    f = RationalMap([-1, 0, 1], [1])
    pre = preimages(f, pt(-1))
    assert len(pre) == 2
    assert pre[0] == pt(0) and pre[1] == pt(0)


def test_preimages_forward_consistency_random_maps():
    rng = np.random.default_rng(11)
    for _ in range(20):
        d = int(rng.integers(2, 5))
        f = RationalMap(rng.normal(size=d + 1) + 1j * rng.normal(size=d + 1),
                        rng.normal(size=d) + 1j * rng.normal(size=d))
        q = SpherePoint(complex(rng.normal(), rng.normal()))
        pre = preimages(f, q)
        assert len(pre) == f.degree
        for p in pre:
            assert chordal_dist(f.eval(p), q) <= 1e-7


def test_preimage_fibers_match_scalar():
    f = quad(-0.2 + 0.1j)
    targets = np.array([0.3 + 0.1j, -1.0, 2.5j, 0.0], dtype=complex)
    infs = np.zeros(4, dtype=bool)
    pts, pinf = preimage_fibers(f, targets, infs)
    assert pts.shape == (4, 2) and not pinf.any()
    for k in range(4):
        scalar = preimages(f, SpherePoint(targets[k]))
        got = sorted(pts[k], key=lambda z: (round(z.real, 9), round(z.imag, 9)))
        for a, b in zip(got, scalar):
            assert chordal_dist(SpherePoint(a), b) <= 1e-8


def test_preimage_fibers_infinity_target():
    f = quad(0.25j)
    pts, pinf = preimage_fibers(f, np.array([0j]), np.array([True]))
    assert pinf[0].all()  # both preimages of infinity are infinity


def test_preimage_fibers_degree_three():
    f = RationalMap([0.2, 0, 0, 1], [1])  # z^3 + 0.2
    targets = np.array([1.0 + 0j, -0.3 + 0.8j], dtype=complex)
    pts, pinf = preimage_fibers(f, targets, np.zeros(2, bool))
    assert pts.shape == (2, 3) and not pinf.any()
    vals, oinf = f.eval_arrays(pts.ravel(), pinf.ravel())
    expect = np.repeat(targets, 3)
    assert np.all(chordal_dist_arrays(vals, oinf, expect, np.zeros(6, bool)) <= 1e-7)


# ---------------------------------------------------------------------------
# critical points


def test_critical_points_squaring():
    got = critical_points(squaring_map())
    assert len(got) == 2
    assert got[0] == pt(0) and got[1].is_inf


def test_critical_points_symmetric_example():
    # (z^2+1)/(z^2-1): Wronskian reduces to -4z, so {0, infinity}
    f = RationalMap([1, 0, 1], [-1, 0, 1])
    got = critical_points(f)
    assert len(got) == 2
    assert got[0] == pt(0) and got[1].is_inf


def test_critical_point_count_random_maps():
    rng = np.random.default_rng(3)
    for _ in range(100):
        d = int(rng.integers(2, 6))
        f = RationalMap(rng.normal(size=d + 1) + 1j * rng.normal(size=d + 1),
                        rng.normal(size=d + 1) + 1j * rng.normal(size=d + 1))
        assert len(critical_points(f)) == 2 * f.degree - 2


def test_critical_orbit_distance_squaring():
    f = squaring_map()
    # critical orbits are {0} and {infinity}; distance from 1 to both is
    # 1/sqrt(2)
    assert critical_orbit_distance(f, pt(1), 5) == pytest.approx(1 / math.sqrt(2), abs=1e-12)
