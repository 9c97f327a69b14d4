import numpy as np
import pytest
import sympy

from core.errors import InvariantError, PerpendicularError, PreconditionError, ShapeError
from core.hk_periods import (
    BBLattice,
    ExactBackend,
    FloatBackend,
    HKTriple,
    MirrorData,
    direct_sum,
    e8_negative,
    hk_rotate,
    hyperbolic_plane,
    in_period_domain,
    inverse_mirror,
    k3_lattice,
    lattice_from_name,
    lcs_path,
    lcs_period,
    minus_two,
    mirror_exchange,
    mirror_map,
    normalize_period,
    q,
    exact_identity_failures,
    random_admissible_alpha,
    random_rational_alpha,
    rotated_kahler,
    round_trip_error,
    sampling_data,
    sampling_lattice,
)

E = [1, 0, 0, 0]
SIGMA = [1, 1, 0, 0]
OMEGA = [0, 0, 1, 1]


@pytest.fixture
def uu():
    return lattice_from_name("UU")


@pytest.fixture
def exact_data(uu):
    return MirrorData(uu, E, SIGMA, ExactBackend())


def test_lattice_library():
    k3 = k3_lattice()
    assert k3.rank == 22
    assert k3.signature == (3, 19)
    assert round(np.linalg.det(e8_negative())) == 1
    assert np.all(np.linalg.eigvalsh(e8_negative()) < 0)
    assert sampling_lattice(2).signature == (3, 5)
    assert direct_sum(hyperbolic_plane(), minus_two()).shape == (3, 3)


def test_lattice_validation():
    with pytest.raises(InvariantError):
        BBLattice(direct_sum(hyperbolic_plane(), hyperbolic_plane()))
    assert lattice_from_name("UU").signature == (2, 2)
    with pytest.raises(InvariantError):
        BBLattice(np.array([[0, 1], [2, 0]]), check_signature=False)
    with pytest.raises(InvariantError):
        BBLattice(np.array([[0.5, 0], [0, 1]]), check_signature=False)
    with pytest.raises(InvariantError):
        BBLattice(np.zeros((2, 2)), check_signature=False)
    with pytest.raises(PreconditionError):
        lattice_from_name("D4")


def test_pairing_shapes(uu):
    assert q(uu, np.array([1, 1, 0, 0], dtype=complex)) == pytest.approx(2.0)
    with pytest.raises(ShapeError):
        q(uu, np.ones(3))


def test_exact_mirror_map(uu, exact_data):
    b = exact_data.backend
    alpha = b.vector([[0, 0], [0, 0], [0, 1], [0, 1]])
    period = mirror_map(alpha, exact_data)
    assert list(period) == [1, 1, sympy.I, sympy.I]
    check = in_period_domain(uu, period, b)
    assert check.member
    assert b.simplify(exact_data.pair_e(period)) == 1
    assert list(inverse_mirror(period, exact_data)) == list(alpha)


def test_large_complex_structure_period(uu, exact_data):
    b = exact_data.backend
    period = lcs_period(exact_data, OMEGA, 3)
    assert list(period) == [9, 1, 3 * sympy.I, 3 * sympy.I]
    normalized = normalize_period(period, 3, q(uu, b.vector(OMEGA), None, b), 2, b)
    assert list(normalized) == [3, sympy.Rational(1, 3), sympy.I, sympy.I]
    assert b.simplify(q(uu, b.real(normalized), None, b)) == 2


@pytest.mark.parametrize("t", ["1/4", "1/2", "1", "2"])
def test_lcs_path_is_affine_exact(exact_data, t):
    b = exact_data.backend
    t = b.number(t)
    point = lcs_path(t, 1, exact_data, OMEGA, OMEGA)
    assert point.affine_defect == 0
    assert list(point.kahler_class) == [t + 1, t, 0, 0]


def test_lcs_path_float(uu):
    data = MirrorData(uu, E, SIGMA)
    point = lcs_path(0.3, 2.0, data, OMEGA, OMEGA)
    assert point.affine_defect < 1e-12
    np.testing.assert_allclose(point.kahler_class.real, [2.0 * 1.3, 0.15, 0, 0], atol=1e-12)


def test_mirror_preconditions(uu, exact_data):
    b = exact_data.backend
    with pytest.raises(PreconditionError):
        mirror_map(b.vector([0, 1, [0, 1], [0, 1]]), exact_data)
    with pytest.raises(PreconditionError):
        mirror_map(b.vector([0, 0, [0, 1], [0, -1]]), exact_data)
    with pytest.raises(PreconditionError):
        MirrorData(uu, [1, 1, 0, 0], SIGMA)
    with pytest.raises(PreconditionError):
        MirrorData(uu, E, [0, 0, 1, -1])
    with pytest.raises(PerpendicularError):
        inverse_mirror(b.vector([1, 0, [0, 1], [0, 1]]), exact_data)
    with pytest.raises(PreconditionError):
        normalize_period(b.vector([1, 1, 0, 0]), 0, 2, 2, b)


def test_random_admissible_round_trips():
    lattice = sampling_lattice(2)
    e = np.zeros(lattice.rank)
    e[0] = 1
    sigma = np.zeros(lattice.rank)
    sigma[:2] = 1
    data = MirrorData(lattice, e, sigma)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        alpha = random_admissible_alpha(data, rng)
        image = mirror_map(alpha, data)
        assert abs(q(lattice, image)) <= 1e-10
        norm = q(lattice, image, np.conj(image)).real
        assert norm == pytest.approx(2 * q(lattice, alpha.imag).real, rel=1e-10, abs=1e-9)
        assert abs(data.pair_e(image) - 1.0) <= 1e-12
        assert round_trip_error(alpha, data) <= 1e-10


@pytest.mark.parametrize("k", [1, 19])
def test_sampling_data_has_signature_three(k):
    data = sampling_data(k)
    assert data.lattice.signature == (3, 3 + k)
    assert data.q_e_sigma == 1


@pytest.mark.parametrize("k", [1, 2])
def test_rational_samples_satisfy_identities_exactly(k):
    data = sampling_data(k, ExactBackend())
    rng = np.random.default_rng(7)
    for _ in range(5):
        alpha = random_rational_alpha(data, rng)
        assert all(isinstance(x, sympy.Basic) for x in alpha)
        assert data.pair_e(alpha) == 0
        assert exact_identity_failures(alpha, data) == []


def test_rational_sampler_needs_exact_backend():
    with pytest.raises(PreconditionError):
        random_rational_alpha(sampling_data(1), np.random.default_rng(1))


def test_hk_rotation():
    lattice = lattice_from_name("UUU")
    b = FloatBackend()
    wi, wj, wk = (b.vector(v) for v in ([1, 1, 0, 0, 0, 0], [0, 0, 1, 1, 0, 0], [0, 0, 0, 0, 1, 1]))
    triple = HKTriple(lattice, wi, wj, wk)
    for target, kahler in (("I", wi), ("J", wj), ("K", wk)):
        period, omega = hk_rotate(triple, target)
        assert in_period_domain(lattice, period).member
        np.testing.assert_array_equal(omega, kahler)
        assert abs(q(lattice, period, omega)) < 1e-12
    with pytest.raises(PreconditionError):
        hk_rotate(triple, "L")
    with pytest.raises(InvariantError):
        HKTriple(lattice, wi, wj, 2 * wk)


def test_mirror_exchange(exact_data):
    b = exact_data.backend
    period = b.vector([9, 1, [0, 3], [0, 3]])
    result = mirror_exchange(period, exact_data, OMEGA)
    assert result.correction == 0
    assert result.imaginary_residual == 6
    assert result.q_omega_check == 2
    assert not result.flagged
    assert list(result.b_check) == [0, 0, 0, 0]
    flagged = mirror_exchange(period, exact_data, [0, 0, 1, -1])
    assert flagged.flagged


def test_rotated_kahler_class(uu, exact_data):
    b = exact_data.backend
    kahler = rotated_kahler(exact_data, OMEGA, OMEGA, 3)
    assert list(kahler) == [3, sympy.Rational(1, 3), 0, 0]
    assert b.simplify(q(uu, kahler, None, b)) == 2
