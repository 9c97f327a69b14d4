"""
Lattice algebra for hyperkähler periods and the mirror map.

Classes live as coefficient vectors over a lattice basis; q is the
complex-bilinear extension of the integral Gram pairing. Every operation runs
on one of two backends: `FloatBackend` (numpy complex) or `ExactBackend`
(numpy object arrays of sympy numbers, zero tolerance).
"""
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np
import sympy
from scipy.linalg import block_diag, null_space

from core.errors import (
    InvariantError,
    PerpendicularError,
    PreconditionError,
    ShapeError,
)

logger = logging.getLogger(__name__)

FLOAT_TOL = 1e-10


# --- backends -----------------------------------------------------------------------

class FloatBackend:
    name = "float"
    exact = False

    def number(self, value: Any) -> complex:
        if isinstance(value, (list, tuple)):
            re, im = value
            return complex(_as_float(re), _as_float(im))
        return complex(_as_float(value))

    def vector(self, values: Sequence[Any]) -> np.ndarray:
        return np.array([self.number(v) for v in values], dtype=complex)

    def gram(self, gram: np.ndarray) -> np.ndarray:
        return np.asarray(gram, dtype=float)

    def sqrt(self, x):
        return math.sqrt(float(np.real(x)))

    def simplify(self, x):
        return x

    def simplify_vector(self, v: np.ndarray) -> np.ndarray:
        return v

    def real(self, v: np.ndarray) -> np.ndarray:
        return np.real(v).astype(complex)

    def imag(self, v: np.ndarray) -> np.ndarray:
        return np.imag(v).astype(complex)

    def conj(self, v: np.ndarray) -> np.ndarray:
        return np.conj(v)

    def is_zero(self, x, tol: float = FLOAT_TOL) -> bool:
        return abs(x) <= tol

    def is_positive(self, x, tol: float = FLOAT_TOL) -> bool:
        return float(np.real(x)) > tol

    def to_complex(self, x) -> complex:
        return complex(x)


class ExactBackend:
    name = "exact"
    exact = True

    def number(self, value: Any):
        if isinstance(value, (list, tuple)):
            re, im = value
            return sympy.nsimplify(_as_rational(re)) + sympy.I * sympy.nsimplify(_as_rational(im))
        return sympy.nsimplify(_as_rational(value))

    def vector(self, values: Sequence[Any]) -> np.ndarray:
        return np.array([self.number(v) for v in values], dtype=object)

    def gram(self, gram: np.ndarray) -> np.ndarray:
        return np.array([[sympy.Integer(int(x)) for x in row] for row in np.asarray(gram)], dtype=object)

    def sqrt(self, x):
        return sympy.sqrt(x)

    def simplify(self, x):
        return sympy.simplify(sympy.expand(x))

    def simplify_vector(self, v: np.ndarray) -> np.ndarray:
        return np.array([self.simplify(x) for x in v], dtype=object)

    def real(self, v: np.ndarray) -> np.ndarray:
        return np.array([self.simplify(sympy.re(x)) for x in v], dtype=object)

    def imag(self, v: np.ndarray) -> np.ndarray:
        return np.array([self.simplify(sympy.im(x)) for x in v], dtype=object)

    def conj(self, v: np.ndarray) -> np.ndarray:
        return np.array([sympy.conjugate(x) for x in v], dtype=object)

    def is_zero(self, x, tol: float = 0.0) -> bool:
        return self.simplify(x) == 0

    def is_positive(self, x, tol: float = 0.0) -> bool:
        return bool(self.simplify(sympy.re(x)) > 0)

    def to_complex(self, x) -> complex:
        return complex(sympy.N(x, 30))


def _as_float(value: Any) -> float:
    if isinstance(value, str):
        return float(Fraction(value))
    return float(value)


def _as_rational(value: Any):
    if isinstance(value, float):
        return sympy.Rational(str(value))
    if isinstance(value, str):
        return sympy.Rational(value)
    return sympy.Integer(value) if isinstance(value, int) else sympy.sympify(value)


def backend_for(exact: bool):
    return ExactBackend() if exact else FloatBackend()


# --- lattices --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BBLattice:
    """Integral, symmetric, nondegenerate Gram matrix; signature (3, rank − 3) unless the check is off."""

    gram: np.ndarray
    name: str = ""
    check_signature: bool = True
    signature: Tuple[int, int] = field(default=(0, 0))

    def __post_init__(self):
        gram = np.asarray(self.gram)
        if gram.ndim != 2 or gram.shape[0] != gram.shape[1]:
            raise InvariantError("Gram matrix must be square")
        if not np.all(np.equal(np.mod(gram, 1), 0)):
            raise InvariantError(f"Gram matrix of {self.name or 'lattice'} is not integral")
        gram = gram.astype(int)
        if np.any(gram != gram.T):
            raise InvariantError(f"Gram matrix of {self.name or 'lattice'} is not symmetric")
        eig = np.linalg.eigvalsh(gram.astype(float))
        if np.min(np.abs(eig)) < 1e-9:
            raise InvariantError(f"Gram matrix of {self.name or 'lattice'} is degenerate")
        signature = (int(np.sum(eig > 0)), int(np.sum(eig < 0)))
        if self.check_signature and signature[0] != 3:
            raise InvariantError(f"{self.name or 'lattice'} has signature {signature}, expected (3, {gram.shape[0] - 3})")
        gram.setflags(write=False)
        object.__setattr__(self, "gram", gram)
        object.__setattr__(self, "signature", signature)

    @property
    def rank(self) -> int:
        return self.gram.shape[0]


def hyperbolic_plane() -> np.ndarray:
    return np.array([[0, 1], [1, 0]])


def minus_two() -> np.ndarray:
    return np.array([[-2]])


def e8_negative() -> np.ndarray:
    """E8(−1): minus the Cartan matrix of E8 (Bourbaki labelling)."""
    cartan = 2 * np.eye(8, dtype=int)
    for a, b in ((0, 2), (1, 3), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7)):
        cartan[a, b] = cartan[b, a] = -1
    return -cartan


def direct_sum(*grams: np.ndarray) -> np.ndarray:
    return np.asarray(block_diag(*grams), dtype=int)


def k3_lattice() -> BBLattice:
    """U^{⊕3} ⊕ E8(−1)^{⊕2}, signature (3, 19)."""
    u = hyperbolic_plane()
    return BBLattice(direct_sum(u, u, u, e8_negative(), e8_negative()), name="K3")


def lattice_from_name(name: str, gram: Optional[Sequence[Sequence[int]]] = None) -> BBLattice:
    u = hyperbolic_plane()
    if name == "UU":
        return BBLattice(direct_sum(u, u), name="U+U", check_signature=False)
    if name == "UUU":
        return BBLattice(direct_sum(u, u, u), name="U+U+U")
    if name == "K3":
        return k3_lattice()
    if name == "custom":
        return BBLattice(np.asarray(gram), name="custom")
    raise PreconditionError(f"unknown lattice {name!r}")


def sampling_lattice(k: int) -> BBLattice:
    """U^{⊕3} ⊕ ⟨−2⟩^{⊕k}."""
    u = hyperbolic_plane()
    return BBLattice(direct_sum(u, u, u, *([minus_two()] * k)), name=f"U3+<-2>^{k}")


# --- the pairing ---------------------------------------------------------------------------

def q(lattice: BBLattice, alpha: np.ndarray, beta: Optional[np.ndarray] = None, backend=None):
    """Complex-bilinear extension of the Gram pairing; q(α) = q(α, α)."""
    backend = backend or FloatBackend()
    beta = alpha if beta is None else beta
    if len(alpha) != lattice.rank or len(beta) != lattice.rank:
        raise ShapeError(f"vectors must have length {lattice.rank}")
    value = np.asarray(alpha) @ backend.gram(lattice.gram) @ np.asarray(beta)
    return backend.simplify(value)


@dataclass(frozen=True)
class PeriodCheck:
    member: bool
    q_residual: Any
    q_conj: Any


def in_period_domain(lattice: BBLattice, omega: np.ndarray, backend=None, tol: float = FLOAT_TOL) -> PeriodCheck:
    """q(Ω) = 0 and q(Ω, Ω̄) > 0."""
    backend = backend or FloatBackend()
    isotropy = q(lattice, omega, None, backend)
    positivity = q(lattice, omega, backend.conj(omega), backend)
    member = backend.is_zero(isotropy, tol) and backend.is_positive(positivity, tol)
    residual = backend.simplify(sympy.Abs(isotropy)) if backend.exact else abs(isotropy)
    return PeriodCheck(member, residual, positivity if backend.exact else float(np.real(positivity)))


# --- mirror map ------------------------------------------------------------------------------

class MirrorData:
    """Isotropic E with a class σ, q(σ) > 0 and q(E, σ) ≠ 0; caches a basis of E^⊥/E."""

    def __init__(self, lattice: BBLattice, e, sigma, backend=None):
        self.lattice = lattice
        self.backend = backend or FloatBackend()
        self.e = self.backend.vector(e)
        self.sigma = self.backend.vector(sigma)
        if len(self.e) != lattice.rank or len(self.sigma) != lattice.rank:
            raise ShapeError(f"E and σ must have length {lattice.rank}")
        if not self.backend.is_zero(q(lattice, self.e, None, self.backend)):
            raise PreconditionError("E is not isotropic")
        if not self.backend.is_positive(q(lattice, self.sigma, None, self.backend)):
            raise PreconditionError("q(σ) must be positive")
        self.q_e_sigma = q(lattice, self.e, self.sigma, self.backend)
        if self.backend.is_zero(self.q_e_sigma):
            raise PreconditionError("q(E, σ) must be nonzero")
        self.q_sigma = q(lattice, self.sigma, None, self.backend)
        self.quotient_basis = self._quotient_basis()

    def _quotient_basis(self) -> np.ndarray:
        """Columns span the part of E^⊥ Euclidean-orthogonal to E (a fixed complement of E in E^⊥)."""
        e_real = np.array([self.backend.to_complex(x).real for x in self.e])
        constraints = np.vstack([self.lattice.gram @ e_real, e_real])
        return null_space(constraints)

    def pair_e(self, v):
        return q(self.lattice, self.e, v, self.backend)

    def reduce_mod_e(self, v: np.ndarray) -> np.ndarray:
        """Representative of v mod E with no Euclidean E-component."""
        b = self.backend
        e_dot_e = sum(x * x for x in self.e)
        coeff = b.simplify(sum(x * y for x, y in zip(self.e, v)) / e_dot_e)
        return b.simplify_vector(np.asarray(v) - coeff * self.e)

    def quotient_coordinates(self, v: np.ndarray) -> np.ndarray:
        """Float coordinates of v mod E in the cached E^⊥/E basis."""
        reduced = np.array([self.backend.to_complex(x) for x in self.reduce_mod_e(v)])
        coords, *_ = np.linalg.lstsq(self.quotient_basis, reduced, rcond=None)
        return coords


def mirror_map(alpha, data: MirrorData) -> np.ndarray:
    """
    m(α) = σ/q(E,σ) + α − ½(q(σ)/q(E,σ)² + q(α) + 2q(α,σ)/q(E,σ))·E.

    Needs α ∈ E^⊥ and q(Im α) > 0; the result satisfies q(E, m(α)) = 1.
    """
    b = data.backend
    lat = data.lattice
    alpha = np.asarray(alpha) if isinstance(alpha, np.ndarray) else b.vector(alpha)
    if not b.is_zero(data.pair_e(alpha)):
        raise PreconditionError("α is not orthogonal to E")
    if not b.is_positive(q(lat, b.imag(alpha), None, b)):
        raise PreconditionError("q(Im α) must be positive")
    qes = data.q_e_sigma
    correction = data.q_sigma / qes ** 2 + q(lat, alpha, None, b) + 2 * q(lat, alpha, data.sigma, b) / qes
    result = data.sigma / qes + alpha - correction / 2 * data.e
    return b.simplify_vector(result)


def inverse_mirror(omega, data: MirrorData) -> np.ndarray:
    """α = Ω/q(E,Ω) − σ/q(E,σ), reduced mod E."""
    b = data.backend
    omega = np.asarray(omega) if isinstance(omega, np.ndarray) else b.vector(omega)
    q_e_omega = data.pair_e(omega)
    if b.is_zero(q_e_omega):
        raise PerpendicularError("period lies in E^⊥")
    alpha = omega / q_e_omega - data.sigma / data.q_e_sigma
    return data.reduce_mod_e(b.simplify_vector(alpha))


# --- hyperkähler rotation -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class HKTriple:
    lattice: BBLattice
    omega_i: np.ndarray
    omega_j: np.ndarray
    omega_k: np.ndarray
    backend: Any = field(default_factory=FloatBackend)

    def __post_init__(self):
        b = self.backend
        forms = (self.omega_i, self.omega_j, self.omega_k)
        squares = [q(self.lattice, w, None, b) for w in forms]
        if not b.is_positive(squares[0]) or not all(b.is_zero(s - squares[0]) for s in squares[1:]):
            raise InvariantError(f"triple needs equal positive squares, got {squares}")
        for x, y in ((0, 1), (1, 2), (0, 2)):
            if not b.is_zero(q(self.lattice, forms[x], forms[y], b)):
                raise InvariantError(f"triple members {x} and {y} are not q-orthogonal")


def hk_rotate(triple: HKTriple, target: str) -> Tuple[np.ndarray, np.ndarray]:
    """(Ω, ω) for the complex structure I, J or K: Ω_I = ω_J + iω_K and cyclically."""
    b = triple.backend
    i_unit = sympy.I if b.exact else 1j
    wi, wj, wk = triple.omega_i, triple.omega_j, triple.omega_k
    table = {"I": (wj, wk, wi), "J": (wk, wi, wj), "K": (wi, wj, wk)}
    if target not in table:
        raise PreconditionError(f"target must be I, J or K, got {target!r}")
    re, im, kahler = table[target]
    return b.simplify_vector(re + i_unit * im), kahler


# --- large complex structure ----------------------------------------------------------------

def lcs_period(data: MirrorData, omega, s, b_field=None) -> np.ndarray:
    """Ω̌_s = m(B + i s ω)."""
    b = data.backend
    i_unit = sympy.I if b.exact else 1j
    omega = b.vector(omega) if not isinstance(omega, np.ndarray) else omega
    b_field = np.zeros_like(omega) if b_field is None else (b_field if isinstance(b_field, np.ndarray) else b.vector(b_field))
    return mirror_map(b_field + i_unit * s * omega, data)


def normalize_period(period: np.ndarray, s, q_omega, q_omega_check, backend=None) -> np.ndarray:
    """Ω̌^nor = s⁻¹ √(q(čω)/q(ω)) Ω̌_s."""
    b = backend or FloatBackend()
    for name, value in (("s", s), ("q(ω)", q_omega), ("q(čω)", q_omega_check)):
        if not b.is_positive(value):
            raise PreconditionError(f"{name} must be positive, got {value}")
    return b.simplify_vector(np.asarray(period) * (b.sqrt(q_omega_check / q_omega) / s))


def rotated_kahler(data: MirrorData, omega, omega_check, s, b_field=None) -> np.ndarray:
    """Kähler class of the rotated structure at s: Re Ω̌^nor_s."""
    b = data.backend
    omega = b.vector(omega) if not isinstance(omega, np.ndarray) else omega
    omega_check = b.vector(omega_check) if not isinstance(omega_check, np.ndarray) else omega_check
    q_w = q(data.lattice, omega, None, b)
    q_cw = q(data.lattice, omega_check, None, b)
    return b.real(normalize_period(lcs_period(data, omega, s, b_field), s, q_w, q_cw, b))


@dataclass(frozen=True, eq=False)
class PathPoint:
    t: Any
    kahler_class: np.ndarray
    affine_defect: Any


def lcs_path(t, s0, data: MirrorData, omega, omega_check, b_field=None) -> PathPoint:
    """
    ω̌_t = √(t(t+1))·Re Ω̌^nor at s = s₀√((t+1)/t), checked against the straight
    line t·ω̌_{s₀} + (s₀/2)√(q(čω)q(ω))·E.
    """
    b = data.backend
    if not b.is_positive(t) or not b.is_positive(s0):
        raise PreconditionError("lcs_path needs t > 0 and s0 > 0")
    lat = data.lattice
    omega = b.vector(omega) if not isinstance(omega, np.ndarray) else omega
    omega_check = b.vector(omega_check) if not isinstance(omega_check, np.ndarray) else omega_check
    q_w = q(lat, omega, None, b)
    q_cw = q(lat, omega_check, None, b)

    def kahler(s):
        return rotated_kahler(data, omega, omega_check, s, b_field)

    s = s0 * b.sqrt((t + 1) / t)
    point = b.simplify_vector(b.sqrt(t * (t + 1)) * kahler(s))
    line = b.simplify_vector(t * kahler(s0) + b.number(s0) / 2 * b.sqrt(q_cw * q_w) * data.e)
    diff = b.simplify_vector(point - line)
    defect = max((abs(b.to_complex(x)) for x in diff), default=0.0)
    if b.exact:
        defect = 0 if all(x == 0 for x in diff) else defect
    return PathPoint(t, point, defect)


@dataclass(frozen=True, eq=False)
class ExchangeResult:
    b_check: np.ndarray
    omega_check: np.ndarray
    correction: Any
    imaginary_residual: Any
    q_omega_check: Any
    flagged: bool


def mirror_exchange(period, data: MirrorData, omega_check_rep) -> ExchangeResult:
    """
    Read B̌ from the period and fix ω̌ = ω̌_rep − cE by Re q(Ω, ω̌) = 0 (Ω scaled to q(E, Ω) = 1).

    q(ω̌) is reported, and inputs where it is not positive are flagged.
    """
    b = data.backend
    lat = data.lattice
    period = period if isinstance(period, np.ndarray) else b.vector(period)
    rep = omega_check_rep if isinstance(omega_check_rep, np.ndarray) else b.vector(omega_check_rep)
    q_e_period = data.pair_e(period)
    if b.is_zero(q_e_period):
        raise PerpendicularError("period lies in E^⊥")
    scaled = b.simplify_vector(period / q_e_period)
    pairing = q(lat, scaled, rep, b)
    correction = b.simplify(sympy.re(pairing)) if b.exact else float(np.real(pairing))
    residual = b.simplify(sympy.im(pairing)) if b.exact else float(np.imag(pairing))
    omega_check = b.simplify_vector(rep - correction * data.e)
    q_check = q(lat, omega_check, None, b)
    flagged = not b.is_positive(q_check)
    if flagged:
        logger.warning("mirror exchange gives q(ω̌) = %s <= 0", q_check)
    b_check = b.real(inverse_mirror(period, data))
    return ExchangeResult(b_check, omega_check, correction, residual, q_check, flagged)


def random_admissible_alpha(data: MirrorData, rng: np.random.Generator, max_tries: int = 1000) -> np.ndarray:
    """B + iω with B, ω random in the E^⊥/E complement and q(ω) > 0 (float backend)."""
    basis = data.quotient_basis
    for _ in range(max_tries):
        re = basis @ rng.standard_normal(basis.shape[1])
        im = basis @ rng.standard_normal(basis.shape[1])
        if im @ data.lattice.gram @ im > 0.1:
            return re + 1j * im
    raise PreconditionError("no admissible α found; the quotient has no positive directions")


def round_trip_error(alpha: np.ndarray, data: MirrorData) -> float:
    """max |inverse_mirror(m(α)) − α| on representatives reduced mod E."""
    back = inverse_mirror(mirror_map(alpha, data), data)
    expected = data.reduce_mod_e(alpha)
    return max(abs(data.backend.to_complex(x) - data.backend.to_complex(y)) for x, y in zip(back, expected))


def sampling_data(k: int, backend=None) -> MirrorData:
    """Mirror data on U^{⊕3} ⊕ ⟨−2⟩^{⊕k} with E = e₁ and σ = e₁ + f₁ from the first hyperbolic plane."""
    lattice = sampling_lattice(k)
    e = [0] * lattice.rank
    e[0] = 1
    sigma = list(e)
    sigma[1] = 1
    return MirrorData(lattice, e, sigma, backend)


def random_rational_alpha(data: MirrorData, rng: np.random.Generator, denominator: int = 16,
                          max_tries: int = 1000) -> np.ndarray:
    """Rational B + iω for the exact backend: a float sample rounded, then moved into E^⊥ along σ."""
    b = data.backend
    if not b.exact:
        raise PreconditionError("random_rational_alpha needs the exact backend")
    for _ in range(max_tries):
        raw = random_admissible_alpha(data, rng)
        v = b.vector([(str(Fraction(x.real).limit_denominator(denominator)),
                       str(Fraction(x.imag).limit_denominator(denominator))) for x in raw])
        alpha = b.simplify_vector(v - data.pair_e(v) / data.q_e_sigma * data.sigma)
        if b.is_positive(q(data.lattice, b.imag(alpha), None, b)):
            return alpha
    raise PreconditionError("no rational admissible α found")


def exact_identity_failures(alpha: np.ndarray, data: MirrorData) -> List[str]:
    """Names of the mirror identities that fail exactly at α; empty when all hold."""
    b = data.backend
    lat = data.lattice
    period = mirror_map(alpha, data)
    failed = []
    if not b.is_zero(q(lat, period, None, b)):
        failed.append("isotropic")
    if not b.is_zero(data.pair_e(period) - 1):
        failed.append("normalized")
    if not b.is_zero(q(lat, period, b.conj(period), b) - 2 * q(lat, b.imag(alpha), None, b)):
        failed.append("norm")
    back = inverse_mirror(period, data)
    if any(not b.is_zero(x - y) for x, y in zip(back, data.reduce_mod_e(alpha))):
        failed.append("round_trip")
    return failed
