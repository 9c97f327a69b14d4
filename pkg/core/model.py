"""
Desk-scale torus fibration models.

A model is a chart of the base (periodic torus or Dirichlet square), a
holomorphic period map y -> Z(y), a polarization, and recipes for the
reference forms. Fiber points are stored as real torus coordinates
x = (x_a, x_b) in [0,1)^{2r} with z = D x_a + Z(y) x_b, D = diag(d_1..d_r),
so the grid does not move with y or t.

Real grid axes are ordered (Re y_1, Im y_1, ..., Re y_m, Im y_m, x_a, x_b).
"""
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from core.errors import ConfigError, DegenerateError, DomainError, InvariantError
from core.fields import ComplexFrame, Grid, HermitianField

IMZ_FLOOR = 1e-6
WRAP_TOL = 1e-10

OMEGA_M_RECIPES = ("FlatProduct", "SemiFlatPlusBase")
MU_RECIPES = ("OmegaMPower", "HolomorphicSquare", "Manufactured")


@dataclass(frozen=True, eq=False)
class PeriodMap:
    """Polynomial period map Z(y) = Σ C_α y^α with symmetric r×r coefficients."""

    m: int
    r: int
    terms: Tuple[Tuple[Tuple[int, ...], np.ndarray], ...]

    def __post_init__(self):
        for powers, coeff in self.terms:
            coeff = np.asarray(coeff)
            if len(powers) != self.m or coeff.shape != (self.r, self.r):
                raise InvariantError(f"period term {powers} has the wrong shape")
            if np.any(coeff != coeff.T):
                raise InvariantError(f"period coefficient for {powers} is not symmetric")

    @classmethod
    def constant(cls, z0, m: int = 1) -> "PeriodMap":
        z0 = np.atleast_2d(np.asarray(z0, dtype=complex))
        return cls(m, z0.shape[0], (((0,) * m, z0),))

    @classmethod
    def affine(cls, z0, slopes: Sequence) -> "PeriodMap":
        """Z(y) = Z0 + Σ_k y_k S_k."""
        z0 = np.atleast_2d(np.asarray(z0, dtype=complex))
        m = len(slopes)
        terms = [((0,) * m, z0)]
        for k, s in enumerate(slopes):
            powers = tuple(1 if j == k else 0 for j in range(m))
            terms.append((powers, np.atleast_2d(np.asarray(s, dtype=complex))))
        return cls(m, z0.shape[0], tuple(terms))

    @property
    def is_constant(self) -> bool:
        return all(sum(p) == 0 or not np.any(c) for p, c in self.terms)

    def evaluate(self, y) -> np.ndarray:
        """Z at base points y with shape (..., m); returns (..., r, r)."""
        y = np.asarray(y, dtype=complex)
        out = np.zeros(y.shape[:-1] + (self.r, self.r), dtype=complex)
        for powers, coeff in self.terms:
            mono = np.ones(y.shape[:-1], dtype=complex)
            for k, p in enumerate(powers):
                if p:
                    mono = mono * y[..., k] ** p
            out = out + mono[..., None, None] * coeff
        return out

    def derivative(self, y, k: int) -> np.ndarray:
        """∂Z/∂y_k at base points y with shape (..., m)."""
        y = np.asarray(y, dtype=complex)
        out = np.zeros(y.shape[:-1] + (self.r, self.r), dtype=complex)
        for powers, coeff in self.terms:
            if powers[k] == 0:
                continue
            mono = np.full(y.shape[:-1], float(powers[k]), dtype=complex)
            for j, p in enumerate(powers):
                q = p - 1 if j == k else p
                if q:
                    mono = mono * y[..., j] ** q
            out = out + mono[..., None, None] * coeff
        return out


@dataclass(frozen=True)
class BaseChart:
    """Box in the real base coordinates (Re y_1, Im y_1, ...)."""

    kind: str
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]

    def __post_init__(self):
        if self.kind not in ("periodic", "dirichlet"):
            raise InvariantError(f"unknown chart kind {self.kind!r}")
        if any(u <= l for l, u in zip(self.lower, self.upper)):
            raise InvariantError("chart box has non-positive extent")

    @property
    def periodic(self) -> bool:
        return self.kind == "periodic"

    def contains(self, y) -> bool:
        y = np.asarray(y, dtype=complex).reshape(-1)
        real = np.empty(2 * y.size)
        real[0::2] = y.real
        real[1::2] = y.imag
        lower = np.asarray(self.lower)
        upper = np.asarray(self.upper)
        return bool(np.all(real >= lower - 1e-12) and np.all(real <= upper + 1e-12))


@dataclass(frozen=True, eq=False)
class FiberLattice:
    """Lattice Λ_y generated by d_1e_1..d_re_r, Z_1(y)..Z_r(y)."""

    y: np.ndarray
    polarization: Tuple[int, ...]
    period: np.ndarray

    @property
    def r(self) -> int:
        return self.period.shape[0]

    @property
    def basis(self) -> np.ndarray:
        """Complex r×2r matrix whose columns are the lattice generators."""
        return np.concatenate([np.diag(np.asarray(self.polarization, dtype=complex)), self.period], axis=1)

    @property
    def real_basis(self) -> np.ndarray:
        b = self.basis
        return np.concatenate([b.real, b.imag], axis=0)


@dataclass(frozen=True, eq=False)
class FibrationModel:
    """A torus fibration over a base chart with its reference Kähler data."""

    name: str
    n: int
    m: int
    chart: BaseChart
    period_map: PeriodMap
    base_shape: Tuple[int, ...]
    fiber_shape: Tuple[int, ...]
    polarization: Tuple[int, ...] = ()
    base_form: Optional[np.ndarray] = None
    omega_m_recipe: str = "SemiFlatPlusBase"
    base_prime: Optional[np.ndarray] = None
    mu_recipe: str = "OmegaMPower"
    fiber_wobble: float = 0.0
    manufactured_density: Optional[np.ndarray] = None
    imz_floor: float = IMZ_FLOOR

    def __post_init__(self):
        if not (0 < self.m < self.n):
            raise InvariantError(f"need 0 < m < n, got n={self.n}, m={self.m}")
        r = self.n - self.m
        if self.period_map.m != self.m or self.period_map.r != r:
            raise InvariantError("period map dimensions do not match the model")
        if not self.polarization:
            object.__setattr__(self, "polarization", (1,) * r)
        if len(self.polarization) != r or any(d < 1 for d in self.polarization):
            raise InvariantError(f"polarization must list {r} positive integers")
        for name in ("base_form", "base_prime"):
            value = getattr(self, name)
            value = np.eye(self.m, dtype=complex) if value is None else np.asarray(value, dtype=complex)
            if value.shape != (self.m, self.m) or np.max(np.abs(value - value.conj().T)) > 0:
                raise InvariantError(f"{name} must be a Hermitian {self.m}×{self.m} matrix")
            object.__setattr__(self, name, value)
        if self.omega_m_recipe not in OMEGA_M_RECIPES:
            raise InvariantError(f"unknown omega_M recipe {self.omega_m_recipe!r}")
        if self.omega_m_recipe == "FlatProduct" and not self.period_map.is_constant:
            raise InvariantError("FlatProduct needs a constant period map")
        if self.mu_recipe not in MU_RECIPES:
            raise InvariantError(f"unknown mu recipe {self.mu_recipe!r}")
        if self.mu_recipe == "Manufactured" and self.manufactured_density is None:
            raise InvariantError("Manufactured mu needs a density field")
        if len(self.base_shape) != 2 * self.m or len(self.fiber_shape) != 2 * r:
            raise InvariantError("grid shape does not match the model dimensions")

    @property
    def r(self) -> int:
        return self.n - self.m

    def with_density(self, density: np.ndarray) -> "FibrationModel":
        """Copy of the model with a manufactured volume density."""
        values = {f: getattr(self, f) for f in self.__dataclass_fields__}
        values.update(mu_recipe="Manufactured", manufactured_density=np.asarray(density, dtype=float))
        return FibrationModel(**values)

    # --- grids -------------------------------------------------------------

    def grid(self) -> Grid:
        base_lengths = tuple(u - l for l, u in zip(self.chart.lower, self.chart.upper))
        r = self.r
        return Grid(
            shape=tuple(self.base_shape) + tuple(self.fiber_shape),
            periodic=(self.chart.periodic,) * (2 * self.m) + (True,) * (2 * r),
            lengths=base_lengths + (1.0,) * (2 * r),
            origins=tuple(self.chart.lower) + (0.0,) * (2 * r),
            roles=("base",) * (2 * self.m) + ("fiber",) * (2 * r),
        )

    def base_grid(self) -> Grid:
        return self.grid().subgrid(range(2 * self.m))

    def fiber_grid(self) -> Grid:
        return self.grid().subgrid(range(2 * self.m, 2 * self.n))

    def base_points(self) -> np.ndarray:
        """Complex base coordinates on the base grid, shape base_shape + (m,)."""
        mesh = self.base_grid().mesh()
        return np.stack([mesh[2 * k] + 1j * mesh[2 * k + 1] for k in range(self.m)], axis=-1)

    def _expand(self, array: np.ndarray, trailing: int) -> np.ndarray:
        """Insert singleton fiber axes after the base axes."""
        base = array.shape[: 2 * self.m]
        rest = array.shape[2 * self.m:]
        if len(rest) != trailing:
            raise InvariantError("unexpected trailing dimensions")
        return array.reshape(base + (1,) * (2 * self.r) + rest)

    def period_samples(self) -> Tuple[np.ndarray, np.ndarray]:
        """Z and ∂Z/∂y_k on the base grid: shapes base+(r,r) and base+(m,r,r)."""
        y = self.base_points()
        z = self.period_map.evaluate(y)
        dz = np.stack([self.period_map.derivative(y, k) for k in range(self.m)], axis=-3)
        min_eig = np.min(np.linalg.eigvalsh(z.imag))
        if min_eig < self.imz_floor:
            raise DegenerateError(f"min eig(Im Z) = {min_eig:.3e} below floor {self.imz_floor}")
        return z, dz

    def fiber_metric(self) -> np.ndarray:
        """g = (Im Z)^-1 on the base grid, expanded over the fiber axes."""
        z, _ = self.period_samples()
        return self._expand(np.linalg.inv(z.imag), 2)

    def volume_density(self) -> np.ndarray:
        """Euclidean (Re, Im)(y, z) measure per unit grid measure: det D · det Im Z(y)."""
        z, _ = self.period_samples()
        dens = float(np.prod(self.polarization)) * np.linalg.det(z.imag)
        return np.broadcast_to(self._expand(dens, 0), self.grid().shape)

    def volume_weights(self) -> np.ndarray:
        """Quadrature weights for ∫ f dλ over the total space chart."""
        return self.grid().quadrature_weights() * self.volume_density()

    def frame(self) -> ComplexFrame:
        """
        Adapted (1,0) frame {Y_k, E_j} dual to the coframe {dy_k, e_j = dz_j − Σ_k (∂_kZ x_b)_j dy_k}.

        Y_k = ½(∂_Re − i∂_Im) at fixed x; E_j acts along the fiber with
        x_b-coefficients β = −(i/2)W⁻¹e_j and x_a-coefficients α = (i/2)D⁻¹Z̄W⁻¹e_j.
        """
        m, r, n = self.m, self.r, self.n
        d = 2 * n
        z, dz = self.period_samples()
        base = z.shape[:-2]
        w_inv = np.linalg.inv(z.imag)
        d_inv = np.diag(1.0 / np.asarray(self.polarization, dtype=float))

        theta = np.zeros(base + (n, d), dtype=complex)
        for k in range(m):
            theta[..., k, 2 * k] = 0.5
            theta[..., k, 2 * k + 1] = -0.5j
        alpha = 0.5j * d_inv @ np.conj(z) @ w_inv
        beta = -0.5j * w_inv
        # column j of alpha/beta belongs to E_j
        theta[..., m:, 2 * m: 2 * m + r] = np.swapaxes(alpha, -1, -2)
        theta[..., m:, 2 * m + r:] = np.swapaxes(beta, -1, -2)

        dtheta = np.zeros(base + (d, n, d), dtype=complex)
        for k in range(m):
            dzk = dz[..., k, :, :]
            for axis, dZ in ((2 * k, dzk), (2 * k + 1, 1j * dzk)):
                dZbar = np.conj(dZ)
                dW = dZ.imag
                dw_inv = -w_inv @ dW @ w_inv
                d_alpha = 0.5j * d_inv @ (dZbar @ w_inv + np.conj(z) @ dw_inv)
                d_beta = -0.5j * dw_inv
                dtheta[..., axis, m:, 2 * m: 2 * m + r] = np.swapaxes(d_alpha, -1, -2)
                dtheta[..., axis, m:, 2 * m + r:] = np.swapaxes(d_beta, -1, -2)

        return ComplexFrame(self.grid(), self._expand(theta, 2), self._expand(dtheta, 3))

    def chart_to_frame(self) -> np.ndarray:
        """A with dw = A θ (dw = (dy, dz)); chart coefficients map to frame ones by Aᵀ H Ā."""
        z, dz = self.period_samples()
        mesh = self.grid().mesh()
        xb = np.stack([mesh[2 * self.m + self.r + j] for j in range(self.r)], axis=-1)
        dz_full = self._expand(dz, 3)
        # c[..., k, j] = (∂_k Z x_b)_j
        c = np.einsum("...kji,...i->...kj", dz_full, xb)
        a = np.broadcast_to(np.eye(self.n, dtype=complex), self.grid().shape + (self.n, self.n)).copy()
        a[..., self.m:, : self.m] = np.swapaxes(c, -1, -2)
        return a

    def omega_0(self) -> HermitianField:
        """Pullback of the base form: only the base-base block is nonzero."""
        h = np.zeros((self.n, self.n), dtype=complex)
        h[: self.m, : self.m] = self.base_form
        return HermitianField.constant(self.grid(), h, name="omega_0")

    def fiber_lattice(self, y) -> FiberLattice:
        return FiberLattice(np.asarray(y, dtype=complex), tuple(self.polarization), period_at(self, y))


# --- operations ---------------------------------------------------------------

def period_at(model: FibrationModel, y) -> np.ndarray:
    """Z(y), validated against the chart and the Im Z floor."""
    y = np.atleast_1d(np.asarray(y, dtype=complex))
    if y.shape != (model.m,):
        raise DomainError(f"base point must have {model.m} complex coordinates")
    if not model.chart.contains(y):
        raise DomainError(f"base point {y} lies outside the {model.chart.kind} chart")
    z = model.period_map.evaluate(y)
    min_eig = float(np.min(np.linalg.eigvalsh(z.imag)))
    if min_eig < model.imz_floor:
        raise DegenerateError(f"min eig(Im Z(y)) = {min_eig:.3e} below floor {model.imz_floor}")
    return z


def lattice_coordinates(lat: FiberLattice, z) -> np.ndarray:
    """Real coordinates of z in the lattice basis (no reduction)."""
    basis = lat.real_basis
    det = np.linalg.det(basis)
    if abs(det) < 1e-14:
        raise DegenerateError(f"real period matrix is singular (det {det:.3e})")
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    return np.linalg.solve(basis, np.concatenate([z.real, z.imag]))


def reduce_to_fundamental(lat: FiberLattice, z) -> np.ndarray:
    """Coordinates x in [0,1)^{2r} of z modulo Λ_y."""
    x = lattice_coordinates(lat, z)
    x = x - np.floor(x)
    x[x >= 1.0 - WRAP_TOL] = 0.0
    x[np.abs(x) < WRAP_TOL] = 0.0
    return x


def winding(lat: FiberLattice, z) -> np.ndarray:
    """Integer lattice part removed by reduce_to_fundamental."""
    x = lattice_coordinates(lat, z)
    return np.rint(x - reduce_to_fundamental(lat, z)).astype(int)


def flat_translate(lat: FiberLattice, z, coeffs) -> np.ndarray:
    """z + Σ coeffs_i b_i over the real lattice basis at y."""
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    return z + lat.basis @ np.asarray(coeffs, dtype=float)


def holomorphy_residual(period_map: PeriodMap, points, h: float = 1e-3) -> float:
    """Max central-difference Cauchy-Riemann residual |∂Z/∂ȳ_k| at the given base points."""
    points = np.atleast_2d(np.asarray(points, dtype=complex))
    worst = 0.0
    for k in range(period_map.m):
        step = np.zeros(period_map.m, dtype=complex)
        step[k] = h
        d_re = (period_map.evaluate(points + step) - period_map.evaluate(points - step)) / (2 * h)
        d_im = (period_map.evaluate(points + 1j * step) - period_map.evaluate(points - 1j * step)) / (2 * h)
        worst = max(worst, float(np.max(np.abs(0.5 * (d_re + 1j * d_im)))))
    return worst


# --- built-in families ------------------------------------------------------------

def family_a(base_shape=(16, 16), fiber_shape=(16, 16)) -> FibrationModel:
    """Flat product over the torus ℂ/(ℤ+iℤ) with fiber period i."""
    return FibrationModel(
        name="A",
        n=2,
        m=1,
        chart=BaseChart("periodic", (0.0, 0.0), (1.0, 1.0)),
        period_map=PeriodMap.constant(1j),
        base_shape=tuple(base_shape),
        fiber_shape=tuple(fiber_shape),
        omega_m_recipe="FlatProduct",
        mu_recipe="OmegaMPower",
    )


def family_b(epsilon: float = 0.3, base_shape=(16, 16), fiber_shape=(16, 16),
             fiber_wobble: float = 0.01, mu_recipe: str = "HolomorphicSquare") -> FibrationModel:
    """Local model over (−1,1)² with Z(y) = i + εy and Dirichlet data."""
    return FibrationModel(
        name="B",
        n=2,
        m=1,
        chart=BaseChart("dirichlet", (-1.0, -1.0), (1.0, 1.0)),
        period_map=PeriodMap.affine(1j, [epsilon]),
        base_shape=tuple(base_shape),
        fiber_shape=tuple(fiber_shape),
        omega_m_recipe="SemiFlatPlusBase",
        mu_recipe=mu_recipe,
        fiber_wobble=fiber_wobble,
    )


def model_from_config(block: Mapping[str, Any]) -> FibrationModel:
    """Build a model from the "model" block of a scenario config."""
    grid = block["grid"]
    if block["n"] != 2 or block["m"] != 1:
        raise ConfigError(f"families A and B are built with n=2, m=1, got n={block['n']}, m={block['m']}")
    if block["family"] == "A":
        model = family_a(grid["base"], grid["fiber"])
    else:
        model = family_b(block["epsilon"], grid["base"], grid["fiber"],
                         fiber_wobble=block["fiber_wobble"], mu_recipe=block["mu"])
    polarization = tuple(block.get("polarization") or (1,) * model.r)
    if polarization != model.polarization:
        values = {f: getattr(model, f) for f in model.__dataclass_fields__}
        values["polarization"] = polarization
        model = FibrationModel(**values)
    return model
