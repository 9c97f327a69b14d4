"""
Semi-flat geometry of a torus fibration.

Pointwise operations (eta, semiflat_form, theta_form) use chart
coordinates (y, z) and closed-form derivatives of η. Grid operations use the
model's adapted frame {dy, e = dz − Σ_k ∂_kZ x_b dy_k}, in which
ω_SF = √−1 Σ g_ij e_i ∧ ē_j has the fiberwise constant coefficients diag(0, g(y)).
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import fft

from core.errors import ChartError, HolomorphyError, ObstructionError
from core.fields import ComplexFrame, GridField, HermitianField, dbar, ddbar, derivative
from core.model import FibrationModel, period_at, reduce_to_fundamental, winding

logger = logging.getLogger(__name__)

HOLOMORPHY_TOL = 1e-5
OBSTRUCTION_TOL = 1e-8
REBUILD_TOL = 1e-6


# --- pointwise closed forms -------------------------------------------------------

def eta(model: FibrationModel, y, z) -> float:
    """η(y, z) = −½ Σ g_ij(y)(z_i − z̄_i)(z_j − z̄_j)."""
    g = np.linalg.inv(period_at(model, y).imag)
    v = np.atleast_1d(np.asarray(z, dtype=complex))
    v = v - np.conj(v)
    return float(np.real(-0.5 * v @ g @ v))


def semiflat_form(model: FibrationModel, y, z) -> np.ndarray:
    """Chart coefficients of √−1∂∂̄η at (y, z); blocks ordered (y, z)."""
    y = np.atleast_1d(np.asarray(y, dtype=complex))
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    m, r = model.m, model.r
    big_z = period_at(model, y)
    g = np.linalg.inv(big_z.imag)
    b = g @ z.imag
    # c[:, k] = ∂_kZ · b, with b = (Im Z)⁻¹ Im z the x_b coordinate
    c = np.stack([model.period_map.derivative(y, k) @ b for k in range(m)], axis=1)
    out = np.zeros((model.n, model.n), dtype=complex)
    out[:m, :m] = c.T @ g @ np.conj(c)
    out[:m, m:] = -(g @ c).T
    out[m:, :m] = np.conj(out[:m, m:]).T
    out[m:, m:] = g
    return out


def theta_form(model: FibrationModel, j: int, y, x_b=None) -> Tuple[np.ndarray, np.ndarray]:
    """
    θ_j = √−1∂̄(Σ_i g_ij (z_i − z̄_i)) on the coframe {dz̄^i, dȳ^k}.

    Returns (fiber coefficients, base coefficients) at the point of the fiber
    over y with coordinate x_b (default 0). In the adapted coframe θ_j = −√−1 (g ē)_j.
    """
    y = np.atleast_1d(np.asarray(y, dtype=complex))
    g = np.linalg.inv(period_at(model, y).imag)
    x_b = np.zeros(model.r) if x_b is None else np.asarray(x_b, dtype=float)
    fiber = -1j * g[:, j]
    base = np.array([
        1j * (g @ np.conj(model.period_map.derivative(y, k)) @ x_b)[j] for k in range(model.m)
    ])
    return fiber, base


# --- grid fields ------------------------------------------------------------------

def fiber_average(field: GridField) -> GridField:
    """Mean over the fiber axes, broadcast back along the fiber."""
    axes = field.grid.axes("fiber")
    mean = np.mean(field.values, axis=axes, keepdims=True)
    return GridField(field.grid, np.broadcast_to(mean, field.grid.shape), name=f"avg({field.name})")


def fiber_oscillation(values: np.ndarray, model: FibrationModel) -> np.ndarray:
    """max − min over each fiber, on the base grid."""
    axes = tuple(range(2 * model.m, 2 * model.n))
    return np.max(values, axis=axes) - np.min(values, axis=axes)


def semiflat_field(model: FibrationModel) -> HermitianField:
    """ω_SF in the adapted frame: diag(0, g(y))."""
    grid = model.grid()
    values = np.zeros(grid.shape + (model.n, model.n), dtype=complex)
    values[..., model.m:, model.m:] = model.fiber_metric()
    return HermitianField(grid, values, name="omega_SF")


@dataclass(frozen=True, eq=False)
class SemiFlatData:
    """ω_SF of a model on its grid, with g and η evaluators and an optional base form ω′."""

    model: FibrationModel
    omega_sf: HermitianField
    base_prime: Optional[np.ndarray] = None

    @classmethod
    def build(cls, model: FibrationModel, base_prime: Optional[np.ndarray] = None) -> "SemiFlatData":
        data = cls(model, semiflat_field(model), base_prime)
        floor = data.omega_sf.min_eig()
        if floor < -1e-10:
            raise ObstructionError(f"semi-flat form has a negative eigenvalue {floor:.3e}")
        return data

    def g(self, y) -> np.ndarray:
        return np.linalg.inv(period_at(self.model, y).imag)

    def eta(self, y, z) -> float:
        return eta(self.model, y, z)

    def metric(self) -> HermitianField:
        """ω_SF + f*ω′; positive definite for a positive ω′."""
        prime = self.model.base_prime if self.base_prime is None else np.asarray(self.base_prime, dtype=complex)
        values = np.array(self.omega_sf.values)
        values[..., : self.model.m, : self.model.m] += prime
        return HermitianField(self.omega_sf.grid, values, name="omega_SF+f*omega'")


def wobble_potential(model: FibrationModel) -> GridField:
    """Fiber-dependent potential χ = a Σ_j cos(2πx_aj) cos(2πx_bj) added to ω_M."""
    grid = model.grid()
    mesh = grid.mesh()
    m, r = model.m, model.r
    chi = np.zeros(grid.shape)
    for j in range(r):
        chi += np.cos(2 * np.pi * mesh[2 * m + j]) * np.cos(2 * np.pi * mesh[2 * m + r + j])
    return GridField(grid, model.fiber_wobble * chi, name="chi")


def reference_metric(model: FibrationModel, frame: Optional[ComplexFrame] = None) -> HermitianField:
    """ω_M by recipe: FlatProduct, or ω_SF + f*ω′ (+ √−1∂∂̄χ when the wobble is on)."""
    grid = model.grid()
    values = np.zeros(grid.shape + (model.n, model.n), dtype=complex)
    values[..., : model.m, : model.m] = model.base_prime
    values[..., model.m:, model.m:] = model.fiber_metric()
    omega = HermitianField(grid, values, name="omega_M")
    if model.omega_m_recipe == "SemiFlatPlusBase" and model.fiber_wobble:
        frame = frame or model.frame()
        omega = omega + ddbar(wobble_potential(model), frame)
    return HermitianField(grid, omega.values, name="omega_M")


def fiber_volumes(model: FibrationModel, omega: HermitianField) -> np.ndarray:
    """∫_{M_y} (ω|_{M_y})^r / r! on the base grid."""
    fiber_block = omega.values[..., model.m:, model.m:]
    density = np.real(np.linalg.det(fiber_block)) * model.volume_density()
    weights = model.fiber_grid().quadrature_weights()
    axes = tuple(range(2 * model.m, 2 * model.n))
    return np.sum(density * weights.reshape((1,) * (2 * model.m) + weights.shape), axis=axes)


# --- translations -------------------------------------------------------------------

def _base_holomorphic_derivative(values: np.ndarray, model: FibrationModel, k: int,
                                 anti: bool = False) -> np.ndarray:
    grid = model.base_grid()
    d_re = derivative(values, grid, 2 * k)
    d_im = derivative(values, grid, 2 * k + 1)
    return 0.5 * (d_re + 1j * d_im) if anti else 0.5 * (d_re - 1j * d_im)


def phi_correction(model: FibrationModel, sigma: np.ndarray) -> np.ndarray:
    """Φ(y) = −Σ (g_ij/2)(σ_i − σ̄_i)(σ_j − σ̄_j) = 2 Im σᵀ g Im σ on the base grid."""
    z, _ = model.period_samples()
    g = np.linalg.inv(z.imag)
    im = np.asarray(sigma).imag
    return 2.0 * np.einsum("...i,...ij,...j->...", im, g, im)


def translation_pullback(model: FibrationModel, sigma: np.ndarray) -> HermitianField:
    """
    T_σ*ω_SF in the adapted frame for a section σ (base_shape + (r,)).

    With S_k = ∂_kσ − ∂_kZ (Im Z)⁻¹ Im σ the pullback is
    [[SᵀgS̄, Sᵀg], [gS̄, g]].
    """
    sigma = np.asarray(sigma, dtype=complex)
    z, dz = model.period_samples()
    g = np.linalg.inv(z.imag)
    shift = np.einsum("...ij,...j->...i", g, sigma.imag)
    columns = []
    for k in range(model.m):
        d_sigma = _base_holomorphic_derivative(sigma, model, k)
        columns.append(d_sigma - np.einsum("...ij,...j->...i", dz[..., k, :, :], shift))
    s = np.stack(columns, axis=-1)  # (..., r, m)
    m, n = model.m, model.n
    values = np.zeros(z.shape[:-2] + (n, n), dtype=complex)
    values[..., :m, :m] = np.swapaxes(s, -1, -2) @ g @ np.conj(s)
    values[..., :m, m:] = np.swapaxes(s, -1, -2) @ g
    values[..., m:, :m] = g @ np.conj(s)
    values[..., m:, m:] = g
    grid = model.grid()
    return HermitianField.symmetrized(grid, np.broadcast_to(model._expand(values, 2), grid.shape + (n, n)),
                                      name="T_sigma*omega_SF")


@dataclass(frozen=True, eq=False)
class TranslationSection:
    """A section σ of the fibration with its Φ correction, reported modulo Λ."""

    sigma: np.ndarray
    reduced: np.ndarray
    winding: np.ndarray
    phi: np.ndarray
    cr_residual: float


def _section(model: FibrationModel, sigma: np.ndarray) -> TranslationSection:
    ys = model.base_points()
    flat_y = ys.reshape(-1, model.m)
    flat_s = sigma.reshape(-1, model.r)
    reduced = np.empty((flat_s.shape[0], 2 * model.r))
    turns = np.empty((flat_s.shape[0], 2 * model.r), dtype=int)
    for i, (y, s) in enumerate(zip(flat_y, flat_s)):
        lat = model.fiber_lattice(y)
        reduced[i] = reduce_to_fundamental(lat, s)
        turns[i] = winding(lat, s)
    residual = 0.0
    for k in range(model.m):
        residual = max(residual, float(np.max(np.abs(_base_holomorphic_derivative(sigma, model, k, anti=True)))))
    return TranslationSection(
        sigma=sigma,
        reduced=reduced.reshape(sigma.shape[:-1] + (2 * model.r,)),
        winding=turns.reshape(sigma.shape[:-1] + (2 * model.r,)),
        phi=phi_correction(model, sigma),
        cr_residual=residual,
    )


def theta_coefficients(model: FibrationModel) -> np.ndarray:
    """Coefficients of θ_j on the conjugate coframe {dȳ, ē}: shape grid + (r, n)."""
    g = model.fiber_metric()
    grid = model.grid()
    out = np.zeros(grid.shape + (model.r, model.n), dtype=complex)
    out[..., model.m:] = np.broadcast_to(-1j * np.swapaxes(g, -1, -2), grid.shape + (model.r, model.r))
    return out


def _require_periodic(model: FibrationModel, frame: ComplexFrame) -> None:
    if not model.chart.periodic:
        raise ChartError("Fourier inversion needs a periodic base chart")
    if not frame.is_constant():
        raise ChartError("Fourier inversion needs a constant frame (constant period map)")


def _wavenumbers(grid) -> list:
    out = []
    for axis in range(grid.ndim):
        n = grid.shape[axis]
        k = 2.0 * np.pi * fft.fftfreq(n, d=grid.lengths[axis] / n)
        if n % 2 == 0:
            k[n // 2] = 0.0
        shape = [1] * grid.ndim
        shape[axis] = n
        out.append(k.reshape(shape))
    return out


def _mode_symbols(frame: ComplexFrame) -> np.ndarray:
    """Fourier symbols of Θ_a acting on e^{ik·u}: shape grid + (n,)."""
    grid = frame.grid
    ks = _wavenumbers(grid)
    theta = frame.theta.reshape((-1,) + frame.theta.shape[-2:])[0]
    return sum(1j * ks[l][..., None] * theta[:, l] for l in range(grid.ndim))


def solve_dbar(model: FibrationModel, rho: np.ndarray, frame: ComplexFrame) -> np.ndarray:
    """Least-squares Fourier solution h of ∂̄h = ρ with zero mean (ρ on the conjugate coframe)."""
    _require_periodic(model, frame)
    grid = frame.grid
    axes = tuple(range(grid.ndim))
    rho_hat = fft.fftn(rho, axes=axes)
    zero = rho_hat[(0,) * grid.ndim] / grid.size
    if np.max(np.abs(zero)) > OBSTRUCTION_TOL:
        raise ObstructionError(f"(0,1)-form has a harmonic part of size {np.max(np.abs(zero)):.3e}")
    # Θ̄_b e^{ik·u} = −conj(Θ_b·ik) e^{ik·u}
    symbols = -np.conj(_mode_symbols(frame))
    norm = np.sum(np.abs(symbols) ** 2, axis=-1)
    safe = np.where(norm > 0, norm, 1.0)
    h_hat = np.where(norm > 0, np.sum(np.conj(symbols) * rho_hat, axis=-1) / safe, 0.0)
    h = fft.ifftn(h_hat, axes=axes)
    defect = np.max(np.abs(dbar(h, frame) - rho))
    if defect > REBUILD_TOL * max(1.0, float(np.max(np.abs(rho)))):
        raise ObstructionError(f"(0,1)-form is not ∂̄-exact (defect {defect:.3e})")
    return h


def periodic_dbar_primitive(model: FibrationModel, omega: HermitianField,
                            frame: Optional[ComplexFrame] = None) -> np.ndarray:
    """
    ζ^{0,1} with ∂ζ + ∂̄ζ̄ = ω_SF − ω on the periodic chart.

    Solves √−1∂∂̄f = ω_SF − ω mode by mode and returns ζ = (√−1/2)∂̄f.
    """
    frame = frame or model.frame()
    _require_periodic(model, frame)
    grid = frame.grid
    beta = semiflat_field(model).values - omega.values
    axes = tuple(range(grid.ndim))
    mean = np.mean(beta, axis=axes)
    if np.max(np.abs(mean)) > OBSTRUCTION_TOL:
        raise ObstructionError(f"ω is not cohomologous to ω_SF (class defect {np.max(np.abs(mean)):.3e})")
    symbols = _mode_symbols(frame)
    trace_symbol = -np.sum(np.abs(symbols) ** 2, axis=-1)
    trace_hat = fft.fftn(np.trace(beta, axis1=-2, axis2=-1), axes=axes)
    safe = np.where(trace_symbol != 0, trace_symbol, 1.0)
    f = fft.ifftn(np.where(trace_symbol != 0, trace_hat / safe, 0.0), axes=axes).real
    potential = GridField(grid, f, name="f")
    defect = np.max(np.abs(ddbar(potential, frame).values - beta))
    if defect > OBSTRUCTION_TOL * max(1.0, float(np.max(np.abs(beta)))):
        raise ObstructionError(f"ω_SF − ω is not ∂∂̄-exact on the grid (defect {defect:.3e})")
    return 0.5j * dbar(f, frame)


def planted_translation_data(model: FibrationModel, c, psi: GridField,
                             frame: Optional[ComplexFrame] = None) -> Tuple[HermitianField, np.ndarray]:
    """ω = T_c*ω_SF − √−1∂∂̄ψ and ζ = Σ c_jθ_j + ∂̄h with h = √−1(ψ − Φ)/2, for a constant section c."""
    frame = frame or model.frame()
    c = np.asarray(c, dtype=complex)
    sigma = np.broadcast_to(c, tuple(model.base_shape) + (model.r,))
    omega = translation_pullback(model, sigma) - ddbar(psi, frame)
    phi = model._expand(phi_correction(model, sigma), 0)
    h = 0.5j * (psi.values - phi)
    zeta = np.einsum("j,...jb->...b", c, theta_coefficients(model)) + dbar(h, frame)
    return HermitianField(omega.grid, omega.values, name="omega"), zeta


def extract_translation(model: FibrationModel, omega: HermitianField, zeta01: np.ndarray,
                        frame: Optional[ComplexFrame] = None) -> Tuple[TranslationSection, GridField]:
    """
    Decompose ζ^{0,1} = Σσ_jθ_j + ∂̄h and return (σ, ξ) with T_σ*ω_SF − ω = √−1∂∂̄ξ.

    σ is the fiber average of the θ-coefficients, ξ = 2 Im h + Φ normalized so
    that its fiber average vanishes over the chart center.
    """
    frame = frame or model.frame()
    _require_periodic(model, frame)
    grid = model.grid()
    zeta01 = np.asarray(zeta01, dtype=complex)
    m = model.m

    z, _ = model.period_samples()
    w_mat = model._expand(z.imag, 2)
    # θ_j = −√−1 (g ē)_j, so the ē-coefficients a give θ-coefficients w = √−1 W a
    w = 1j * np.einsum("...ij,...j->...i", w_mat, zeta01[..., m:])
    fiber_axes = tuple(range(2 * m, 2 * model.n))
    sigma = np.mean(w, axis=fiber_axes)
    section = _section(model, sigma)
    if section.cr_residual > HOLOMORPHY_TOL:
        raise HolomorphyError(f"extracted section is not holomorphic (CR residual {section.cr_residual:.3e})")

    sigma_full = model._expand(sigma, 1)
    rho = zeta01 - np.einsum("...j,...jb->...b", sigma_full, theta_coefficients(model))
    h = solve_dbar(model, rho, frame)

    xi = 2.0 * h.imag + model._expand(section.phi, 0)
    center = grid.center_index("base")
    xi = xi - np.mean(xi[center])
    xi_field = GridField(grid, xi, name="xi")

    defect = np.max(np.abs((translation_pullback(model, sigma) - omega - ddbar(xi_field, frame)).values))
    if defect > REBUILD_TOL:
        raise ObstructionError(f"rebuilt ∂∂̄-identity fails (defect {defect:.3e})")
    logger.info("extracted section: CR residual %.2e, rebuild defect %.2e", section.cr_residual, defect)
    return section, xi_field
