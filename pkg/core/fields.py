"""
Grid-field calculus for CollapseLab.

Fields live on structured tensor grids whose axes are either periodic
(Fourier spectral derivatives) or Dirichlet (4th-order finite differences
with one-sided closures). Complex Hessians are taken in a (1,0) frame
{Θ_a = Σ_k Θ_ak ∂_k} so that metrics can be stored in whatever frame keeps
their coefficients periodic.
"""
import logging
from dataclasses import dataclass, replace
from functools import cached_property, lru_cache
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import fft

from core.errors import DegeneratePlaneError, PositivityError, ShapeError

logger = logging.getLogger(__name__)

HERMITIAN_TOL = 1e-12
POSITIVITY_FLOOR = 1e-8
PLANE_GRAM_FLOOR = 1e-10


@dataclass(frozen=True)
class Grid:
    """Tensor grid; periodic axes store one period, Dirichlet axes include both endpoints."""

    shape: Tuple[int, ...]
    periodic: Tuple[bool, ...]
    lengths: Tuple[float, ...]
    origins: Tuple[float, ...]
    roles: Tuple[str, ...]

    def __post_init__(self):
        d = len(self.shape)
        if not (len(self.periodic) == len(self.lengths) == len(self.origins) == len(self.roles) == d):
            raise ShapeError("grid axis descriptors have inconsistent lengths")
        for axis, (n, length, periodic) in enumerate(zip(self.shape, self.lengths, self.periodic)):
            if length <= 0:
                raise ShapeError(f"axis {axis}: length must be positive, got {length}")
            if not periodic and n < 6:
                raise ShapeError(f"axis {axis}: Dirichlet axes need at least 4 interior points")
            if periodic and n < 2:
                raise ShapeError(f"axis {axis}: periodic axes need at least 2 points")

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def spacing(self, axis: int) -> float:
        n = self.shape[axis]
        if self.periodic[axis]:
            return self.lengths[axis] / n
        return self.lengths[axis] / (n - 1)

    def coordinates(self, axis: int) -> np.ndarray:
        return self.origins[axis] + self.spacing(axis) * np.arange(self.shape[axis])

    def mesh(self) -> Tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*[self.coordinates(k) for k in range(self.ndim)], indexing="ij"))

    def axes(self, role: str) -> Tuple[int, ...]:
        return tuple(k for k, r in enumerate(self.roles) if r == role)

    def quadrature_weights(self) -> np.ndarray:
        """Trapezoid weights on Dirichlet axes, uniform weights on periodic axes."""
        weights = np.ones(self.shape)
        for axis in range(self.ndim):
            w = np.full(self.shape[axis], self.spacing(axis))
            if not self.periodic[axis]:
                w[0] *= 0.5
                w[-1] *= 0.5
            weights = weights * _along(w, axis, self.ndim)
        return weights

    def interior_mask(self, cells: int = 1) -> np.ndarray:
        """Points at least `cells` grid steps away from every Dirichlet boundary."""
        mask = np.ones(self.shape, dtype=bool)
        for axis in range(self.ndim):
            if self.periodic[axis]:
                continue
            idx = np.arange(self.shape[axis])
            keep = (idx >= cells) & (idx <= self.shape[axis] - 1 - cells)
            mask &= _along(keep, axis, self.ndim)
        return mask

    def trusted_mask(self, fraction: float = 0.5, min_cells: int = 4) -> np.ndarray:
        """Centered sub-box of the base axes (all fiber axes kept), away from Dirichlet walls."""
        mask = self.interior_mask(min_cells)
        for axis in self.axes("base"):
            center = self.origins[axis] + 0.5 * self.lengths[axis]
            half = 0.5 * fraction * self.lengths[axis]
            keep = np.abs(self.coordinates(axis) - center) <= half + 1e-12
            mask &= _along(keep, axis, self.ndim)
        return mask

    def center_index(self, role: str = "base") -> Tuple[int, ...]:
        """Grid index nearest the chart center along axes of `role`."""
        index = []
        for axis in self.axes(role):
            center = self.origins[axis] + 0.5 * self.lengths[axis]
            index.append(int(np.argmin(np.abs(self.coordinates(axis) - center))))
        return tuple(index)

    def subgrid(self, axes: Sequence[int]) -> "Grid":
        axes = tuple(axes)
        return Grid(
            shape=tuple(self.shape[k] for k in axes),
            periodic=tuple(self.periodic[k] for k in axes),
            lengths=tuple(self.lengths[k] for k in axes),
            origins=tuple(self.origins[k] for k in axes),
            roles=tuple(self.roles[k] for k in axes),
        )

    def scaled(self, factors: Sequence[float]) -> "Grid":
        """Same samples, axis lengths (and origins) multiplied by `factors`."""
        return replace(
            self,
            lengths=tuple(l * f for l, f in zip(self.lengths, factors)),
            origins=tuple(o * f for o, f in zip(self.origins, factors)),
        )


def _along(vector: np.ndarray, axis: int, ndim: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = -1
    return np.reshape(vector, shape)


# --- derivative matrices -------------------------------------------------

@lru_cache(maxsize=None)
def _spectral_matrix(n: int, length: float, order: int) -> np.ndarray:
    k = 2.0 * np.pi * fft.fftfreq(n, d=length / n)
    if n % 2 == 0:
        k[n // 2] = 0.0
    d1 = fft.ifft(1j * k[:, None] * fft.fft(np.eye(n), axis=0), axis=0).real
    mat = d1 if order == 1 else d1 @ d1
    mat.setflags(write=False)
    return mat


@lru_cache(maxsize=None)
def _fd_matrix(n: int, h: float, order: int) -> np.ndarray:
    mat = np.zeros((n, n))
    if order == 1:
        stencil = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / (12.0 * h)
        for i in range(2, n - 2):
            mat[i, i - 2:i + 3] = stencil
        mat[0, :5] = np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / (12.0 * h)
        mat[1, :5] = np.array([-3.0, -10.0, 18.0, -6.0, 1.0]) / (12.0 * h)
        mat[n - 1, n - 5:] = np.array([3.0, -16.0, 36.0, -48.0, 25.0]) / (12.0 * h)
        mat[n - 2, n - 5:] = np.array([-1.0, 6.0, -18.0, 10.0, 3.0]) / (12.0 * h)
    else:
        stencil = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / (12.0 * h * h)
        for i in range(2, n - 2):
            mat[i, i - 2:i + 3] = stencil
        edge0 = np.array([45.0, -154.0, 214.0, -156.0, 61.0, -10.0]) / (12.0 * h * h)
        edge1 = np.array([10.0, -15.0, -4.0, 14.0, -6.0, 1.0]) / (12.0 * h * h)
        mat[0, :6] = edge0
        mat[1, :6] = edge1
        mat[n - 1, n - 6:] = edge0[::-1]
        mat[n - 2, n - 6:] = edge1[::-1]
    mat.setflags(write=False)
    return mat


def derivative_matrix(grid: Grid, axis: int, order: int = 1) -> np.ndarray:
    """Dense 1-D differentiation matrix for one axis (order 1 or 2)."""
    n = grid.shape[axis]
    if grid.periodic[axis]:
        return _spectral_matrix(n, float(grid.lengths[axis]), order)
    return _fd_matrix(n, float(grid.spacing(axis)), order)


def _apply(mat: np.ndarray, values: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(mat, values, axes=([1], [axis])), 0, axis)


def derivative(values: np.ndarray, grid: Grid, axis: int, order: int = 1) -> np.ndarray:
    """Differentiate along a grid axis; trailing non-grid dimensions are carried along."""
    return _apply(derivative_matrix(grid, axis, order), values, axis)


def gradient(values: np.ndarray, grid: Grid) -> np.ndarray:
    return np.stack([derivative(values, grid, k) for k in range(grid.ndim)], axis=-1)


def hessian(values: np.ndarray, grid: Grid) -> np.ndarray:
    """Real Hessian (..., d, d); mixed entries are D_k D_l, diagonal ones use the order-2 matrix."""
    d = grid.ndim
    first = [derivative(values, grid, k) for k in range(d)]
    out = np.empty(values.shape + (d, d), dtype=np.result_type(values, float))
    for k in range(d):
        out[..., k, k] = derivative(values, grid, k, order=2)
        for l in range(k + 1, d):
            mixed = derivative(first[l], grid, k)
            out[..., k, l] = mixed
            out[..., l, k] = mixed
    return out


# --- fields --------------------------------------------------------------

@dataclass(frozen=True)
class GridField:
    """Scalar field sampled on a grid."""

    grid: Grid
    values: np.ndarray
    name: str = ""

    def __post_init__(self):
        values = np.array(self.values, copy=True)
        if values.shape != self.grid.shape:
            raise ShapeError(f"field {self.name!r}: shape {values.shape} does not match grid {self.grid.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def _other(self, other):
        if isinstance(other, GridField):
            if other.grid != self.grid:
                raise ShapeError("fields live on different grids")
            return other.values
        return other

    def __add__(self, other):
        return GridField(self.grid, self.values + self._other(other), self.name)

    def __sub__(self, other):
        return GridField(self.grid, self.values - self._other(other), self.name)

    def __mul__(self, other):
        return GridField(self.grid, self.values * self._other(other), self.name)

    __rmul__ = __mul__

    def __neg__(self):
        return GridField(self.grid, -self.values, self.name)

    def renamed(self, name: str) -> "GridField":
        return GridField(self.grid, self.values, name)

    @classmethod
    def zeros(cls, grid: Grid, name: str = "") -> "GridField":
        return cls(grid, np.zeros(grid.shape), name)


@dataclass(frozen=True)
class HermitianField:
    """Field of n×n Hermitian matrices; values has shape grid.shape + (n, n)."""

    grid: Grid
    values: np.ndarray
    name: str = ""

    def __post_init__(self):
        values = np.array(self.values, dtype=complex, copy=True)
        if values.shape[:-2] != self.grid.shape or values.ndim != self.grid.ndim + 2 \
                or values.shape[-1] != values.shape[-2]:
            raise ShapeError(f"hermitian field {self.name!r}: shape {values.shape} does not match grid {self.grid.shape}")
        defect = np.max(np.abs(values - np.conj(np.swapaxes(values, -1, -2)))) if values.size else 0.0
        scale = max(1.0, float(np.max(np.abs(values)))) if values.size else 1.0
        if defect > HERMITIAN_TOL * scale:
            raise ShapeError(f"hermitian field {self.name!r}: asymmetry {defect:.3e}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def symmetrized(cls, grid: Grid, values: np.ndarray, name: str = "") -> "HermitianField":
        values = np.asarray(values, dtype=complex)
        return cls(grid, 0.5 * (values + np.conj(np.swapaxes(values, -1, -2))), name)

    @classmethod
    def constant(cls, grid: Grid, matrix: np.ndarray, name: str = "") -> "HermitianField":
        matrix = np.asarray(matrix, dtype=complex)
        return cls(grid, np.broadcast_to(matrix, grid.shape + matrix.shape), name)

    @property
    def n(self) -> int:
        return self.values.shape[-1]

    def _other(self, other):
        if isinstance(other, HermitianField):
            if other.grid != self.grid:
                raise ShapeError("fields live on different grids")
            return other.values
        return other

    def __add__(self, other):
        return HermitianField.symmetrized(self.grid, self.values + self._other(other), self.name)

    def __sub__(self, other):
        return HermitianField.symmetrized(self.grid, self.values - self._other(other), self.name)

    def __mul__(self, scalar):
        if isinstance(scalar, GridField):
            return HermitianField.symmetrized(self.grid, self.values * scalar.values[..., None, None], self.name)
        return HermitianField.symmetrized(self.grid, self.values * float(scalar), self.name)

    __rmul__ = __mul__

    def eigvalsh(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.values)

    def min_eig(self, mask: Optional[np.ndarray] = None) -> float:
        eig = self.eigvalsh()[..., 0]
        return float(np.min(eig if mask is None else eig[mask]))

    def det(self) -> np.ndarray:
        return np.real(np.linalg.det(self.values))

    def logdet(self) -> np.ndarray:
        det = self.det()
        if np.any(det <= 0):
            raise PositivityError(f"{self.name or 'metric'}: non-positive determinant (min {np.min(det):.3e})")
        return np.log(det)

    def inv(self) -> np.ndarray:
        return np.linalg.inv(self.values)

    def block(self, rows: Sequence[int], cols: Sequence[int]) -> np.ndarray:
        return self.values[..., list(rows), :][..., list(cols)]


# --- frames ----------------------------------------------------------------

@dataclass(frozen=True)
class ComplexFrame:
    """
    (1,0) vector fields Θ_a = Σ_k theta[..., a, k] ∂/∂u_k on the grid.

    theta broadcasts to grid.shape + (n, d) and dtheta to grid.shape + (d, n, d),
    with dtheta[..., k, a, l] = ∂_k theta[..., a, l].
    """

    grid: Grid
    theta: np.ndarray
    dtheta: np.ndarray

    @classmethod
    def flat(cls, grid: Grid) -> "ComplexFrame":
        """Θ_a = ½(∂_{2a} − i∂_{2a+1}): complex coordinates w_a = u_{2a} + i u_{2a+1}."""
        d = grid.ndim
        if d % 2:
            raise ShapeError("a flat complex frame needs an even number of real axes")
        n = d // 2
        theta = np.zeros((n, d), dtype=complex)
        for a in range(n):
            theta[a, 2 * a] = 0.5
            theta[a, 2 * a + 1] = -0.5j
        pad = (1,) * d
        return cls(grid, theta.reshape(pad + (n, d)), np.zeros(pad + (d, n, d), dtype=complex))

    @property
    def n(self) -> int:
        return self.theta.shape[-2]

    @property
    def d(self) -> int:
        return self.theta.shape[-1]

    def is_constant(self) -> bool:
        return not np.any(self.dtheta)

    @cached_property
    def coframe(self) -> np.ndarray:
        """P with θ^a = Σ_l P[..., a, l] du_l, dual to Θ and annihilating Θ̄."""
        stacked = np.concatenate([self.theta, np.conj(self.theta)], axis=-2)
        inverse = np.linalg.inv(np.swapaxes(stacked, -1, -2))
        return inverse[..., : self.n, :]

    @cached_property
    def connection(self) -> np.ndarray:
        """T[..., a, b, l] so that ∂∂̄φ(Θ_a, Θ̄_b) = Σ Θ_akΘ̄_bl ∂_k∂_lφ + Σ_l T_abl ∂_lφ."""
        th = self.theta
        dth = self.dtheta
        term = np.einsum("...ak,...kbl->...abl", th, np.conj(dth))
        bracket = term - np.einsum("...bk,...kal->...abl", np.conj(th), dth)
        coeff = np.einsum("...cl,...abl->...abc", np.conj(self.coframe), bracket)
        return term - np.einsum("...abc,...cl->...abl", coeff, np.conj(th))

    def real_metric(self, metric: HermitianField) -> np.ndarray:
        """Riemannian metric G_kl = Re Σ P_ak H_ab conj(P_bl) in grid coordinates."""
        p = self.coframe
        return np.real(np.einsum("...ak,...ab,...bl->...kl", p, metric.values, np.conj(p)))

    def coframe_determinant(self) -> np.ndarray:
        """|det| of the real 2n×2n matrix of (Re θ, Im θ); converts dλ_u to Euclidean measure of the frame."""
        p = np.broadcast_to(self.coframe, self.grid.shape + (self.n, self.d))
        real = np.concatenate([p.real, p.imag], axis=-2)
        return np.abs(np.linalg.det(real))


# --- operations --------------------------------------------------------------

def _real_values(phi: GridField) -> np.ndarray:
    values = phi.values
    if np.iscomplexobj(values):
        if np.max(np.abs(values.imag)) > 1e-12 * max(1.0, np.max(np.abs(values))):
            raise ShapeError(f"ddbar expects a real potential, {phi.name!r} is complex")
        values = values.real
    return values


def ddbar(phi: GridField, frame: Optional[ComplexFrame] = None) -> HermitianField:
    """Coefficients of √−1∂∂̄φ in the frame: H_ab = ∂∂̄φ(Θ_a, Θ̄_b)."""
    frame = frame or ComplexFrame.flat(phi.grid)
    if frame.grid != phi.grid:
        raise ShapeError("potential and frame live on different grids")
    values = _real_values(phi)
    hess = hessian(values, phi.grid)
    th = frame.theta
    out = np.einsum("...ak,...bl,...kl->...ab", th, np.conj(th), hess)
    if not frame.is_constant():
        out = out + np.einsum("...abl,...l->...ab", frame.connection, gradient(values, phi.grid))
    return HermitianField.symmetrized(phi.grid, out, name=f"ddbar({phi.name})")


def dbar(h: np.ndarray, frame: ComplexFrame) -> np.ndarray:
    """(0,1)-differential of a complex function: coefficients Θ̄_b h on the coframe θ̄^b."""
    grad = gradient(np.asarray(h), frame.grid)
    return np.einsum("...bl,...l->...b", np.conj(frame.theta), grad)


def ricci_form(g: HermitianField, frame: Optional[ComplexFrame] = None) -> HermitianField:
    """−√−1∂∂̄ log det g, with det taken in the frame (holomorphic volume up to a constant)."""
    logdet = g.logdet()
    ric = ddbar(GridField(g.grid, logdet, "logdet"), frame)
    return HermitianField(g.grid, -ric.values, name=f"Ric({g.name})")


def eigen_envelope(g: HermitianField, h: HermitianField,
                   region: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """Extremal generalized eigenvalues of g relative to h over the region."""
    if g.grid != h.grid:
        raise ShapeError("pencil fields live on different grids")
    eig = generalized_eigenvalues(g, h)
    if region is not None:
        eig = eig[region]
    return float(np.min(eig)), float(np.max(eig))


def generalized_eigenvalues(g: HermitianField, h: HermitianField) -> np.ndarray:
    try:
        chol = np.linalg.cholesky(h.values)
    except np.linalg.LinAlgError as e:
        raise PositivityError(f"{h.name or 'reference'} is not positive definite") from e
    linv = np.linalg.inv(chol)
    pencil = linv @ g.values @ np.conj(np.swapaxes(linv, -1, -2))
    pencil = 0.5 * (pencil + np.conj(np.swapaxes(pencil, -1, -2)))
    return np.linalg.eigvalsh(pencil)


class CurvatureEvaluator:
    """Levi-Civita curvature of the Riemannian metric of a Hermitian field, from grid derivatives."""

    def __init__(self, metric: HermitianField, frame: Optional[ComplexFrame] = None):
        self.grid = metric.grid
        self.frame = frame or ComplexFrame.flat(metric.grid)
        self.metric = self.frame.real_metric(metric)
        if np.min(np.linalg.eigvalsh(self.metric)[..., 0]) <= 0:
            raise PositivityError(f"{metric.name or 'metric'} is not positive definite")

    @cached_property
    def christoffel(self) -> np.ndarray:
        """Γ[..., i, j, k] = Γ^i_jk."""
        g = self.metric
        dg = np.stack([derivative(g, self.grid, k) for k in range(self.grid.ndim)], axis=-3)
        # dg[..., k, i, j] = ∂_k g_ij
        lowered = 0.5 * (
            np.einsum("...jmk->...mjk", dg)
            + np.einsum("...kmj->...mjk", dg)
            - np.einsum("...mjk->...mjk", dg)
        )
        return np.einsum("...im,...mjk->...ijk", np.linalg.inv(g), lowered)

    def _line_derivative(self, values: np.ndarray, index: Tuple[int, ...], axis: int) -> np.ndarray:
        row = derivative_matrix(self.grid, axis, 1)[index[axis]]
        line = tuple(slice(None) if k == axis else index[k] for k in range(self.grid.ndim))
        return np.tensordot(row, values[line], axes=1)

    def riemann(self, index: Tuple[int, ...]) -> np.ndarray:
        """R[i, j, k, l] = R^i_jkl with R(∂_k, ∂_l)∂_j = R^i_jkl ∂_i at a grid point."""
        gamma = self.christoffel
        d = self.grid.ndim
        dgamma = np.stack([self._line_derivative(gamma, index, k) for k in range(d)])
        # dgamma[k, i, j, l] = ∂_k Γ^i_jl
        g0 = gamma[index]
        return (
            np.einsum("kilj->ijkl", dgamma)
            - np.einsum("likj->ijkl", dgamma)
            + np.einsum("ikm,mlj->ijkl", g0, g0)
            - np.einsum("ilm,mkj->ijkl", g0, g0)
        )

    def sectional(self, index: Tuple[int, ...], x: np.ndarray, y: np.ndarray,
                  riemann: Optional[np.ndarray] = None) -> float:
        g = self.metric[index]
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        gram = (x @ g @ x) * (y @ g @ y) - (x @ g @ y) ** 2
        if gram < PLANE_GRAM_FLOOR:
            raise DegeneratePlaneError(f"plane Gram determinant {gram:.3e} below {PLANE_GRAM_FLOOR}")
        r = self.riemann(index) if riemann is None else riemann
        value = np.einsum("im,ijkl,m,j,k,l->", g, r, x, y, x, y)
        return float(value / gram)


def riemann_sectional(g: HermitianField, p: Tuple[int, ...], plane: Tuple[np.ndarray, np.ndarray],
                      frame: Optional[ComplexFrame] = None) -> float:
    """Sectional curvature of the metric at grid point p on the real 2-plane span(plane)."""
    return CurvatureEvaluator(g, frame).sectional(tuple(p), plane[0], plane[1])
