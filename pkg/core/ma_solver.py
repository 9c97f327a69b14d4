"""
Damped Newton solver for the collapsing complex Monge-Ampère family

    (ω_t + √−1∂∂̄φ_t)^n = c_t t^{n−m} μ,   ω_t = ω_0 + t ω_M,

written as log det(ω_t + √−1∂∂̄φ) − log RHS = 0 in the model's adapted frame.
Linear steps use preconditioned GMRES; periodic problems iterate in the
mean-zero gauge and are sup-normalized at the end.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Any, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import fft
from scipy.sparse.linalg import LinearOperator, gmres

from core.errors import (
    CompatibilityError,
    NonConvergence,
    PositivityError,
    PositivityLossError,
    PreconditionError,
)
from core.fields import ComplexFrame, GridField, HermitianField, ddbar, derivative, generalized_eigenvalues
from core.model import FibrationModel
from core.semiflat import reference_metric

logger = logging.getLogger(__name__)

COMPATIBILITY_RTOL = 1e-8


@dataclass(frozen=True)
class SolverSettings:
    tol: float = 1e-9
    max_iter: int = 50
    damping: float = 0.5
    min_step: float = 2.0 ** -20
    linear_rtol: float = 1e-11
    positivity_floor: float = 1e-8
    restart: int = 60

    @classmethod
    def from_config(cls, block: Mapping[str, Any]) -> "SolverSettings":
        known = {k: block[k] for k in cls.__dataclass_fields__ if k in block}
        return cls(**known)


@dataclass(frozen=True, eq=False)
class MAProblem:
    """One member of the family: reference form ω_t and right-hand density on the model grid."""

    model: FibrationModel
    t: float
    frame: ComplexFrame
    omega_m: HermitianField
    omega_t: HermitianField
    rhs: np.ndarray
    c_t: float

    @property
    def periodic(self) -> bool:
        return self.model.chart.periodic

    @classmethod
    def build(cls, model: FibrationModel, t: float, frame: Optional[ComplexFrame] = None,
              omega_m: Optional[HermitianField] = None) -> "MAProblem":
        if t <= 0:
            raise PreconditionError(f"t must be positive, got {t}")
        frame = frame or model.frame()
        omega_m = omega_m or reference_metric(model, frame)
        omega_t = model.omega_0() + omega_m * t
        c_t = normalization_constant(model, t, omega_m)
        rhs = c_t * t ** (model.n - model.m) * reference_density(model, omega_m)
        if model.mu_recipe == "Manufactured":
            rhs = np.broadcast_to(np.asarray(model.manufactured_density, dtype=float), model.grid().shape)
        if np.min(rhs) <= 0:
            raise PositivityError(f"right-hand density must be positive (min {np.min(rhs):.3e})")
        problem = cls(model, float(t), frame, omega_m, HermitianField(omega_t.grid, omega_t.values, "omega_t"),
                      np.array(rhs, dtype=float), c_t)
        if problem.periodic:
            weights = model.volume_weights()
            lhs = float(np.sum(omega_t.det() * weights))
            total = float(np.sum(problem.rhs * weights))
            if abs(lhs - total) > COMPATIBILITY_RTOL * abs(total):
                raise CompatibilityError(f"∫ω_t^n = {lhs:.12g} but ∫RHS = {total:.12g}")
        return problem


@dataclass(frozen=True, eq=False)
class MASolveResult:
    problem: MAProblem
    phi: GridField
    metric: HermitianField
    residual_history: List[float]
    iterations: int
    damping_log: List[float]
    residual: float
    shift: float
    log_rows: List[Tuple[float, int, float, float, float]] = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def t(self) -> float:
        return self.problem.t

    @property
    def model(self) -> FibrationModel:
        return self.problem.model


# --- densities and constants -----------------------------------------------------

def reference_density(model: FibrationModel, omega_m: Optional[HermitianField] = None) -> np.ndarray:
    """μ as a frame density on the grid, scaled so that ∫μ = ∫ω_M^n."""
    omega_m = omega_m or reference_metric(model)
    det_m = omega_m.det()
    if model.mu_recipe == "OmegaMPower":
        return det_m
    weights = model.volume_weights()
    if model.mu_recipe == "HolomorphicSquare":
        # |Ω|² has constant coefficient in a frame with holomorphic coframe determinant
        return np.full(det_m.shape, np.sum(det_m * weights) / np.sum(weights))
    density = np.broadcast_to(np.asarray(model.manufactured_density, dtype=float), det_m.shape)
    return density * (np.sum(det_m * weights) / np.sum(density * weights))


def normalization_constant(model: FibrationModel, t: float,
                           omega_m: Optional[HermitianField] = None) -> float:
    """c_t = ∫(ω_0 + tω_M)^n / (t^{n−m} ∫ω_M^n)."""
    omega_m = omega_m or reference_metric(model)
    weights = model.volume_weights()
    total = model.omega_0() + omega_m * t
    return float(np.sum(total.det() * weights) / (t ** (model.n - model.m) * np.sum(omega_m.det() * weights)))


def class_polynomial(model: FibrationModel, omega_m: Optional[HermitianField] = None) -> np.ndarray:
    """Coefficients p_k (ascending) of ∫det(ω_0 + tω_M) as a polynomial in t."""
    omega_m = omega_m or reference_metric(model)
    weights = model.volume_weights()
    # det(H0 + tHM) = det HM · Π(t + λ_i), λ the eigenvalues of HM⁻¹H0
    lam = np.linalg.eigvals(np.linalg.solve(omega_m.values, model.omega_0().values)).real
    coeffs = np.zeros(lam.shape[:-1] + (model.n + 1,))
    coeffs[..., 0] = 1.0
    for i in range(model.n):
        shifted = np.zeros_like(coeffs)
        shifted[..., 1:] = coeffs[..., :-1]
        coeffs = shifted + lam[..., i, None] * coeffs
    return np.sum(coeffs * (omega_m.det() * weights)[..., None], axis=tuple(range(lam.ndim - 1)))


def limit_normalization_constant(model: FibrationModel, omega_m: Optional[HermitianField] = None) -> float:
    """lim_{t→0} c_t = (n choose m) ∫ω_0^m∧ω_M^{n−m} / ∫ω_M^n, read off the t^{n−m} coefficient."""
    poly = class_polynomial(model, omega_m)
    return float(poly[model.n - model.m] / poly[model.n])


# --- Newton machinery -----------------------------------------------------------------

class _Workspace:
    """Unknown layout, residual and linearization for one problem."""

    def __init__(self, problem: MAProblem):
        self.problem = problem
        self.grid = problem.omega_t.grid
        self.inner = tuple(slice(None) if p else slice(1, -1) for p in self.grid.periodic)
        self.inner_shape = tuple(
            n if p else n - 2 for n, p in zip(self.grid.shape, self.grid.periodic)
        )
        self.weights = problem.model.volume_weights()[self.inner]
        self.log_rhs = np.log(problem.rhs)

    def full(self, unknowns: np.ndarray) -> np.ndarray:
        values = np.zeros(self.grid.shape)
        values[self.inner] = unknowns.reshape(self.inner_shape)
        return values

    def metric(self, phi: np.ndarray) -> HermitianField:
        return self.problem.omega_t + ddbar(GridField(self.grid, phi, "phi"), self.problem.frame)

    def residual(self, metric: HermitianField) -> np.ndarray:
        return (np.log(metric.det()) - self.log_rhs)[self.inner]

    def coefficients(self, metric: HermitianField) -> Tuple[np.ndarray, np.ndarray]:
        frame = self.problem.frame
        inv = metric.inv()
        th = frame.theta
        a = np.real(np.einsum("...ba,...ak,...bl->...kl", inv, th, np.conj(th)))
        if frame.is_constant():
            b = np.zeros(a.shape[:-1])
        else:
            b = np.real(np.einsum("...ba,...abl->...l", inv, frame.connection))
        return a, np.broadcast_to(b, a.shape[:-1])

    def apply(self, a: np.ndarray, b: np.ndarray, unknowns: np.ndarray) -> np.ndarray:
        v = self.full(unknowns)
        d = self.grid.ndim
        first = [derivative(v, self.grid, k) for k in range(d)]
        out = np.zeros(self.grid.shape)
        for k in range(d):
            out += a[..., k, k] * derivative(v, self.grid, k, order=2)
            out += b[..., k] * first[k]
            for l in range(k + 1, d):
                out += (a[..., k, l] + a[..., l, k]) * derivative(first[l], self.grid, k)
        return out[self.inner].ravel()

    def preconditioner(self, a: np.ndarray) -> LinearOperator:
        """Inverse of the constant-coefficient symbol Σ_k mean(a_kk) λ_k (FFT and DST-I)."""
        d = self.grid.ndim
        symbol = np.zeros(self.inner_shape)
        for k in range(d):
            n = self.grid.shape[k]
            h = self.grid.spacing(k)
            if self.grid.periodic[k]:
                wave = 2.0 * np.pi * fft.fftfreq(n, d=h)
                if n % 2 == 0:
                    wave[n // 2] = 0.0
                lam = -wave ** 2
            else:
                j = np.arange(1, n - 1)
                lam = -(2.0 - 2.0 * np.cos(np.pi * j / (n - 1))) / h ** 2
            shape = [1] * d
            shape[k] = -1
            symbol = symbol + float(np.mean(a[..., k, k])) * lam.reshape(shape)
        inverse = np.zeros_like(symbol)
        nonzero = np.abs(symbol) > 0
        inverse[nonzero] = 1.0 / symbol[nonzero]
        dirichlet = tuple(k for k in range(d) if not self.grid.periodic[k])
        periodic = tuple(k for k in range(d) if self.grid.periodic[k])

        def solve(r: np.ndarray) -> np.ndarray:
            x = np.real(np.asarray(r)).reshape(self.inner_shape)
            if dirichlet:
                x = fft.dstn(x, type=1, axes=dirichlet)
            if periodic:
                x = fft.fftn(x, axes=periodic)
            x = x * inverse
            if periodic:
                x = np.real(fft.ifftn(x, axes=periodic))
            if dirichlet:
                x = fft.idstn(x, type=1, axes=dirichlet)
            return x.ravel()

        size = int(np.prod(self.inner_shape))
        return LinearOperator((size, size), matvec=solve, dtype=float)

    def weighted_mean(self, values: np.ndarray, density: np.ndarray) -> float:
        w = (self.weights * density).ravel()
        return float(np.sum(w * values) / np.sum(w))


def solve(problem: MAProblem, init: Optional[GridField] = None,
          settings: Optional[SolverSettings] = None) -> MASolveResult:
    """Solve one member of the family to L∞ residual ≤ settings.tol."""
    settings = settings or SolverSettings()
    if settings.tol < 1e-12:
        raise PreconditionError(f"tol must be >= 1e-12, got {settings.tol}")
    started = time.perf_counter()
    work = _Workspace(problem)
    grid = work.grid
    phi = np.zeros(grid.shape) if init is None else np.array(init.values, dtype=float)
    if problem.periodic:
        phi = phi - np.mean(phi)
    else:
        phi = work.full(phi[work.inner])

    metric = work.metric(phi)
    min_eig = metric.min_eig()
    if min_eig <= settings.positivity_floor:
        raise PositivityLossError(f"initial metric not positive (min eig {min_eig:.3e})")
    residual = work.residual(metric)
    res_norm = float(np.max(np.abs(residual)))
    history = [res_norm]
    damping_log: List[float] = []
    rows = [(problem.t, 0, res_norm, 1.0, min_eig)]

    def partial() -> MASolveResult:
        return _finish(problem, phi, metric, history, damping_log, rows, started, shift=0.0)

    iteration = 0
    while res_norm > settings.tol:
        if iteration >= settings.max_iter:
            raise NonConvergence(f"t={problem.t}: residual {res_norm:.3e} after {iteration} Newton steps",
                                 partial=partial())
        iteration += 1
        a, b = work.coefficients(metric)
        size = residual.size
        operator = LinearOperator((size, size), matvec=lambda v, a=a, b=b: work.apply(a, b, v), dtype=float)
        rhs = -residual.ravel()
        if problem.periodic:
            rhs = rhs - work.weighted_mean(rhs, metric.det()[work.inner])
        step_dir, info = gmres(operator, rhs, rtol=settings.linear_rtol, atol=0.0,
                               restart=settings.restart, maxiter=20, M=work.preconditioner(a))
        if info:
            logger.debug("t=%s iter %d: GMRES stopped early (info %d)", problem.t, iteration, info)
        delta = work.full(step_dir)
        if problem.periodic:
            delta = delta - np.mean(delta)

        step = 1.0
        positive = False
        while True:
            trial = phi + step * delta
            trial_metric = work.metric(trial)
            trial_min = trial_metric.min_eig()
            positive = trial_min > settings.positivity_floor
            if positive:
                trial_residual = work.residual(trial_metric)
                trial_norm = float(np.max(np.abs(trial_residual)))
                if trial_norm < res_norm:
                    break
            step *= settings.damping
            if step < settings.min_step:
                failure = PositivityLossError if not positive else NonConvergence
                raise failure(f"t={problem.t}: backtracking stalled at iteration {iteration} "
                              f"(residual {res_norm:.3e}, min eig {trial_min:.3e})", partial=partial())
        if step < 1.0:
            logger.warning("t=%s iter %d: damped step %.3g", problem.t, iteration, step)
        phi, metric, residual, res_norm, min_eig = trial, trial_metric, trial_residual, trial_norm, trial_min
        history.append(res_norm)
        damping_log.append(step)
        rows.append((problem.t, iteration, res_norm, step, min_eig))
        logger.debug("t=%s iter %d: residual %.3e step %.3g min eig %.3e",
                     problem.t, iteration, res_norm, step, min_eig)

    shift = 0.0
    if problem.periodic:
        shift = -float(np.max(phi))
        phi = phi + shift
    result = _finish(problem, phi, metric, history, damping_log, rows, started, shift)
    logger.info("t=%s: converged in %d Newton steps, residual %.3e", problem.t, result.iterations, res_norm)
    return result


def _finish(problem, phi, metric, history, damping_log, rows, started, shift) -> MASolveResult:
    return MASolveResult(
        problem=problem,
        phi=GridField(problem.omega_t.grid, phi, name=f"phi_t={problem.t:g}"),
        metric=HermitianField(metric.grid, metric.values, name="omega_tilde"),
        residual_history=list(history),
        iterations=len(history) - 1,
        damping_log=list(damping_log),
        residual=history[-1],
        shift=shift,
        log_rows=list(rows),
        elapsed=time.perf_counter() - started,
    )


def continuation(model: FibrationModel, t_schedule: Sequence[float],
                 settings: Optional[SolverSettings] = None) -> List[MASolveResult]:
    """
    Solve along a strictly decreasing schedule, warm-starting from the previous φ.

    A failing solve ends the schedule early: the finished results are returned and a
    warning logged. When the first t already fails its error propagates.
    """
    schedule = [float(t) for t in t_schedule]
    if any(t <= 0 for t in schedule) or any(b >= a for a, b in zip(schedule, schedule[1:])):
        raise PreconditionError(f"t_schedule must be positive and strictly decreasing, got {schedule}")
    frame = model.frame() if schedule else None
    omega_m = reference_metric(model, frame) if schedule else None
    results: List[MASolveResult] = []
    previous: Optional[GridField] = None
    for t in schedule:
        problem = MAProblem.build(model, t, frame=frame, omega_m=omega_m)
        try:
            result = solve(problem, init=previous, settings=settings)
        except (NonConvergence, PositivityLossError) as e:
            if not results:
                raise
            logger.warning("continuation stopped at t=%s, returning %d of %d results: %s",
                           t, len(results), len(schedule), e)
            break
        results.append(result)
        previous = result.phi
    return results


def manufactured_model(model: FibrationModel, t: float, phi_star: GridField,
                       frame: Optional[ComplexFrame] = None) -> FibrationModel:
    """Model whose right-hand side is det(ω_t + √−1∂∂̄φ*), so φ* solves the equation."""
    frame = frame or model.frame()
    omega_t = model.omega_0() + reference_metric(model, frame) * t
    target = omega_t + ddbar(phi_star, frame)
    if target.min_eig() <= 0:
        raise PositivityError("manufactured potential does not give a Kähler metric")
    return model.with_density(target.det())


def determinant_consistency(result: MASolveResult) -> float:
    """max |det(ω̃/ω_t)^{1/n} − geometric mean of generalized eigenvalues|."""
    n = result.model.n
    ratio = (result.metric.det() / result.problem.omega_t.det()) ** (1.0 / n)
    eig = generalized_eigenvalues(result.metric, result.problem.omega_t)
    geo = np.exp(np.mean(np.log(eig), axis=-1))
    return float(np.max(np.abs(ratio - geo)))
