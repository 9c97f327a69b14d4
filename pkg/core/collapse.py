"""
Collapse diagnostics on solver output.

The rescaling λ_t(y, z) = (y, z/√t) keeps the sample points and stretches the
fiber axes by √t; in the adapted frame it acts on coefficient matrices by
S H S with S = diag(1_m, t^{−1/2}·1_r). The section σ is the zero section.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from core.errors import DomainError, PreconditionError
from core.fields import (
    ComplexFrame,
    CurvatureEvaluator,
    GridField,
    HermitianField,
    ddbar,
    derivative,
    eigen_envelope,
    generalized_eigenvalues,
    ricci_form,
)
from core.io import write_csv
from core.ma_solver import MASolveResult
from core.model import FibrationModel
from core.semiflat import wobble_potential

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ("t", "C_c2", "flat_defect", "curv_sup", "osc_over_t", "grad_over_t2", "ricci_wp_residual")
EXTRA_COLUMNS = ("t", "epsilon", "lower_epsilon", "convergence_defect", "rescaled_identity_defect",
                 "rescaled_residual", "newton_iterations", "solve_residual")
NOISE_FLOOR = 1e-8


class Check(NamedTuple):
    name: str
    passed: bool
    detail: str


# --- dilation ---------------------------------------------------------------------

def _scaling(n: int, m: int, t: float) -> np.ndarray:
    s = np.ones(n)
    s[m:] = 1.0 / math.sqrt(t)
    return s


def dilate_pullback(fn: Callable, t: float, kind: str = "scalar", m: int = 1) -> Callable:
    """
    Pullback of a function or (1,1)-form of (y, z) under λ_t.

    Forms are callables returning chart coefficient matrices with the m base
    legs first; each dz leg picks up a factor t^{−1/2}.
    """
    if t <= 0:
        raise PreconditionError(f"dilation needs t > 0, got {t}")
    root = math.sqrt(t)
    if kind == "scalar":
        return lambda y, z: fn(y, np.asarray(z) / root)
    if kind != "form":
        raise PreconditionError(f"unknown pullback kind {kind!r}")

    def pulled(y, z):
        h = np.asarray(fn(y, np.asarray(z) / root), dtype=complex)
        s = _scaling(h.shape[-1], m, t)
        return h * s[:, None] * s[None, :]

    return pulled


@dataclass(frozen=True, eq=False)
class RescaledView:
    """λ_t*ω̃_t on the stretched grid with the potential u_t of p*(ω_0+ω_SF) + √−1∂∂̄u_t."""

    t: float
    metric: HermitianField
    reference: HermitianField
    u: GridField
    frame: ComplexFrame
    identity_defect: float
    residual: float


def _base_potential(model: FibrationModel) -> np.ndarray:
    """yᵀ ω′ ȳ on the grid, a potential of the base form ω′ on a simply connected chart."""
    mesh = model.grid().mesh()
    y = np.stack([mesh[2 * k] + 1j * mesh[2 * k + 1] for k in range(model.m)], axis=-1)
    return np.real(np.einsum("...k,kl,...l->...", y, model.base_prime, np.conj(y)))


def rescaled_view(result: MASolveResult) -> RescaledView:
    """
    Rescaled metric, potential and identity defect.

    u_t = φ_t + t·χ + t·yᵀω′ȳ. On periodic charts the base term has no global
    potential and stays in the reference form as t·ω′.
    """
    model = result.model
    problem = result.problem
    t = problem.t
    m, n, r = model.m, model.n, model.r
    grid = result.metric.grid
    stretched = grid.scaled((1.0,) * (2 * m) + (math.sqrt(t),) * (2 * r))
    s = _scaling(n, m, t)
    metric = HermitianField(stretched, result.metric.values * s[:, None] * s[None, :], name="rescaled")
    frame = ComplexFrame(stretched, problem.frame.theta, problem.frame.dtheta)

    ref = np.zeros(grid.shape + (n, n), dtype=complex)
    ref[..., :m, :m] = model.base_form
    ref[..., m:, m:] = model.fiber_metric()
    u = np.array(result.phi.values)
    if model.omega_m_recipe == "SemiFlatPlusBase" and model.fiber_wobble:
        u = u + t * wobble_potential(model).values
    if model.chart.periodic:
        ref[..., :m, :m] += t * model.base_prime
    else:
        u = u + t * _base_potential(model)
    reference = HermitianField(stretched, ref, name="omega_0+omega_SF")
    potential = GridField(stretched, u, name="u_t")
    rebuilt = reference + ddbar(potential, frame)
    defect = float(np.max(np.abs(metric.values - rebuilt.values)))

    inner = grid.interior_mask(1)
    target = np.log(problem.rhs) - r * math.log(t)
    residual = float(np.max(np.abs(np.log(metric.det()) - target)[inner]))
    return RescaledView(t, metric, reference, potential, frame, defect, residual)


# --- per-fiber quantities ----------------------------------------------------------------

def _base_index(model: FibrationModel, y, fraction: float) -> Tuple[int, ...]:
    y = tuple(int(i) for i in y)
    mask = model.base_grid().trusted_mask(fraction)
    if len(y) != mask.ndim or any(i < 0 or i >= s for i, s in zip(y, mask.shape)) or not mask[y]:
        raise DomainError(f"base index {y} is outside the trusted interior")
    return y


def _flatness_field(result: MASolveResult) -> np.ndarray:
    model = result.model
    block = result.metric.values[..., model.m:, model.m:] / result.t
    diff = block - model.fiber_metric()
    norms = np.linalg.norm(diff, ord=2, axis=(-2, -1))
    return np.max(norms, axis=tuple(range(2 * model.m, 2 * model.n)))


def fiber_flatness_defect(result: MASolveResult, y, fraction: float = 0.5) -> float:
    """sup over the fiber at y of ‖(fiber block of ω̃_t)/t − g(y)‖₂."""
    index = _base_index(result.model, y, fraction)
    return float(_flatness_field(result)[index])


def oscillation(phi: GridField, y) -> float:
    """max − min of φ over the fiber at base index y."""
    values = phi.values[tuple(int(i) for i in y)]
    return float(np.max(values) - np.min(values))


def _oscillation_field(phi: GridField, model: FibrationModel) -> np.ndarray:
    axes = tuple(range(2 * model.m, 2 * model.n))
    return np.max(phi.values, axis=axes) - np.min(phi.values, axis=axes)


def _fiber_real(metric: HermitianField, frame: ComplexFrame, model: FibrationModel) -> np.ndarray:
    g = frame.real_metric(metric)
    fiber = list(range(2 * model.m, 2 * model.n))
    return np.broadcast_to(g[..., fiber, :][..., fiber], metric.grid.shape + (2 * model.r, 2 * model.r))


def _gradient_field(result: MASolveResult) -> np.ndarray:
    model = result.model
    grid = result.metric.grid
    frame = result.problem.frame
    block = _fiber_real(result.metric, frame, model)
    reference_inv = np.linalg.inv(_fiber_real(result.problem.omega_m, frame, model))
    fiber_axes = grid.axes("fiber")
    d_block = np.stack([derivative(block, grid, k) for k in fiber_axes], axis=-3)
    norm = np.einsum("...ka,...ib,...jc,...kij,...abc->...",
                     reference_inv, reference_inv, reference_inv, d_block, d_block)
    return np.max(norm, axis=tuple(range(2 * model.m, 2 * model.n)))


def fiber_gradient_norm(result: MASolveResult, y, fraction: float = 0.5) -> float:
    """sup over the fiber at y of |∂(ω̃_t|fiber)|² measured with ω_M."""
    index = _base_index(result.model, y, fraction)
    return float(_gradient_field(result)[index])


def curvature_sup(result: MASolveResult, region: np.ndarray, n_planes: int = 8, seed: int = 0) -> float:
    """max |sectional curvature| over the points of `region` and n_planes seeded random planes per point."""
    if n_planes < 1:
        raise PreconditionError("n_planes must be >= 1")
    evaluator = CurvatureEvaluator(result.metric, result.problem.frame)
    rng = np.random.default_rng(seed)
    d = result.metric.grid.ndim
    worst = 0.0
    for index in zip(*np.nonzero(region)):
        riemann = evaluator.riemann(index)
        for _ in range(n_planes):
            x, y = rng.standard_normal((2, d))
            worst = max(worst, abs(evaluator.sectional(index, x, y, riemann=riemann)))
    return worst


# --- limit metric ------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LimitMetric:
    omega: HermitianField
    omega_wp: HermitianField
    residual: float
    baseline: float
    order: float
    ts: Tuple[float, ...]


def candidate_base_metric(result: MASolveResult) -> HermitianField:
    """ω_0 + √−1∂∂̄(fiber average of φ_t) on the base grid."""
    model = result.model
    base = model.base_grid()
    psi = np.mean(result.phi.values, axis=tuple(range(2 * model.m, 2 * model.n)))
    omega_0 = HermitianField.constant(base, model.base_form)
    return omega_0 + ddbar(GridField(base, psi, "psi"), ComplexFrame.flat(base))


def weil_petersson(model: FibrationModel) -> HermitianField:
    """ω_WP = −√−1∂∂̄ log det Im Z on the base grid."""
    base = model.base_grid()
    z, _ = model.period_samples()
    log_det = GridField(base, np.log(np.linalg.det(z.imag)), "logdetImZ")
    wp = ddbar(log_det, ComplexFrame.flat(base))
    return HermitianField(base, -wp.values, name="omega_WP")


def ricci_wp_residual(omega: HermitianField, model: FibrationModel, fraction: float = 0.5) -> float:
    base = model.base_grid()
    mask = base.trusted_mask(fraction)
    ric = ricci_form(omega, ComplexFrame.flat(base))
    return float(np.max(np.abs(ric.values - weil_petersson(model).values)[mask]))


def limit_base_metric(results: Sequence[MASolveResult], fraction: float = 0.5) -> LimitMetric:
    """
    Extrapolate the base metrics of the last three schedule points to t = 0.

    Assumes first-order convergence in t (quadratic Lagrange extrapolation);
    the observed order is estimated from the same three points and logged.
    """
    if len(results) < 3:
        raise PreconditionError(f"limit extrapolation needs 3 schedule points, got {len(results)}")
    model = results[0].model
    base = model.base_grid()
    last = list(results[-3:])
    ts = [r.t for r in last]
    metrics = [candidate_base_metric(r) for r in last]
    values = np.zeros_like(metrics[0].values)
    for i, (ti, h) in enumerate(zip(ts, metrics)):
        weight = 1.0
        for j, tj in enumerate(ts):
            if j != i:
                weight *= (0.0 - tj) / (ti - tj)
        values = values + weight * h.values
    omega = HermitianField.symmetrized(base, values, name="omega_limit")

    mask = base.trusted_mask(fraction)
    d1 = np.max(np.abs(metrics[0].values - metrics[1].values)[mask])
    d2 = np.max(np.abs(metrics[1].values - metrics[2].values)[mask])
    order = math.log(d1 / d2) / math.log(ts[0] / ts[1]) if d1 > 0 and d2 > 0 else float("nan")
    logger.info("limit metric: observed convergence order %.3f over t=%s", order, ts)

    omega_wp = weil_petersson(model)
    baseline = float(np.max(np.abs(ricci_form(HermitianField.constant(base, model.base_form),
                                              ComplexFrame.flat(base)).values)))
    residual = ricci_wp_residual(omega, model, fraction)
    return LimitMetric(omega, omega_wp, residual, baseline, order, tuple(ts))


# --- comparison with the limit ---------------------------------------------------------------

def _pullback(model: FibrationModel, omega: HermitianField) -> np.ndarray:
    out = np.zeros(model.grid().shape + (model.n, model.n), dtype=complex)
    out[..., : model.m, : model.m] = model._expand(np.asarray(omega.values), 2)
    return out


@dataclass(frozen=True)
class SandwichBounds:
    epsilon: float
    lower_epsilon: float


def sandwich_epsilon(result: MASolveResult, omega: HermitianField, region: np.ndarray) -> SandwichBounds:
    """
    Smallest ε with f*ω − εω_M ≤ ω̃_t ≤ f*ω + εω_M on the region, and the
    smallest δ ≥ 0 with e^{−δ} f*ω ≤ ω̃_t.
    """
    grid = result.metric.grid
    f_star = _pullback(result.model, omega)
    diff = HermitianField.symmetrized(grid, result.metric.values - f_star, "difference")
    eig = generalized_eigenvalues(diff, result.problem.omega_m)
    epsilon = float(np.max(np.abs(eig[region])))
    ratio = float(np.max(generalized_eigenvalues(HermitianField(grid, f_star, "f*omega"), result.metric)[region]))
    lower = max(0.0, math.log(ratio)) if ratio > 0 else 0.0
    return SandwichBounds(epsilon, lower)


def convergence_defect(result: MASolveResult, omega: HermitianField, region: np.ndarray) -> float:
    """‖ω̃_t − f*ω‖ (pointwise spectral norm), maximized over the region."""
    diff = result.metric.values - _pullback(result.model, omega)
    return float(np.max(np.linalg.norm(diff, ord=2, axis=(-2, -1))[region]))


# --- report -------------------------------------------------------------------------------------

@dataclass
class CollapseReport:
    rows: List[Tuple[float, ...]] = field(default_factory=list)
    extras: List[Tuple[Any, ...]] = field(default_factory=list)
    limit: Optional[LimitMetric] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def column(self, name: str) -> List[float]:
        k = REPORT_COLUMNS.index(name)
        return [row[k] for row in self.rows]

    def extra(self, name: str) -> List[Any]:
        k = EXTRA_COLUMNS.index(name)
        return [row[k] for row in self.extras]

    def write(self, out_dir, stem: str = "collapse_report"):
        comment = ("one row per t; C_c2 = max(λmax, 1/λmin) of ω̃_t against ω_0+tω_M on K; "
                   "flat_defect, osc_over_t, grad_over_t2 are sups over the trusted base; "
                   "norms are pointwise spectral norms; ricci_wp_residual uses the per-t base candidate")
        main = write_csv(out_dir / f"{stem}.csv", comment, REPORT_COLUMNS, self.rows)
        extra_comment = "extras per t; epsilon against ω_M, lower_epsilon is the log-ratio bound against f*ω"
        extra = write_csv(out_dir / f"{stem}_extras.csv", extra_comment, EXTRA_COLUMNS, self.extras)
        return [main, extra]


def run_diagnostics(results: Sequence[MASolveResult], fraction: float = 0.5, n_planes: int = 8,
                    seed: int = 0) -> CollapseReport:
    """Measure every collapse estimate along a solved schedule."""
    report = CollapseReport()
    if not results:
        return report
    model = results[0].model
    grid = model.grid()
    region = grid.trusted_mask(fraction)
    base_mask = model.base_grid().trusted_mask(fraction)
    limit = limit_base_metric(results, fraction) if len(results) >= 3 else None
    report.limit = limit
    report.metadata = {
        "grid": list(grid.shape),
        "interior_fraction": fraction,
        "region_points": int(np.count_nonzero(region)),
        "n_planes": n_planes,
        "seed": seed,
    }

    for result in results:
        t = result.t
        lo, hi = eigen_envelope(result.metric, result.problem.omega_t, region)
        c_c2 = max(hi, 1.0 / lo)
        flat = float(np.max(_flatness_field(result)[base_mask]))
        curv = curvature_sup(result, region, n_planes, seed)
        osc = float(np.max(_oscillation_field(result.phi, model)[base_mask])) / t
        grad = float(np.max(_gradient_field(result)[base_mask])) / t ** 2
        ric = ricci_wp_residual(candidate_base_metric(result), model, fraction)
        report.rows.append((t, c_c2, flat, curv, osc, grad, ric))

        view = rescaled_view(result)
        if limit is not None:
            bounds = sandwich_epsilon(result, limit.omega, region)
            conv = convergence_defect(result, limit.omega, region)
        else:
            bounds, conv = SandwichBounds(float("nan"), float("nan")), float("nan")
        report.extras.append((t, bounds.epsilon, bounds.lower_epsilon, conv, view.identity_defect,
                              view.residual, result.iterations, result.residual))
        logger.info("t=%s: C=%.4g flat=%.3e curv=%.3e osc/t=%.3e grad/t^2=%.3e", t, c_c2, flat, curv, osc, grad)
    return report


def _decreasing(values: Sequence[float], factor: float = 1.0, floor: float = NOISE_FLOOR) -> bool:
    return all(b <= max(a / factor, floor) for a, b in zip(values, values[1:]))


def sweep_checks(report: CollapseReport) -> List[Check]:
    """Acceptance checks for a collapse sweep; ratio checks ignore values under the noise floor."""
    checks = []
    c = report.column("C_c2")
    checks.append(Check("envelope_constant_stable", max(c) <= 1.5 * min(c), f"C range [{min(c):.4g}, {max(c):.4g}]"))
    flat = report.column("flat_defect")
    checks.append(Check("flat_defect_decreasing", _decreasing(flat, 1.4), f"values {flat}"))
    curv = report.column("curv_sup")
    checks.append(Check("curvature_bounded", curv[-1] <= max(2.0 * curv[0], 1e-6), f"first {curv[0]:.4g} last {curv[-1]:.4g}"))
    osc = report.column("osc_over_t")
    osc_ok = max(osc) < NOISE_FLOOR or max(osc) <= 2.0 * min(osc)
    checks.append(Check("oscillation_linear_in_t", osc_ok, f"osc/t {osc}"))
    grad = report.column("grad_over_t2")
    grad_ok = max(grad) < NOISE_FLOOR or max(grad) <= 4.0 * min(grad)
    checks.append(Check("fiber_gradient_quadratic_in_t", grad_ok, f"grad/t^2 {grad}"))
    conv = report.extra("convergence_defect")
    checks.append(Check("smooth_convergence", _decreasing(conv), f"defects {conv}"))
    eps = report.extra("epsilon")
    checks.append(Check("sandwich_epsilon_decreasing", _decreasing(eps), f"epsilon {eps}"))
    if report.limit is not None:
        bound = max(0.05 * (float(np.max(np.abs(report.limit.omega_wp.values))) + report.limit.baseline), NOISE_FLOOR)
        checks.append(Check("ricci_equals_weil_petersson", report.limit.residual <= bound,
                            f"residual {report.limit.residual:.3e} bound {bound:.3e}"))
    return checks


def schedule_check(results: Sequence[MASolveResult], t_schedule: Sequence[float]) -> Check:
    """Passes when continuation solved every t of the schedule."""
    solved = [r.t for r in results]
    return Check("continuation_complete", len(solved) == len(t_schedule),
                 f"solved {len(solved)} of {len(t_schedule)} (t = {solved})")
