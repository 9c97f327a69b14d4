"""
The verify suite: property and invariant checks across every module.
"""
import logging
from pathlib import Path
from typing import List, Sequence

import numpy as np

from core.collapse import Check, run_diagnostics, schedule_check, sweep_checks
from core.config import ScenarioConfig
from core.fields import Grid, GridField, HermitianField, ddbar, ricci_form, riemann_sectional
from core.io import write_csv
from core.ma_solver import (
    MAProblem,
    SolverSettings,
    continuation,
    determinant_consistency,
    limit_normalization_constant,
    manufactured_model,
    normalization_constant,
    solve,
)
from core.model import FibrationModel, family_a, holomorphy_residual
from core.semiflat import extract_translation, fiber_oscillation, planted_translation_data

logger = logging.getLogger(__name__)

MANUFACTURED_TOL = 1e-7
MIRROR_TOL = 1e-9
SAMPLE_TOL = 1e-10
PLANTED_SECTION = (0.1 + 0.05j,)
GH_SUITE = ("distortion_decreasing", "distortion_near_stencil_floor", "fiber_diameter_matches_flat_torus",
            "volume_ratio_matches_prediction", "lower_sandwich", "projection_distortion_decreasing")


def manufactured_potential(model: FibrationModel, t: float) -> GridField:
    """Smooth test potential vanishing on Dirichlet walls, small enough to keep ω_t + √−1∂∂̄φ* positive."""
    grid = model.grid()
    mesh = grid.mesh()
    m, r = model.m, model.r
    fiber = np.ones(grid.shape)
    for j in range(r):
        fiber = fiber + 0.5 * np.cos(2 * np.pi * mesh[2 * m + j]) * np.cos(2 * np.pi * mesh[2 * m + r + j])
    base = np.ones(grid.shape)
    for k in range(2 * m):
        if model.chart.periodic:
            base = base * (1.0 + 0.25 * np.sin(2 * np.pi * mesh[k]))
        else:
            base = base * (1.0 - mesh[k] ** 2)
    return GridField(grid, 0.01 * t * base * fiber, name="phi_star")


def model_checks(model: FibrationModel) -> List[Check]:
    points = model.base_points().reshape(-1, model.m)
    residual = holomorphy_residual(model.period_map, points)
    return [Check("period_map_holomorphic", residual <= 1e-8, f"CR residual {residual:.3e}")]


def solver_checks(model: FibrationModel, t: float, settings: SolverSettings) -> List[Check]:
    phi_star = manufactured_potential(model, t)
    frame = model.frame()
    problem = MAProblem.build(manufactured_model(model, t, phi_star, frame), t, frame=frame)
    result = solve(problem, settings=settings)
    want = phi_star.values
    got = result.phi.values
    if problem.periodic:
        want, got = want - np.max(want), got - np.max(got)
    error = float(np.max(np.abs(got - want)))
    consistency = determinant_consistency(result)
    return [
        Check("manufactured_solution_recovered", error <= MANUFACTURED_TOL, f"max error {error:.3e}"),
        Check("newton_converged", result.residual <= settings.tol,
              f"residual {result.residual:.3e} after {result.iterations} steps"),
        Check("determinant_consistent", consistency <= 1e-8, f"max defect {consistency:.3e}"),
    ]


def normalization_checks(model: FibrationModel, t: float) -> List[Check]:
    flat = family_a(model.base_shape, model.fiber_shape)
    c_flat = normalization_constant(flat, t)
    c_small = normalization_constant(model, 1e-6)
    c_limit = limit_normalization_constant(model)
    return [
        Check("flat_constant_is_one_plus_t", abs(c_flat - (1.0 + t)) <= 1e-12, f"c_t {c_flat!r} at t={t}"),
        Check("constant_tends_to_limit", abs(c_small - c_limit) <= 1e-4 * abs(c_limit),
              f"c_(1e-6) {c_small:.8g} vs c_0 {c_limit:.8g}"),
    ]


def flat_solution_checks(model: FibrationModel, t: float, settings: SolverSettings) -> List[Check]:
    flat = family_a(model.base_shape, model.fiber_shape)
    phi = solve(MAProblem.build(flat, t), settings=settings).phi.values
    size = float(np.max(np.abs(phi)))
    return [Check("flat_potential_vanishes", size <= 1e-12, f"max |φ| {size:.3e}")]


def calculus_checks() -> List[Check]:
    periodic = Grid((16, 16), (True, True), (1.0, 1.0), (0.0, 0.0), ("base", "base"))
    u, _ = periodic.mesh()
    wave = ddbar(GridField(periodic, np.cos(2 * np.pi * u), "wave")).values[..., 0, 0]
    wave_error = float(np.max(np.abs(wave + np.pi ** 2 * np.cos(2 * np.pi * u))))

    box = Grid((21, 21), (False, False), (2.0, 2.0), (-1.0, -1.0), ("base", "base"))
    x, y = box.mesh()
    square = ddbar(GridField(box, x ** 2 + y ** 2, "r2")).values[..., 0, 0]
    square_error = float(np.max(np.abs(square - 1.0)))

    flat = HermitianField.constant(box, 2.0 * np.eye(1), "flat")
    ricci = float(np.max(np.abs(ricci_form(flat).values)))
    curvature = abs(riemann_sectional(flat, (10, 10), (np.array([1.0, 0.0]), np.array([0.0, 1.0]))))
    return [
        Check("ddbar_spectral_mode", wave_error <= 1e-9, f"max error {wave_error:.3e}"),
        Check("ddbar_square_norm", square_error <= 1e-9, f"max error {square_error:.3e}"),
        Check("flat_metric_ricci_free", ricci <= 1e-12, f"max |Ric| {ricci:.3e}"),
        Check("flat_metric_curvature_free", curvature <= 1e-10, f"|K| {curvature:.3e}"),
    ]


def semiflat_checks(model: FibrationModel) -> List[Check]:
    if not model.chart.periodic:
        return []
    grid = model.grid()
    mesh = grid.mesh()
    psi = GridField(grid, 0.01 * np.cos(2 * np.pi * mesh[0]) * np.cos(2 * np.pi * mesh[-1]), name="psi")
    omega, zeta = planted_translation_data(model, PLANTED_SECTION, psi)
    section, xi = extract_translation(model, omega, zeta)
    error = float(np.max(np.abs(section.sigma - np.asarray(PLANTED_SECTION))))
    shift = xi.values - psi.values
    xi_error = float(np.max(np.abs(shift - np.mean(shift))))

    # a base-only ψ keeps ω fiberwise flat, so ξ must not vary along fibers
    base_psi = GridField(grid, 0.01 * np.cos(2 * np.pi * mesh[0]), name="psi_base")
    omega, zeta = planted_translation_data(model, PLANTED_SECTION, base_psi)
    _, base_xi = extract_translation(model, omega, zeta)
    spread = float(np.max(fiber_oscillation(base_xi.values, model)))
    return [
        Check("planted_section_recovered", error <= 1e-8, f"max error {error:.3e}"),
        Check("section_holomorphic", section.cr_residual <= 1e-6, f"CR residual {section.cr_residual:.3e}"),
        Check("planted_potential_recovered", xi_error <= 1e-6, f"max error up to a constant {xi_error:.3e}"),
        Check("semiflat_xi_fiber_constant", spread <= 1e-8, f"max fiber oscillation {spread:.3e}"),
    ]


def mirror_checks(config: ScenarioConfig, seed: int) -> List[Check]:
    from cli.runner import mirror_tables

    tables = mirror_tables(config, seed)
    values = dict(tables["checks"])
    expected = len(config.get("mirror.sampling_ranks")) * config.get("mirror.samples")
    checks = [
        Check("period_isotropic", values["q_period"] <= MIRROR_TOL, f"|q(m(α))| {values['q_period']:.3e}"),
        Check("period_positive", values["q_period_conj"] > 0, f"q(m(α), conj) {values['q_period_conj']:.4g}"),
        Check("period_normalized", abs(values["q_E_period"] - 1.0) <= MIRROR_TOL, f"q(E, m(α)) {values['q_E_period']}"),
        Check("mirror_round_trip", values["round_trip"] <= MIRROR_TOL, f"error {values['round_trip']:.3e}"),
        Check("random_samples_drawn", values["random_samples"] == expected > 0,
              f"{values['random_samples']} of {expected}"),
        Check("random_periods_isotropic", values["random_q_period_max"] <= SAMPLE_TOL,
              f"max {values['random_q_period_max']:.3e}"),
        Check("random_round_trip", values["random_round_trip_max"] <= MIRROR_TOL,
              f"max {values['random_round_trip_max']:.3e}"),
        Check("random_norm_identity", values["random_norm_identity_max"] <= SAMPLE_TOL,
              f"max {values['random_norm_identity_max']:.3e}"),
        Check("exact_identities_hold", values["exact_samples"] > 0 and values["exact_identity_failures"] == 0,
              f"{values['exact_identity_failures']} failures in {values['exact_samples']} rational samples"),
    ]
    defect = max((row[-1] for row in tables["path"]), default=0.0)
    checks.append(Check("lcs_path_affine", defect <= MIRROR_TOL, f"max defect {defect:.3e}"))
    return checks


def run_suite(config: ScenarioConfig, seed: int) -> List[Check]:
    from cli.runner import gh_experiment
    from core.model import model_from_config

    settings = SolverSettings.from_config(config.get("solver"))
    model = model_from_config(config.get("model"))
    fraction = config.get("diagnostics.interior_fraction")
    t = config.get("t")

    checks = model_checks(model)
    checks += calculus_checks()
    checks += normalization_checks(model, t)
    checks += flat_solution_checks(model, t, settings)
    checks += solver_checks(model, t, settings)
    checks += semiflat_checks(model)
    schedule = config.get("t_schedule")
    results = continuation(model, schedule, settings)
    checks.append(schedule_check(results, schedule))
    if results:
        report = run_diagnostics(results, fraction, config.get("diagnostics.n_planes"), seed)
        checks += sweep_checks(report)
        checks += [c for c in gh_experiment(config, results)["checks"] if c.name in GH_SUITE]
    checks += mirror_checks(config, seed)
    for check in checks:
        logger.info("%-36s %s", check.name, "ok" if check.passed else f"FAILED ({check.detail})")
    return checks


def write_summary(out_dir: Path, checks: Sequence[Check]) -> Path:
    passed = sum(1 for c in checks if c.passed)
    return write_csv(Path(out_dir) / "verify_summary.csv",
                     f"{passed} of {len(checks)} checks passed; passed is 1 or 0",
                     ("name", "passed", "detail"), [tuple(c) for c in checks])
