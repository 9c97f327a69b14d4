"""
Scenario runner: parses flags, loads the scenario and drives one subcommand.

Each subcommand runs as a sequence of named stages; the manifest records the
stages, the output checksums and, on failure, the stage that failed.
"""
import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy import fft

from cli.manifest import RunManifest, StageLogger
from core.collapse import (
    Check,
    candidate_base_metric,
    limit_base_metric,
    run_diagnostics,
    sandwich_epsilon,
    schedule_check,
    sweep_checks,
)
from core.config import SUBCOMMANDS, ScenarioConfig
from core.errors import AcceptanceError, CollapseLabError, PreconditionError
from core.gh_metrics import (
    ball_volume_ratio,
    calibrate_stencil,
    distortion,
    fiber_diameter,
    geodesic_distances,
    gh_checks,
    lower_sandwich,
    predicted_fiber_diameter,
    projection_correspondence,
    sample_diameter,
    section_correspondence,
    section_points,
    volume_prediction,
)
from core.hk_periods import (
    ExactBackend,
    MirrorData,
    backend_for,
    exact_identity_failures,
    in_period_domain,
    inverse_mirror,
    lattice_from_name,
    lcs_path,
    lcs_period,
    mirror_exchange,
    mirror_map,
    normalize_period,
    q,
    random_admissible_alpha,
    random_rational_alpha,
    round_trip_error,
    sampling_data,
)
from core.io import dump_field, write_csv
from core.ma_solver import MAProblem, SolverSettings, continuation, solve
from core.model import model_from_config
from resources import Scenarios

logger = logging.getLogger(__name__)


@dataclass
class RunContext:
    config: ScenarioConfig
    out_dir: Path
    manifest: RunManifest
    stages: StageLogger
    seed: int

    def stage(self, name: str, fn: Callable, *args, **kwargs):
        self.stages.begin(name)
        value = fn(*args, **kwargs)
        self.stages.end(name)
        return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="collapselab", description="Collapsing Ricci-flat metrics lab")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", type=Path, help="scenario JSON or a bundled scenario name (family_a, family_b, mirror_uu)")
    parser.add_argument("--out", help="output directory (COLLAPSELAB_OUT takes precedence)")
    parser.add_argument("--serial", action="store_true", help="single-threaded, bitwise reproducible run")
    parser.add_argument("--threads", type=int, default=None, help="FFT worker threads")
    parser.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    return parser


# --- subcommands ---------------------------------------------------------------------

def _settings(config: ScenarioConfig) -> SolverSettings:
    return SolverSettings.from_config(config.get("solver"))


def _solve_log_rows(results) -> List[tuple]:
    return [row for result in results for row in result.log_rows]


def _write_solve_log(ctx: RunContext, results) -> None:
    path = write_csv(ctx.out_dir / "solve_log.csv",
                     "one row per Newton step; residual is the L∞ norm of log det(ω̃)/RHS, step is the damping factor",
                     ("t", "iteration", "residual", "step", "min_eig"), _solve_log_rows(results))
    ctx.manifest.add(path)


def cmd_solve(ctx: RunContext) -> None:
    config = ctx.config
    model = ctx.stage("build_model", model_from_config, config.get("model"))
    problem = ctx.stage("build_problem", MAProblem.build, model, config.get("t"))
    result = ctx.stage("solve", solve, problem, settings=_settings(config))

    ctx.stages.begin("write")
    grid = result.metric.grid
    meta = {"t": result.t, "c_t": problem.c_t, "residual": result.residual,
            "iterations": result.iterations, "shift": result.shift}
    for stem, values in (("phi", result.phi.values), ("omega_tilde", result.metric.values)):
        paths = dump_field(ctx.out_dir / stem, values, grid, meta)
        ctx.manifest.add_dump(*paths)
        ctx.manifest.add(*paths)
    _write_solve_log(ctx, [result])
    ctx.stages.end("write")


def cmd_collapse_sweep(ctx: RunContext) -> None:
    config = ctx.config
    model = ctx.stage("build_model", model_from_config, config.get("model"))
    results = ctx.stage("continuation", continuation, model, config.get("t_schedule"), _settings(config))
    report = ctx.stage("diagnostics", run_diagnostics, results, config.get("diagnostics.interior_fraction"),
                       config.get("diagnostics.n_planes"), ctx.seed)

    ctx.stages.begin("write")
    ctx.manifest.add(*report.write(ctx.out_dir))
    _write_solve_log(ctx, results)
    checks = [schedule_check(results, config.get("t_schedule"))] + sweep_checks(report)
    _write_checks(ctx, "collapse_checks.csv", checks)
    ctx.stages.end("write")


def gh_experiment(config: ScenarioConfig, results) -> Dict[str, object]:
    """Distortion, fiber diameter, volume ratio and lower sandwich along the schedule."""
    if not results:
        raise PreconditionError("the gh experiment needs a non-empty t_schedule")
    gh = config.get("gh")
    fraction = config.get("diagnostics.interior_fraction")
    order = gh["stencil_order"]
    model = results[0].model
    if len(results) >= 3:
        omega = limit_base_metric(results, fraction).omega
    else:
        omega = candidate_base_metric(results[-1])
    points = section_points(model, gh["n_section_points"], fraction)
    dy = geodesic_distances(omega, points, order)
    calibration = calibrate_stencil(order)
    base_diameter = dy.diameter()
    center = model.base_grid().center_index("base")
    p = center + (0,) * (2 * model.r)
    # reference ball r̄ is a fraction of the base half-width; test radii are fractions of r̄
    r_bar = gh["radius_fraction"] * 0.5 * min(model.base_grid().lengths)
    radii = [f * r_bar for f in sorted(gh["volume_radii"])]
    fibers = projection_correspondence(model, points, fraction=fraction)

    rows, volume_rows = [], []
    distortions, projected, sandwich, volume_errors = [], [], [], []
    diameter_error = 0.0
    for result in results:
        corr = section_correspondence(model, result.t, points, fraction)
        dx = geodesic_distances(result.metric, corr.x_points, order, frame=result.problem.frame)
        dist = distortion(corr, dx, dy)
        dx_fibers = geodesic_distances(result.metric, fibers.x_points, order, frame=result.problem.frame)
        proj = distortion(fibers, dx_fibers, dy)
        region = result.metric.grid.trusted_mask(fraction)
        bounds = sandwich_epsilon(result, omega, region)
        ratio, holds = lower_sandwich(corr, dx, dy, bounds.lower_epsilon, slack=calibration)
        measured = fiber_diameter(result, center, order, fraction)
        predicted = predicted_fiber_diameter(result, center)
        diameter_error = abs(measured - predicted) / predicted
        lower_x, upper_x = sample_diameter(dx_fibers, calibration)
        distortions.append(dist)
        projected.append(proj)
        sandwich.append(holds)
        rows.append((result.t, dist, 0.5 * dist, proj, ratio, holds, measured, predicted,
                     lower_x, upper_x, base_diameter, calibration))
        for r in radii:
            got = ball_volume_ratio(result, p, r, p, r_bar, order, fraction)
            want = volume_prediction(result, omega, p, r, p, r_bar, order)
            error = abs(got - want) / abs(want)
            volume_rows.append((result.t, r, r_bar, got, want, error))
            if result is results[-1]:
                volume_errors.append(error)
        logger.info("t=%s: distortion %.4g (with fibers %.4g), fiber diameter %.4g (flat %.4g)",
                    result.t, dist, proj, measured, predicted)

    checks = gh_checks(distortions, calibration, diameter_error, volume_errors, sandwich, base_diameter)
    checks.append(Check("projection_distortion_decreasing", all(b < a for a, b in zip(projected, projected[1:])),
                        f"distortions {projected}"))
    return {"rows": rows, "volume_rows": volume_rows, "checks": checks, "calibration": calibration}


GH_COLUMNS = ("t", "distortion", "gh_upper_bound", "projection_distortion", "lower_ratio", "lower_holds",
              "fiber_diameter", "flat_fiber_diameter", "diameter_x_lower", "diameter_x_upper", "diameter_y",
              "stencil_calibration")
VOLUME_COLUMNS = ("t", "r", "r_bar", "measured_ratio", "predicted_ratio", "relative_error")


def cmd_gh(ctx: RunContext) -> None:
    config = ctx.config
    model = ctx.stage("build_model", model_from_config, config.get("model"))
    results = ctx.stage("continuation", continuation, model, config.get("t_schedule"), _settings(config))
    data = ctx.stage("gh_experiment", gh_experiment, config, results)

    ctx.stages.begin("write")
    stencil = config.get("gh.stencil_order")
    ctx.manifest.add(
        write_csv(ctx.out_dir / "gh_distortion.csv",
                  f"graph geodesics with stencil {stencil} (measured flat overestimate "
                  f"{data['calibration']:.4g}); distances in units of the solved metric",
                  GH_COLUMNS, data["rows"]),
        write_csv(ctx.out_dir / "gh_volumes.csv",
                  "geodesic ball volume ratios Vol B(p,r)/Vol B(p,r_bar) against the pushed-forward measure",
                  VOLUME_COLUMNS, data["volume_rows"]),
    )
    _write_checks(ctx, "gh_checks.csv", [schedule_check(results, config.get("t_schedule"))] + data["checks"])
    ctx.stages.end("write")


def mirror_tables(config: ScenarioConfig, seed: int) -> Dict[str, List[tuple]]:
    block = config.get("mirror")
    backend = backend_for(block["exact"])
    lattice = lattice_from_name(block["lattice"], block["gram"])
    data = MirrorData(lattice, block["E"], block["sigma"], backend)
    to_c = backend.to_complex

    alpha = backend.vector(block["alpha"])
    period = mirror_map(alpha, data)
    check = in_period_domain(lattice, period, backend)
    back = inverse_mirror(period, data)
    omega = backend.vector(block["omega"])
    omega_check = backend.vector(block["omega_check"])
    s = backend.number(block["s"])
    lcs = lcs_period(data, omega, s)
    normalized = normalize_period(lcs, s, q(lattice, omega, None, backend),
                                  q(lattice, omega_check, None, backend), backend)
    period_rows = [
        (k, to_c(a).real, to_c(a).imag, to_c(v).real, to_c(v).imag, to_c(w).real, to_c(w).imag,
         to_c(x).real, to_c(x).imag, str(v))
        for k, (a, v, w, x) in enumerate(zip(alpha, period, lcs, normalized))
    ]

    rng = np.random.default_rng(seed)
    worst_q, worst_trip, worst_norm, drawn = 0.0, 0.0, 0.0, 0
    for k in block["sampling_ranks"]:
        float_data = sampling_data(k)
        lat = float_data.lattice
        for _ in range(block["samples"]):
            sample = random_admissible_alpha(float_data, rng)
            image = mirror_map(sample, float_data)
            worst_q = max(worst_q, abs(q(lat, image)))
            norm = q(lat, image, np.conj(image)).real
            worst_norm = max(worst_norm, abs(norm - 2 * q(lat, sample.imag).real))
            worst_trip = max(worst_trip, round_trip_error(sample, float_data))
            drawn += 1
    exact_failures = 0
    exact_sets = [sampling_data(k, ExactBackend()) for k in block["sampling_ranks"]]
    for i in range(block["exact_samples"]):
        exact_data = exact_sets[i % len(exact_sets)]
        failed = exact_identity_failures(random_rational_alpha(exact_data, rng), exact_data)
        if failed:
            logger.warning("exact sample %d on %s breaks %s", i, exact_data.lattice.name, ", ".join(failed))
            exact_failures += 1

    exchange = mirror_exchange(period, data, omega_check)
    check_rows = [
        ("q_period", abs(to_c(check.q_residual))),
        ("q_period_conj", to_c(check.q_conj).real),
        ("q_E_period", to_c(data.pair_e(period)).real),
        ("round_trip", max(abs(to_c(x) - to_c(y)) for x, y in zip(back, data.reduce_mod_e(alpha)))),
        ("random_q_period_max", worst_q),
        ("random_round_trip_max", worst_trip),
        ("random_norm_identity_max", worst_norm),
        ("random_samples", drawn),
        ("exact_samples", block["exact_samples"]),
        ("exact_identity_failures", exact_failures),
        ("exchange_correction", to_c(exchange.correction).real),
        ("exchange_imaginary_residual", to_c(exchange.imaginary_residual).real),
        ("exchange_q_omega_check", to_c(exchange.q_omega_check).real),
        ("exchange_flagged", exchange.flagged),
    ]

    path_rows = []
    for t in block["path_t"]:
        point = lcs_path(backend.number(t), backend.number(block["s0"]), data, omega, omega_check)
        for k, value in enumerate(point.kahler_class):
            path_rows.append((to_c(point.t).real, k, to_c(value).real, str(value), float(point.affine_defect)))
    return {"period": period_rows, "checks": check_rows, "path": path_rows}


def cmd_mirror(ctx: RunContext) -> None:
    tables = ctx.stage("mirror", mirror_tables, ctx.config, ctx.seed)
    ctx.stages.begin("write")
    exact = "exact" if ctx.config.get("mirror.exact") else "float"
    ctx.manifest.add(
        write_csv(ctx.out_dir / "mirror_period.csv",
                  f"{exact} backend; coefficients in the lattice basis: α, m(α), the large complex structure "
                  "period and its normalization; 'symbolic' is m(α) as computed",
                  ("index", "alpha_re", "alpha_im", "period_re", "period_im", "lcs_re", "lcs_im",
                   "normalized_re", "normalized_im", "symbolic"), tables["period"]),
        write_csv(ctx.out_dir / "mirror_checks.csv",
                  "absolute residuals; random rows sample U3+<-2>^k for each configured k, float backend, "
                  "exact rows use rational samples",
                  ("quantity", "value"), tables["checks"]),
        write_csv(ctx.out_dir / "lcs_path.csv",
                  "Kähler classes along the large complex structure path, one row per coefficient",
                  ("t", "index", "value", "symbolic", "affine_defect"), tables["path"]),
    )
    ctx.stages.end("write")


def cmd_verify(ctx: RunContext) -> None:
    from cli.verify import run_suite, write_summary

    checks = ctx.stage("suite", run_suite, ctx.config, ctx.seed)
    ctx.stages.begin("write")
    ctx.manifest.add(write_summary(ctx.out_dir, checks))
    ctx.stages.end("write")
    failed = [c.name for c in checks if not c.passed]
    if failed:
        raise AcceptanceError(f"{len(failed)} acceptance checks failed: {', '.join(failed)}")


COMMANDS: Dict[str, Callable[[RunContext], None]] = {
    "solve": cmd_solve,
    "collapse-sweep": cmd_collapse_sweep,
    "gh": cmd_gh,
    "mirror": cmd_mirror,
    "verify": cmd_verify,
}


def _write_checks(ctx: RunContext, name: str, checks: Sequence[Check]) -> None:
    for check in checks:
        if not check.passed:
            logger.warning("check %s failed: %s", check.name, check.detail)
    ctx.manifest.add(write_csv(ctx.out_dir / name, "acceptance checks; passed is 1 or 0",
                               ("name", "passed", "detail"), [tuple(c) for c in checks]))


# --- entry point -----------------------------------------------------------------------

def run(subcommand: str, config_path: Optional[Path] = None, out: Optional[str] = None,
        serial: bool = False, threads: Optional[int] = None, seed: Optional[int] = None) -> int:
    """Run one subcommand and return its exit code."""
    if config_path is not None and not Path(config_path).exists() and str(config_path) in Scenarios.names():
        config_path = Scenarios.get_path(str(config_path))
    try:
        config = ScenarioConfig(config_path)
        if seed is not None:
            config.set("seed", seed)
        config.set("subcommand", subcommand)
        config.validate()
    except CollapseLabError as e:
        logger.error("invalid configuration: %s", e)
        return e.exit_code

    out_dir = config.output_dir(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(subcommand, config.config_hash())
    stages = StageLogger(seed=config.get("seed"), config_hash=manifest.config_hash)
    ctx = RunContext(config, out_dir, manifest, stages, config.get("seed"))
    manifest.add(config.save(out_dir / "config.json"))

    workers = 1 if serial else (threads or -1)
    try:
        with fft.set_workers(workers):
            COMMANDS[subcommand](ctx)
    except CollapseLabError as e:
        manifest.fail(stages.current, e, e.exit_code)
        logger.error("%s failed in stage %s: %s", subcommand, stages.current, e, exc_info=True)
    except Exception as e:
        manifest.fail(stages.current, e, 2)
        logger.error("%s crashed in stage %s", subcommand, stages.current, exc_info=True)
    path = manifest.write(out_dir, stages)
    logger.info("manifest written to %s (status %s)", path, manifest.status)
    return manifest.exit_code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None and args.threads < 1:
        logger.error("--threads must be positive")
        return 1
    return run(args.subcommand, args.config, args.out, args.serial, args.threads, args.seed)


if __name__ == "__main__":
    sys.exit(main())
