import math

import numpy as np
import pytest

from core.collapse import (
    CollapseReport,
    EXTRA_COLUMNS,
    REPORT_COLUMNS,
    candidate_base_metric,
    curvature_sup,
    dilate_pullback,
    fiber_flatness_defect,
    fiber_gradient_norm,
    limit_base_metric,
    oscillation,
    ricci_wp_residual,
    rescaled_view,
    run_diagnostics,
    sandwich_epsilon,
    sweep_checks,
    weil_petersson,
)
from core.errors import DomainError, PreconditionError
from core.fields import HermitianField
from core.io import read_csv
from core.ma_solver import continuation


@pytest.fixture(scope="module")
def sweep_a():
    from core.model import family_a

    return continuation(family_a((8, 8), (8, 8)), [0.2, 0.1, 0.05])


@pytest.fixture(scope="module")
def result_b():
    from core.model import family_b

    return continuation(family_b(0.3, (12, 12), (8, 8)), [0.1])[0]


def test_dilate_pullback_scalar_and_form():
    t = 0.25
    pulled = dilate_pullback(lambda y, z: abs(z) ** 2, t)
    assert pulled(0.0, 1.0) == pytest.approx(4.0)
    form = dilate_pullback(lambda y, z: np.ones((2, 2)), t, kind="form", m=1)
    np.testing.assert_allclose(form(0.0, 0.5), [[1.0, 2.0], [2.0, 4.0]])
    with pytest.raises(PreconditionError):
        dilate_pullback(lambda y, z: 0.0, 0.0)
    with pytest.raises(PreconditionError):
        dilate_pullback(lambda y, z: 0.0, t, kind="vector")


def test_rescaled_identity_holds(result_b):
    view = rescaled_view(result_b)
    assert view.identity_defect < 1e-8
    assert view.metric.grid.lengths[2] == pytest.approx(math.sqrt(result_b.t))
    assert view.residual < 1e-6


def test_per_fiber_quantities(result_b):
    center = result_b.model.base_grid().center_index("base")
    assert fiber_flatness_defect(result_b, center) >= 0.0
    assert fiber_gradient_norm(result_b, center) >= 0.0
    assert oscillation(result_b.phi, center) >= 0.0
    with pytest.raises(DomainError):
        fiber_flatness_defect(result_b, (0, 0))


def test_weil_petersson_vanishes_for_constant_period(sweep_a):
    assert np.max(np.abs(weil_petersson(sweep_a[0].model).values)) < 1e-10


def test_limit_needs_three_points(sweep_a):
    with pytest.raises(PreconditionError):
        limit_base_metric(sweep_a[:2])
    limit = limit_base_metric(sweep_a)
    np.testing.assert_allclose(limit.omega.values, candidate_base_metric(sweep_a[-1]).values, atol=1e-10)


def test_flat_product_sweep_passes(sweep_a, tmp_path):
    report = run_diagnostics(sweep_a)
    assert len(report.rows) == 3
    assert report.column("C_c2") == pytest.approx([1.0, 1.0, 1.0])
    assert report.extra("epsilon") == pytest.approx([0.2, 0.1, 0.05])
    failed = [c for c in sweep_checks(report) if not c.passed]
    assert failed == []

    main, extra = report.write(tmp_path)
    comment, columns, rows = read_csv(main)
    assert tuple(columns) == REPORT_COLUMNS
    assert len(rows) == 3
    assert comment
    assert tuple(read_csv(extra)[1]) == EXTRA_COLUMNS


def test_empty_schedule_gives_empty_report():
    assert run_diagnostics([]).rows == []


def test_gradient_check_uses_smallest_ratio():
    # grad/t^2 drops after the first t then stays flat: not quadratic decay
    ts = [0.2, 0.1, 0.05]
    report = CollapseReport(rows=[(t, 1.0, 0.0, 0.0, 1.0, g, 0.0) for t, g in zip(ts, [1.0, 0.1, 0.1])])
    checks = {c.name: c for c in sweep_checks(report)}
    assert not checks["fiber_gradient_quadratic_in_t"].passed
    assert checks["oscillation_linear_in_t"].passed


def test_gradient_check_accepts_bounded_ratio():
    ts = [0.2, 0.1, 0.05]
    report = CollapseReport(rows=[(t, 1.0, 0.0, 0.0, 1.0, g, 0.0) for t, g in zip(ts, [0.5, 0.7, 0.6])])
    checks = {c.name: c for c in sweep_checks(report)}
    assert checks["fiber_gradient_quadratic_in_t"].passed


def test_curvature_sup_of_flat_product_is_zero(sweep_a):
    result = sweep_a[0]
    region = result.metric.grid.trusted_mask(0.5)
    assert curvature_sup(result, region, n_planes=2) < 1e-8
    with pytest.raises(PreconditionError):
        curvature_sup(result, region, n_planes=0)


def test_curvature_sup_is_seeded(result_b):
    region = np.zeros(result_b.metric.grid.shape, dtype=bool)
    region[tuple(result_b.metric.grid.center_index("base")) + (0, 0)] = True
    first = curvature_sup(result_b, region, n_planes=4, seed=5)
    assert first > 0
    assert curvature_sup(result_b, region, n_planes=4, seed=5) == first


@pytest.mark.parametrize("scale", [1.0, 2.0])
def test_sandwich_epsilon_on_flat_product(sweep_a, scale):
    result = sweep_a[1]
    t = result.t
    omega = HermitianField.constant(result.model.base_grid(), scale * np.eye(1))
    bounds = sandwich_epsilon(result, omega, result.metric.grid.trusted_mask(0.5))
    # ω̃_t = diag(1 + t, t) against ω_M = I
    assert bounds.epsilon == pytest.approx(max(abs(1.0 + t - scale), t), abs=1e-10)
    assert bounds.lower_epsilon == pytest.approx(max(0.0, math.log(scale / (1.0 + t))), abs=1e-10)


def test_ricci_wp_residual(result_b):
    model = result_b.model
    base = model.base_grid()
    z, _ = model.period_samples()
    # Ric(det Im Z · |dy|²) is exactly the Weil-Petersson form
    matched = HermitianField(base, np.linalg.det(z.imag)[..., None, None], "detImZ")
    assert ricci_wp_residual(matched, model) < 1e-10
    flat = HermitianField.constant(base, np.eye(1))
    wp = np.max(np.abs(weil_petersson(model).values)[base.trusted_mask(0.5)])
    assert ricci_wp_residual(flat, model) == pytest.approx(wp)
    assert wp > 0
