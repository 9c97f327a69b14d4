import numpy as np
import pytest

from core.errors import ChartError, ObstructionError
from core.fields import GridField, ddbar
from core.semiflat import (
    SemiFlatData,
    eta,
    extract_translation,
    fiber_average,
    fiber_oscillation,
    fiber_volumes,
    periodic_dbar_primitive,
    planted_translation_data,
    semiflat_field,
    semiflat_form,
    solve_dbar,
    theta_form,
    translation_pullback,
)


def test_eta_vanishes_on_real_fiber_points(model_b):
    assert eta(model_b, [0.1j], [0.7]) == pytest.approx(0.0)
    # Im z = 1 with g = 1/Im Z
    assert eta(model_b, [0.0], [0.3 + 1j]) == pytest.approx(2.0)


def test_semiflat_form_is_degenerate_along_base(model_b):
    h = semiflat_form(model_b, [0.2 + 0.1j], [0.3 + 0.5j])
    np.testing.assert_allclose(h, np.conj(h.T), atol=1e-14)
    eig = np.linalg.eigvalsh(h)
    assert eig[0] == pytest.approx(0.0, abs=1e-12)
    assert h[1, 1] == pytest.approx(1.0 / (1.0 + 0.3 * 0.1))


def test_theta_form_fiber_coefficients(model_a):
    fiber, base = theta_form(model_a, 0, [0.5 + 0.5j])
    np.testing.assert_allclose(fiber, [-1j])
    np.testing.assert_allclose(base, [0.0])


def test_semiflat_data_metric_positive(model_b):
    data = SemiFlatData.build(model_b)
    assert data.omega_sf.min_eig() == pytest.approx(0.0, abs=1e-12)
    assert data.metric().min_eig() > 0


def test_zero_section_pullback_is_semiflat(model_b):
    sigma = np.zeros(model_b.base_shape + (1,), dtype=complex)
    np.testing.assert_allclose(translation_pullback(model_b, sigma).values, semiflat_field(model_b).values,
                               atol=1e-14)


def test_fiber_volumes_of_semiflat_form(model_a):
    np.testing.assert_allclose(fiber_volumes(model_a, semiflat_field(model_a)), 1.0)


def test_fiber_average_is_constant_along_fibers(model_a):
    grid = model_a.grid()
    mesh = grid.mesh()
    avg = fiber_average(GridField(grid, np.cos(2 * np.pi * mesh[2]) + mesh[0], "f"))
    np.testing.assert_allclose(avg.values, np.broadcast_to(mesh[0], grid.shape), atol=1e-14)


def test_fiber_oscillation_ignores_base_variation(model_a):
    mesh = model_a.grid().mesh()
    values = 3.0 * mesh[0] + 0.5 * np.cos(2 * np.pi * mesh[2])
    spread = fiber_oscillation(values, model_a)
    assert spread.shape == tuple(model_a.base_shape)
    np.testing.assert_allclose(spread, 1.0, atol=1e-12)


def test_planted_section_is_recovered(model_a):
    grid = model_a.grid()
    mesh = grid.mesh()
    psi = GridField(grid, 0.01 * np.cos(2 * np.pi * mesh[0]) * np.cos(2 * np.pi * mesh[3]), "psi")
    c = [0.1 + 0.05j]
    omega, zeta = planted_translation_data(model_a, c, psi)
    section, xi = extract_translation(model_a, omega, zeta)
    np.testing.assert_allclose(section.sigma, np.broadcast_to(c, section.sigma.shape), atol=1e-8)
    frame = model_a.frame()
    np.testing.assert_allclose(ddbar(xi, frame).values, ddbar(psi, frame).values, atol=1e-6)
    assert section.cr_residual < 1e-10
    assert np.all((section.reduced >= 0) & (section.reduced < 1))


def test_extraction_needs_periodic_chart(model_b):
    with pytest.raises(ChartError):
        extract_translation(model_b, semiflat_field(model_b), np.zeros(model_b.grid().shape + (2,)))


def test_harmonic_part_is_an_obstruction(model_a):
    rho = np.zeros(model_a.grid().shape + (2,), dtype=complex)
    rho[..., 1] = 1.0
    with pytest.raises(ObstructionError):
        solve_dbar(model_a, rho, model_a.frame())


def test_dbar_primitive_rejects_other_classes(model_a):
    with pytest.raises(ObstructionError):
        periodic_dbar_primitive(model_a, semiflat_field(model_a) * 2.0)


def test_dbar_primitive_solves_exact_difference(model_a):
    grid = model_a.grid()
    mesh = grid.mesh()
    frame = model_a.frame()
    f = GridField(grid, 0.02 * np.sin(2 * np.pi * mesh[1]) * np.cos(2 * np.pi * mesh[2]), "f")
    omega = semiflat_field(model_a) - ddbar(f, frame)
    zeta = periodic_dbar_primitive(model_a, omega, frame)
    assert zeta.shape == grid.shape + (2,)
    assert np.max(np.abs(zeta)) > 0
