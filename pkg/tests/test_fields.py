import numpy as np
import pytest

from core.errors import DegeneratePlaneError, PositivityError, ShapeError
from core.fields import (
    ComplexFrame,
    CurvatureEvaluator,
    Grid,
    GridField,
    HermitianField,
    ddbar,
    derivative,
    eigen_envelope,
    generalized_eigenvalues,
    ricci_form,
    riemann_sectional,
)


def periodic_grid(n=16):
    return Grid((n, n), (True, True), (1.0, 1.0), (0.0, 0.0), ("base", "base"))


def dirichlet_grid(n=41):
    return Grid((n, n), (False, False), (2.0, 2.0), (-1.0, -1.0), ("base", "base"))


def test_spectral_derivative_is_exact_for_resolved_modes():
    grid = periodic_grid()
    x, _ = grid.mesh()
    values = np.sin(2 * np.pi * x)
    np.testing.assert_allclose(derivative(values, grid, 0), 2 * np.pi * np.cos(2 * np.pi * x), atol=1e-11)
    np.testing.assert_allclose(derivative(values, grid, 0, order=2), -(2 * np.pi) ** 2 * values, atol=1e-9)


def test_finite_differences_are_exact_for_cubics():
    grid = dirichlet_grid(21)
    x, _ = grid.mesh()
    np.testing.assert_allclose(derivative(x ** 3, grid, 0), 3 * x ** 2, atol=1e-9)
    np.testing.assert_allclose(derivative(x ** 3, grid, 0, order=2), 6 * x, atol=1e-8)


def test_grid_rejects_short_dirichlet_axes():
    with pytest.raises(ShapeError):
        Grid((4, 8), (False, True), (1.0, 1.0), (0.0, 0.0), ("base", "base"))


def test_quadrature_integrates_constants():
    assert np.sum(periodic_grid().quadrature_weights()) == pytest.approx(1.0)
    assert np.sum(dirichlet_grid().quadrature_weights()) == pytest.approx(4.0)


def test_ddbar_of_square_norm_is_identity():
    grid = dirichlet_grid(21)
    x, y = grid.mesh()
    h = ddbar(GridField(grid, x ** 2 + y ** 2, "r2"))
    np.testing.assert_allclose(h.values, np.ones(grid.shape + (1, 1)), atol=1e-9)


def test_ddbar_rejects_complex_potential():
    grid = periodic_grid()
    with pytest.raises(ShapeError):
        ddbar(GridField(grid, 1j * np.ones(grid.shape), "bad"))


def test_hermitian_field_checks_symmetry():
    grid = periodic_grid(4)
    values = np.broadcast_to(np.array([[1.0, 1.0], [0.0, 1.0]]), grid.shape + (2, 2))
    with pytest.raises(ShapeError):
        HermitianField(grid, values)
    fixed = HermitianField.symmetrized(grid, values)
    np.testing.assert_allclose(fixed.values[0, 0], [[1.0, 0.5], [0.5, 1.0]])


def test_generalized_eigenvalues_and_envelope():
    grid = periodic_grid(4)
    g = HermitianField.constant(grid, np.diag([2.0, 3.0]))
    h = HermitianField.constant(grid, np.eye(2))
    np.testing.assert_allclose(generalized_eigenvalues(g, h)[0, 0], [2.0, 3.0])
    assert eigen_envelope(g, h) == pytest.approx((2.0, 3.0))
    with pytest.raises(PositivityError):
        generalized_eigenvalues(h, HermitianField.constant(grid, -np.eye(2)))


def test_coframe_is_dual_to_frame():
    frame = ComplexFrame.flat(periodic_grid(4))
    pairing = np.einsum("...al,...bl->...ab", frame.coframe, frame.theta)
    np.testing.assert_allclose(pairing.reshape(1, 1), [[1.0]], atol=1e-14)
    assert frame.is_constant()


def test_flat_metric_has_zero_ricci_and_curvature():
    grid = dirichlet_grid(21)
    g = HermitianField.constant(grid, np.eye(1) * 2.0, "flat")
    assert np.max(np.abs(ricci_form(g).values)) < 1e-12
    value = riemann_sectional(g, (10, 10), (np.array([1.0, 0.0]), np.array([0.0, 1.0])))
    assert abs(value) < 1e-10


def test_conformal_metric_curvature():
    # e^{2f}|dw|^2 has Gaussian curvature −e^{−2f}Δf; f = 0.1|w|^2 gives −0.4 at the origin
    grid = dirichlet_grid(41)
    x, y = grid.mesh()
    conformal = np.exp(0.2 * (x ** 2 + y ** 2))
    g = HermitianField(grid, conformal[..., None, None], "conformal")
    value = riemann_sectional(g, (20, 20), (np.array([1.0, 0.0]), np.array([0.0, 1.0])))
    assert value == pytest.approx(-0.4, abs=1e-4)


def test_degenerate_plane_is_rejected():
    grid = dirichlet_grid(21)
    g = HermitianField.constant(grid, np.eye(1), "flat")
    evaluator = CurvatureEvaluator(g)
    with pytest.raises(DegeneratePlaneError):
        evaluator.sectional((10, 10), np.array([1.0, 1.0]), np.array([2.0, 2.0]))
