import math

import numpy as np
import pytest

from core.errors import CoverageError, DomainError, PositivityError, PreconditionError
from core.fields import Grid, HermitianField
from core.gh_metrics import (
    Correspondence,
    MetricSample,
    ball_volume_ratio,
    calibrate_stencil,
    distances_from,
    distortion,
    fiber_diameter,
    flat_torus_diameter,
    geodesic_distances,
    gh_upper_bound,
    grid_graph,
    lower_sandwich,
    predicted_fiber_diameter,
    projection_correspondence,
    sample_diameter,
    section_correspondence,
    section_points,
    stencil_offsets,
    volume_prediction,
)
from core.ma_solver import MAProblem, solve


def flat_base(n=16):
    return Grid((n, n), (True, True), (1.0, 1.0), (0.0, 0.0), ("base", "base"))


@pytest.fixture(scope="module")
def solved_a():
    from core.model import family_a

    return solve(MAProblem.build(family_a((8, 8), (8, 8)), 0.1))


def test_stencil_offsets():
    assert len(stencil_offsets(2, 1)) == 4
    assert len(stencil_offsets(2, 2)) == 8
    assert len(stencil_offsets(4, 1)) == 40
    with pytest.raises(PreconditionError):
        stencil_offsets(2, 3)


def test_stencil_calibration():
    first = calibrate_stencil(1)
    assert 0.07 < first < 0.0825
    assert 0.0 < calibrate_stencil(2) < first


def test_flat_torus_diameter():
    assert flat_torus_diameter(np.eye(2)) == pytest.approx(math.sqrt(2) / 2)
    assert flat_torus_diameter(np.diag([1.0, 4.0])) == pytest.approx(math.sqrt(1.25))


def test_geodesics_form_a_metric():
    grid = flat_base()
    g = HermitianField.constant(grid, np.eye(1), "flat")
    sample = geodesic_distances(g, [(0, 0), (4, 0), (4, 4), (8, 8)])
    assert sample.triangle_defect() <= 1e-12
    np.testing.assert_allclose(np.diag(sample.distances), 0.0)
    assert sample.distances[0, 1] == pytest.approx(0.25)
    # (8, 8) is the antipode of (0, 0) on the periodic grid
    assert sample.diameter() == pytest.approx(math.sqrt(2) / 2)


def test_graph_needs_positive_metric():
    grid = flat_base(8)
    with pytest.raises(PositivityError):
        grid_graph(np.broadcast_to(-np.eye(2), grid.shape + (2, 2)), grid)


@pytest.mark.parametrize("n, order, target, want", [
    (2, 1, (1, 1), 0.5 * math.sqrt(2)),
    (4, 2, (1, 2), 0.25 * math.sqrt(5)),
])
def test_short_periodic_axes_keep_single_edges(n, order, target, want):
    # wrapped offsets land on the same pair of points; the edge keeps its own length
    grid = flat_base(n)
    graph = grid_graph(np.broadcast_to(np.eye(2), grid.shape + (2, 2)), grid, order)
    assert graph.diagonal().max() == 0.0
    dist = distances_from(graph, grid, [(0, 0)])[0]
    assert dist[target] == pytest.approx(want)
    assert dist[(0, 1)] == pytest.approx(1.0 / n)


def test_distortion_of_identical_samples():
    d = np.array([[0.0, 1.0], [1.0, 0.0]])
    sample = MetricSample(((0,), (1,)), d)
    corr = Correspondence(((0, 0), (1, 1)), ((0,), (1,)), ((0,), (1,)))
    assert corr.total
    assert distortion(corr, sample, sample) == 0.0
    assert lower_sandwich(corr, sample, sample, 0.0) == (1.0, True)
    stretched = MetricSample(((0,), (1,)), 3.0 * d)
    assert gh_upper_bound(corr, stretched, sample) == pytest.approx(1.0)


def test_partial_correspondence_is_rejected():
    sample = MetricSample(((0,), (1,)), np.array([[0.0, 1.0], [1.0, 0.0]]))
    corr = Correspondence(((0, 0),), ((0,), (1,)), ((0,), (1,)))
    assert not corr.total
    with pytest.raises(CoverageError):
        distortion(corr, sample, sample)


def test_section_correspondence(model_b):
    points = section_points(model_b, 3)
    assert len(points) == 9
    corr = section_correspondence(model_b, 0.1, points)
    assert corr.total
    assert corr.x_points[0] == points[0] + (0, 0)
    with pytest.raises(DomainError):
        section_correspondence(model_b, 0.1, [(0, 0)])


def test_fiber_diameter_of_flat_product(solved_a):
    center = solved_a.model.base_grid().center_index("base")
    expected = math.sqrt(0.1) * math.sqrt(2) / 2
    assert fiber_diameter(solved_a, center) == pytest.approx(expected, rel=1e-10)
    assert predicted_fiber_diameter(solved_a, center) == pytest.approx(expected, rel=1e-10)


def test_ball_volume_ratio(solved_a):
    p = solved_a.model.base_grid().center_index("base") + (0, 0)
    assert ball_volume_ratio(solved_a, p, 0.0, p, 0.3) == 0.0
    assert ball_volume_ratio(solved_a, p, 0.3, p, 0.3) == pytest.approx(1.0)
    assert 0.0 < ball_volume_ratio(solved_a, p, 0.2, p, 0.3) < 1.0


def test_projection_correspondence_covers_fibers(model_a):
    ys = [(2, 2), (5, 3)]
    corr = projection_correspondence(model_a, ys, fiber_stride=4)
    # 8x8 fibers sampled every 4 points: 4 fiber points per base index
    assert len(corr.x_points) == 8
    assert corr.total
    for i, j in corr.pairs:
        assert corr.x_points[i][:2] == ys[j]
    assert sum(1 for x in corr.x_points if x[2:] == (0, 0)) == 2


def test_projection_distortion_sees_fiber_size(solved_a):
    model = solved_a.model
    base = model.base_grid()
    ys = [(2, 2), (5, 5)]
    dy = geodesic_distances(HermitianField.constant(base, np.eye(1)), ys)
    corr = projection_correspondence(model, ys)
    dx = geodesic_distances(solved_a.metric, corr.x_points, frame=solved_a.problem.frame)
    section = section_correspondence(model, solved_a.t, ys)
    dx_section = geodesic_distances(solved_a.metric, section.x_points, frame=solved_a.problem.frame)
    assert distortion(corr, dx, dy) > distortion(section, dx_section, dy)


def test_sample_diameter_bounds():
    sample = MetricSample(((0,), (1,), (2,)), np.array([[0.0, 1.0, 2.0], [1.0, 0.0, 1.5], [2.0, 1.5, 0.0]]))
    assert sample_diameter(sample) == (2.0, 2.0)
    lower, upper = sample_diameter(sample, calibration=0.25)
    assert upper == 2.0
    assert lower == pytest.approx(1.6)


def test_volume_prediction_on_flat_product(solved_a):
    model = solved_a.model
    p = model.base_grid().center_index("base") + (0, 0)
    omega = HermitianField.constant(model.base_grid(), np.eye(1))
    assert volume_prediction(solved_a, omega, p, 0.3, p, 0.3) == pytest.approx(1.0)
    small = volume_prediction(solved_a, omega, p, 0.2, p, 0.3)
    assert 0.0 < small < 1.0
    assert volume_prediction(solved_a, omega, p, 0.25, p, 0.3) >= small
