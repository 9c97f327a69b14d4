"""
Gromov-Hausdorff collapse measurements.

Distances come from Dijkstra on a weighted grid graph: neighbors are all
{−1,0,1}^d offsets (stencil 1), plus knight moves in every axis pair
(stencil 2). An edge's weight is the length of the straight segment under
the mean of the endpoint metrics.
"""
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import dijkstra

from core.collapse import Check
from core.errors import CoverageError, DomainError, PositivityError, PreconditionError
from core.fields import ComplexFrame, Grid, HermitianField
from core.ma_solver import MASolveResult

logger = logging.getLogger(__name__)

TRIANGLE_SLACK = 1e-10


@dataclass(frozen=True, eq=False)
class MetricSample:
    points: Tuple[Tuple[int, ...], ...]
    distances: np.ndarray
    description: str = ""

    def triangle_defect(self) -> float:
        """max over i, j, k of d_ik − d_ij − d_jk (≤ 0 for a metric)."""
        d = self.distances
        return float(np.max(d[:, None, :] - d[:, :, None] - d[None, :, :]))

    def diameter(self) -> float:
        return float(np.max(self.distances))


@dataclass(frozen=True)
class Correspondence:
    pairs: Tuple[Tuple[int, int], ...]
    x_points: Tuple[Tuple[int, ...], ...]
    y_points: Tuple[Tuple[int, ...], ...]
    x_covered: Tuple[bool, ...] = field(default=())
    y_covered: Tuple[bool, ...] = field(default=())

    def __post_init__(self):
        xs = {i for i, _ in self.pairs}
        ys = {j for _, j in self.pairs}
        object.__setattr__(self, "x_covered", tuple(i in xs for i in range(len(self.x_points))))
        object.__setattr__(self, "y_covered", tuple(j in ys for j in range(len(self.y_points))))

    @property
    def total(self) -> bool:
        return all(self.x_covered) and all(self.y_covered)


# --- graph -------------------------------------------------------------------------

def stencil_offsets(d: int, order: int) -> List[Tuple[int, ...]]:
    """Half of the neighbor offsets (first nonzero entry positive); the graph is undirected."""
    if order not in (1, 2):
        raise PreconditionError(f"stencil_order must be 1 or 2, got {order}")
    offsets = set(itertools.product((-1, 0, 1), repeat=d))
    if order == 2:
        for k, l in itertools.combinations(range(d), 2):
            for a, b in ((1, 2), (2, 1)):
                for sa, sb in itertools.product((1, -1), repeat=2):
                    off = [0] * d
                    off[k], off[l] = sa * a, sb * b
                    offsets.add(tuple(off))
    return sorted(o for o in offsets if any(o) and next(v for v in o if v) > 0)


def grid_graph(metric: np.ndarray, grid: Grid, stencil_order: int = 1) -> sparse.csr_matrix:
    """Weighted graph over the grid points for a real metric field (grid.shape + (d, d))."""
    d = grid.ndim
    if np.min(np.linalg.eigvalsh(metric)[..., 0]) <= 0:
        raise PositivityError("distance metric is not positive definite")
    index = np.arange(grid.size).reshape(grid.shape)
    spacing = np.array([grid.spacing(k) for k in range(d)])
    flat_metric = np.ascontiguousarray(np.broadcast_to(metric, grid.shape + (d, d))).reshape((grid.size, d, d))
    metric = flat_metric.reshape(grid.shape + (d, d))
    rows, cols, weights = [], [], []
    for off in stencil_offsets(d, stencil_order):
        dst_index = index
        valid = np.ones(grid.shape, dtype=bool)
        for k, o in enumerate(off):
            if o == 0:
                continue
            if grid.periodic[k]:
                dst_index = np.roll(dst_index, -o, axis=k)
            else:
                coords = np.arange(grid.shape[k])
                keep = (coords + o >= 0) & (coords + o < grid.shape[k])
                shape = [1] * d
                shape[k] = -1
                valid = valid & keep.reshape(shape)
                dst_index = np.roll(dst_index, -o, axis=k)
        step = np.asarray(off) * spacing
        neighbor = flat_metric[dst_index.ravel()].reshape(metric.shape)
        mean = 0.5 * (metric + neighbor)
        length = np.sqrt(np.einsum("k,...kl,l->...", step, mean, step))
        rows.append(index[valid])
        cols.append(dst_index[valid])
        weights.append(length[valid])
    return _undirected_matrix(np.concatenate(rows), np.concatenate(cols), np.concatenate(weights), grid.size)


def _undirected_matrix(rows: np.ndarray, cols: np.ndarray, weights: np.ndarray, size: int) -> sparse.csr_matrix:
    # short periodic axes wrap distinct offsets onto one pair; keep the shortest edge, drop self-loops
    lo, hi = np.minimum(rows, cols), np.maximum(rows, cols)
    keep = lo != hi
    lo, hi, weights = lo[keep], hi[keep], weights[keep]
    key = lo.astype(np.int64) * size + hi
    order = np.lexsort((weights, key))
    _, first = np.unique(key[order], return_index=True)
    pick = order[first]
    return sparse.csr_matrix((weights[pick], (lo[pick], hi[pick])), shape=(size, size))


def _flat_index(grid: Grid, point: Sequence[int]) -> int:
    return int(np.ravel_multi_index(tuple(int(i) for i in point), grid.shape))


def distances_from(graph: sparse.csr_matrix, grid: Grid, sources: Sequence[Tuple[int, ...]]) -> np.ndarray:
    """Shortest-path distances from each source to every grid point: (len(sources),) + grid.shape."""
    flat = [_flat_index(grid, p) for p in sources]
    dist = dijkstra(graph, directed=False, indices=flat)
    return np.asarray(dist).reshape((len(flat),) + grid.shape)


def geodesic_distances(g: HermitianField, points: Sequence[Tuple[int, ...]], stencil_order: int = 1,
                       frame: Optional[ComplexFrame] = None) -> MetricSample:
    """Pairwise graph-geodesic distances between grid points under the Riemannian metric of g."""
    grid = g.grid
    frame = frame or ComplexFrame.flat(grid)
    metric = np.broadcast_to(frame.real_metric(g), grid.shape + (grid.ndim, grid.ndim))
    return sample_from_metric(metric, grid, points, stencil_order, description=g.name)


def sample_from_metric(metric: np.ndarray, grid: Grid, points: Sequence[Tuple[int, ...]],
                       stencil_order: int = 1, description: str = "") -> MetricSample:
    points = tuple(tuple(int(i) for i in p) for p in points)
    graph = grid_graph(metric, grid, stencil_order)
    full = distances_from(graph, grid, points)
    dist = np.stack([full[(slice(None),) + p] for p in points], axis=1)
    dist = np.minimum(dist, dist.T)
    np.fill_diagonal(dist, 0.0)
    if not np.all(np.isfinite(dist)):
        raise DomainError("sample points are not connected in the grid graph")
    return MetricSample(points, dist, description=f"{description} (stencil {stencil_order})")


# --- correspondences ------------------------------------------------------------------

def _require_trusted(mask: np.ndarray, point: Tuple[int, ...]) -> None:
    if len(point) != mask.ndim or any(i < 0 or i >= s for i, s in zip(point, mask.shape)) or not mask[point]:
        raise DomainError(f"point {point} lies outside the trusted interior")


def section_correspondence(model, t: float, base_points: Sequence[Tuple[int, ...]],
                           fraction: float = 0.5) -> Correspondence:
    """Pairs each base index y with the total-space point (y, x = 0) of the zero section."""
    mask = model.base_grid().trusted_mask(fraction)
    ys = tuple(tuple(int(i) for i in y) for y in base_points)
    for y in ys:
        _require_trusted(mask, y)
    zero = (0,) * (2 * model.r)
    xs = tuple(y + zero for y in ys)
    logger.debug("section correspondence at t=%s with %d points", t, len(ys))
    return Correspondence(tuple((i, i) for i in range(len(ys))), xs, ys)


def projection_correspondence(model, base_points: Sequence[Tuple[int, ...]], fiber_stride: int = 4,
                              fraction: float = 0.5) -> Correspondence:
    """{(p, f(p))} for fiber points over each base index, together with the section pairs."""
    mask = model.base_grid().trusted_mask(fraction)
    ys = tuple(tuple(int(i) for i in y) for y in base_points)
    for y in ys:
        _require_trusted(mask, y)
    fiber_points = list(itertools.product(*[range(0, n, fiber_stride) for n in model.fiber_shape]))
    xs, pairs = [], []
    for j, y in enumerate(ys):
        for x in fiber_points:
            pairs.append((len(xs), j))
            xs.append(y + tuple(x))
    return Correspondence(tuple(pairs), tuple(xs), ys)


def distortion(corr: Correspondence, dx: MetricSample, dy: MetricSample) -> float:
    """max over pairs of pairs of |dX(i,i′) − dY(j,j′)|; the GH bound is half of it."""
    if not corr.total:
        raise CoverageError("correspondence does not cover both samples")
    i = np.array([p[0] for p in corr.pairs])
    j = np.array([p[1] for p in corr.pairs])
    return float(np.max(np.abs(dx.distances[np.ix_(i, i)] - dy.distances[np.ix_(j, j)])))


def gh_upper_bound(corr: Correspondence, dx: MetricSample, dy: MetricSample) -> float:
    return 0.5 * distortion(corr, dx, dy)


def lower_sandwich(corr: Correspondence, dx: MetricSample, dy: MetricSample, lower_epsilon: float,
                   slack: float = 0.0) -> Tuple[float, bool]:
    """min over pairs of dX/dY against e^{−δ/2}(1 − slack); returns (min ratio, holds)."""
    i = np.array([p[0] for p in corr.pairs])
    j = np.array([p[1] for p in corr.pairs])
    a = dx.distances[np.ix_(i, i)]
    b = dy.distances[np.ix_(j, j)]
    off = b > 0
    ratio = float(np.min(a[off] / b[off])) if np.any(off) else float("inf")
    return ratio, ratio >= math.exp(-0.5 * lower_epsilon) * (1.0 - slack)


# --- volumes ------------------------------------------------------------------------------

def _riemannian_cells(metric: np.ndarray, grid: Grid) -> np.ndarray:
    return np.sqrt(np.linalg.det(metric)) * grid.quadrature_weights()


def ball_volumes(metric: np.ndarray, grid: Grid, balls: Sequence[Tuple[Tuple[int, ...], float]],
                 trusted: Optional[np.ndarray] = None, stencil_order: int = 1) -> List[float]:
    """Riemannian volumes of the cells whose centers lie at distance < radius, one per (center, radius)."""
    graph = grid_graph(metric, grid, stencil_order)
    cells = _riemannian_cells(metric, grid)
    dist = distances_from(graph, grid, [tuple(c) for c, _ in balls])
    out = []
    for (center, radius), d in zip(balls, dist):
        inside = d < radius
        if trusted is not None and np.any(inside & ~trusted):
            raise DomainError(f"geodesic ball of radius {radius} around {tuple(center)} leaves the trusted interior")
        out.append(float(np.sum(cells[inside])))
    return out


def ball_volume_ratio(result: MASolveResult, p: Tuple[int, ...], r: float, p_bar: Tuple[int, ...],
                      r_bar: float, stencil_order: int = 1, fraction: float = 0.5) -> float:
    """Vol(B(p, r)) / Vol(B(p̄, r̄)) under ω̃_t."""
    if r <= 0:
        return 0.0
    grid = result.metric.grid
    metric = np.broadcast_to(result.problem.frame.real_metric(result.metric), grid.shape + (grid.ndim,) * 2)
    trusted = None if result.model.chart.periodic else grid.trusted_mask(fraction)
    num, den = ball_volumes(metric, grid, [(p, r), (p_bar, r_bar)], trusted, stencil_order)
    return num / den


def volume_prediction(result: MASolveResult, omega: HermitianField, p: Tuple[int, ...], r: float,
                      p_bar: Tuple[int, ...], r_bar: float, stencil_order: int = 1) -> float:
    """υ·∫ over f⁻¹(B_ω(f(p), r)) of μ, with υ normalizing the reference ball to 1."""
    model = result.model
    base = omega.grid
    metric = np.broadcast_to(ComplexFrame.flat(base).real_metric(omega), base.shape + (base.ndim,) * 2)
    graph = grid_graph(metric, base, stencil_order)
    m2 = 2 * model.m
    dist = distances_from(graph, base, [tuple(p[:m2]), tuple(p_bar[:m2])])
    mass = result.problem.rhs * model.volume_weights()
    fiber_mass = np.sum(mass, axis=tuple(range(m2, 2 * model.n)))
    num = float(np.sum(fiber_mass[dist[0] < r])) if r > 0 else 0.0
    den = float(np.sum(fiber_mass[dist[1] < r_bar]))
    return num / den


# --- diameters ------------------------------------------------------------------------------

def fiber_diameter(result: MASolveResult, y: Sequence[int], stencil_order: int = 1,
                   fraction: float = 0.5) -> float:
    """Diameter of the fiber over base index y under the restricted metric of ω̃_t."""
    model = result.model
    y = tuple(int(i) for i in y)
    _require_trusted(model.base_grid().trusted_mask(fraction), y)
    grid = result.metric.grid
    real = np.broadcast_to(result.problem.frame.real_metric(result.metric), grid.shape + (grid.ndim,) * 2)
    fiber = list(range(2 * model.m, 2 * model.n))
    restricted = np.ascontiguousarray(real[y][..., fiber, :][..., fiber])
    fiber_grid = model.fiber_grid()
    graph = grid_graph(restricted, fiber_grid, stencil_order)
    dist = dijkstra(graph, directed=False)
    return float(np.max(dist))


def predicted_fiber_diameter(result: MASolveResult, y: Sequence[int]) -> float:
    """Diameter of the fiber over y under t·ω_M restricted to it (flat, so computed by brute force)."""
    model = result.model
    grid = result.metric.grid
    real = np.broadcast_to(result.problem.frame.real_metric(result.problem.omega_m), grid.shape + (grid.ndim,) * 2)
    fiber = list(range(2 * model.m, 2 * model.n))
    restricted = real[tuple(int(i) for i in y)][..., fiber, :][..., fiber]
    flat = np.mean(restricted.reshape((-1, len(fiber), len(fiber))), axis=0)
    return flat_torus_diameter(result.t * flat)


def flat_torus_diameter(metric: np.ndarray, samples: int = 96, reach: int = 2) -> float:
    """
    Diameter of ℝ^k/ℤ^k with a constant metric (in lattice coordinates),
    by brute force over sample points and lattice translates.
    """
    metric = np.asarray(metric, dtype=float)
    k = metric.shape[0]
    axis = np.arange(samples) / samples
    points = np.stack(np.meshgrid(*([axis] * k), indexing="ij"), axis=-1).reshape(-1, k)
    translates = np.array(list(itertools.product(range(-reach, reach + 1), repeat=k)), dtype=float)
    best = np.full(points.shape[0], np.inf)
    for v in translates:
        diff = points - v
        best = np.minimum(best, np.einsum("pi,ij,pj->p", diff, metric, diff))
    return float(np.sqrt(np.max(best)))


def sample_diameter(sample: MetricSample, calibration: float = 0.0) -> Tuple[float, float]:
    """Bounds on the true diameter of the sampled points, given the stencil's relative overestimate."""
    upper = sample.diameter()
    return upper / (1.0 + calibration), upper


def calibrate_stencil(stencil_order: int, size: int = 33, dim: int = 2) -> float:
    """Worst relative overestimate of graph distance over Euclidean distance on a flat grid."""
    grid = Grid(shape=(size,) * dim, periodic=(False,) * dim, lengths=(1.0,) * dim,
                origins=(0.0,) * dim, roles=("base",) * dim)
    metric = np.broadcast_to(np.eye(dim), grid.shape + (dim, dim))
    center = (size // 2,) * dim
    dist = distances_from(grid_graph(metric, grid, stencil_order), grid, [center])[0]
    mesh = np.stack(grid.mesh(), axis=-1)
    euclid = np.linalg.norm(mesh - mesh[center], axis=-1)
    off = euclid > 0
    return float(np.max(dist[off] / euclid[off]) - 1.0)


def section_points(model, count: int, fraction: float = 0.5) -> List[Tuple[int, ...]]:
    """count^{2m} evenly spread base indices inside the trusted interior."""
    mask = model.base_grid().trusted_mask(fraction)
    axes = []
    for k in range(mask.ndim):
        line = np.nonzero(np.any(mask, axis=tuple(j for j in range(mask.ndim) if j != k)))[0]
        pick = np.unique(np.rint(np.linspace(line[0], line[-1], count)).astype(int))
        axes.append(pick)
    return [tuple(int(i) for i in p) for p in itertools.product(*axes)]


def gh_checks(distortions: Sequence[float], calibration: float, diameter_ratio_error: float,
              volume_errors: Sequence[float], sandwich_holds: Sequence[bool],
              base_diameter: float) -> List[Check]:
    checks = [
        Check("distortion_decreasing", all(b < a for a, b in zip(distortions, distortions[1:])),
              f"distortions {list(distortions)}"),
        Check("distortion_near_stencil_floor", distortions[-1] <= 3.0 * calibration * base_diameter,
              f"last {distortions[-1]:.4g} vs 3·{calibration:.4g}·{base_diameter:.4g}"),
        Check("fiber_diameter_matches_flat_torus", diameter_ratio_error <= 0.10,
              f"relative error {diameter_ratio_error:.4g}"),
        Check("volume_ratio_matches_prediction", max(volume_errors, default=0.0) <= 0.05,
              f"relative errors {list(volume_errors)}"),
        Check("lower_sandwich", all(sandwich_holds), f"holds {list(sandwich_holds)}"),
    ]
    return checks
