import numpy as np
import pytest

from core.config import ScenarioConfig
from core.errors import ConfigError, DegenerateError, DomainError, InvariantError
from core.model import (
    BaseChart,
    FibrationModel,
    PeriodMap,
    family_a,
    family_b,
    flat_translate,
    holomorphy_residual,
    lattice_coordinates,
    model_from_config,
    period_at,
    reduce_to_fundamental,
    winding,
)


def test_family_a_grid(model_a):
    grid = model_a.grid()
    assert grid.shape == (8, 8, 8, 8)
    assert grid.periodic == (True, True, True, True)
    assert grid.roles == ("base", "base", "fiber", "fiber")
    assert np.sum(model_a.volume_weights()) == pytest.approx(1.0)


def test_family_b_grid(model_b):
    grid = model_b.grid()
    assert grid.periodic == (False, False, True, True)
    assert grid.origins[:2] == (-1.0, -1.0)
    z, dz = model_b.period_samples()
    assert z.shape == (12, 12, 1, 1)
    np.testing.assert_allclose(dz, 0.3)


def test_period_at_checks_chart(model_b):
    np.testing.assert_allclose(period_at(model_b, [0.5 + 0.5j]), [[0.15 + 1.15j]])
    with pytest.raises(DomainError):
        period_at(model_b, [2.0])


def test_im_z_floor():
    model = family_b(2.0, (12, 12), (8, 8))
    with pytest.raises(DegenerateError):
        model.period_samples()


def test_model_invariants():
    with pytest.raises(InvariantError):
        PeriodMap(1, 1, (((0,), np.array([[1.0, 2.0], [3.0, 4.0]])),))
    with pytest.raises(InvariantError):
        FibrationModel("bad", 2, 2, BaseChart("periodic", (0, 0), (1, 1)), PeriodMap.constant(1j),
                       (8, 8), (8, 8))
    with pytest.raises(InvariantError):
        BaseChart("sphere", (0, 0), (1, 1))


def test_holomorphy_residual_of_affine_map(model_b):
    points = model_b.base_points().reshape(-1, 1)
    assert holomorphy_residual(model_b.period_map, points) < 1e-10


def test_lattice_reduction_round_trip(model_b):
    lat = model_b.fiber_lattice([0.2 + 0.1j])
    z = flat_translate(lat, [0.3 + 0.4j], [2.0, -3.0])
    x = reduce_to_fundamental(lat, z)
    assert np.all((x >= 0) & (x < 1))
    np.testing.assert_array_equal(winding(lat, z), np.rint(lattice_coordinates(lat, z) - x).astype(int))
    np.testing.assert_allclose(reduce_to_fundamental(lat, [0.3 + 0.4j]), x, atol=1e-12)


def test_frame_is_constant_for_constant_period(model_a, model_b):
    assert model_a.frame().is_constant()
    assert not model_b.frame().is_constant()


def test_model_from_config():
    config = ScenarioConfig(data={"model": {"family": "A", "grid": {"base": [8, 8], "fiber": [8, 8]}}})
    model = model_from_config(config.get("model"))
    assert model.name == "A"
    assert model.base_shape == (8, 8)
    assert model_from_config(ScenarioConfig().get("model")).fiber_wobble == pytest.approx(0.01)


@pytest.mark.parametrize("n, m", [(3, 1), (3, 2)])
def test_model_from_config_rejects_other_dimensions(n, m):
    block = dict(ScenarioConfig().get("model"), n=n, m=m)
    with pytest.raises(ConfigError, match="n=2, m=1"):
        model_from_config(block)
