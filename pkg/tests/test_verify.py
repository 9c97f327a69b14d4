import pytest

from cli.verify import (
    GH_SUITE,
    calculus_checks,
    flat_solution_checks,
    mirror_checks,
    normalization_checks,
    semiflat_checks,
)
from core.config import ScenarioConfig
from core.ma_solver import SolverSettings


def failed(checks):
    return [c for c in checks if not c.passed]


def test_calculus_checks_pass():
    checks = calculus_checks()
    assert len(checks) == 4
    assert failed(checks) == []


@pytest.mark.parametrize("which", ["model_a", "model_b"])
def test_normalization_and_flat_solution_checks(which, request):
    model = request.getfixturevalue(which)
    checks = normalization_checks(model, 0.2) + flat_solution_checks(model, 0.2, SolverSettings())
    assert [c.name for c in checks] == ["flat_constant_is_one_plus_t", "constant_tends_to_limit",
                                        "flat_potential_vanishes"]
    assert failed(checks) == []


def test_semiflat_checks_recover_planted_data(model_a, model_b):
    checks = semiflat_checks(model_a)
    assert {c.name for c in checks} == {"planted_section_recovered", "section_holomorphic",
                                        "planted_potential_recovered", "semiflat_xi_fiber_constant"}
    assert failed(checks) == []
    # the planted-data construction needs a periodic chart
    assert semiflat_checks(model_b) == []


def test_mirror_checks_on_signature_three_lattices():
    config = ScenarioConfig(data={"mirror": {"sampling_ranks": [1, 2], "samples": 50, "exact_samples": 3}})
    checks = {c.name: c for c in mirror_checks(config, seed=3)}
    assert checks["random_samples_drawn"].passed
    assert checks["exact_identities_hold"].passed
    assert failed(checks.values()) == []


def test_mirror_checks_need_exact_samples():
    config = ScenarioConfig(data={"mirror": {"sampling_ranks": [1], "samples": 10, "exact_samples": 0}})
    checks = {c.name: c for c in mirror_checks(config, seed=0)}
    assert not checks["exact_identities_hold"].passed


def test_gh_suite_enforces_volume_and_stencil_floor():
    assert "volume_ratio_matches_prediction" in GH_SUITE
    assert "distortion_near_stencil_floor" in GH_SUITE
