import numpy as np
import pytest

from cli.verify import manufactured_potential
from core.collapse import schedule_check
from core.errors import CompatibilityError, NonConvergence, PreconditionError
from core.ma_solver import (
    MAProblem,
    SolverSettings,
    class_polynomial,
    continuation,
    determinant_consistency,
    limit_normalization_constant,
    manufactured_model,
    normalization_constant,
    solve,
)
from core.semiflat import reference_metric


@pytest.mark.parametrize("t", [0.5, 0.1, 0.01])
def test_family_a_constants(model_a, t):
    assert normalization_constant(model_a, t) == pytest.approx(1.0 + t, rel=1e-12)


def test_limit_constant(model_a, model_b):
    assert limit_normalization_constant(model_a) == pytest.approx(1.0, rel=1e-12)
    coeffs = class_polynomial(model_b)
    assert len(coeffs) == model_b.n + 1
    c0 = limit_normalization_constant(model_b)
    assert normalization_constant(model_b, 1e-6) == pytest.approx(c0, rel=1e-4)


def test_flat_product_is_already_ricci_flat(model_a):
    result = solve(MAProblem.build(model_a, 0.2))
    assert result.residual <= 1e-9
    assert result.iterations == 0
    assert np.max(np.abs(result.phi.values)) < 1e-12


def test_problem_validation(model_a):
    with pytest.raises(PreconditionError):
        MAProblem.build(model_a, 0.0)
    with pytest.raises(PreconditionError):
        solve(MAProblem.build(model_a, 0.2), settings=SolverSettings(tol=1e-13))


def test_periodic_compatibility(model_a):
    omega_t = model_a.omega_0() + reference_metric(model_a) * 0.2
    doubled = model_a.with_density(2.0 * omega_t.det())
    with pytest.raises(CompatibilityError):
        MAProblem.build(doubled, 0.2)


@pytest.mark.parametrize("which", ["model_a", "model_b"])
def test_manufactured_solution(which, request):
    model = request.getfixturevalue(which)
    t = 0.2
    phi_star = manufactured_potential(model, t)
    frame = model.frame()
    problem = MAProblem.build(manufactured_model(model, t, phi_star, frame), t, frame=frame)
    result = solve(problem)
    want, got = phi_star.values, result.phi.values
    if problem.periodic:
        want, got = want - np.max(want), got - np.max(got)
        assert np.max(result.phi.values) == pytest.approx(0.0, abs=1e-14)
    else:
        np.testing.assert_allclose(got[0], 0.0, atol=1e-14)
    np.testing.assert_allclose(got, want, atol=1e-7)
    assert result.residual_history[-1] <= 1e-9
    assert determinant_consistency(result) < 1e-8


def test_non_convergence_carries_partial(model_b):
    t = 0.2
    phi_star = manufactured_potential(model_b, t)
    problem = MAProblem.build(manufactured_model(model_b, t, phi_star), t)
    with pytest.raises(NonConvergence) as info:
        solve(problem, settings=SolverSettings(tol=1e-12, max_iter=1))
    partial = info.value.partial
    assert partial is not None
    assert partial.iterations == 1


def test_continuation_schedule_checks(model_a):
    assert continuation(model_a, []) == []
    with pytest.raises(PreconditionError):
        continuation(model_a, [0.1, 0.2])


def test_continuation_warm_starts(model_b):
    results = continuation(model_b, [0.2, 0.1])
    assert [r.t for r in results] == [0.2, 0.1]
    assert all(r.residual <= 1e-9 for r in results)
    for r in results:
        np.testing.assert_allclose(r.phi.values[0], 0.0, atol=1e-14)


def _fail_after(n_ok, monkeypatch):
    import core.ma_solver as ma

    calls = []
    real_solve = ma.solve

    def flaky(problem, init=None, settings=None):
        calls.append(problem.t)
        if len(calls) > n_ok:
            raise NonConvergence(f"stalled at t={problem.t}")
        return real_solve(problem, init=init, settings=settings)

    monkeypatch.setattr(ma, "solve", flaky)
    return calls


def test_continuation_returns_converged_prefix(model_b, monkeypatch):
    calls = _fail_after(1, monkeypatch)
    results = continuation(model_b, [0.2, 0.1, 0.05])
    assert [r.t for r in results] == [0.2]
    assert calls == [0.2, 0.1]
    check = schedule_check(results, [0.2, 0.1, 0.05])
    assert not check.passed
    assert schedule_check(results, [0.2]).passed


def test_continuation_first_failure_propagates(model_b, monkeypatch):
    _fail_after(0, monkeypatch)
    with pytest.raises(NonConvergence):
        continuation(model_b, [0.2, 0.1])
