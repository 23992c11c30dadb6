import itertools
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.core.errors import BruteForceLimitError, ControllerConditionError, DispatchError
from app.schema.Controller import ControllerKind, ControllerSpec, DemandEnvelope
from app.service.grid_service import get_matrices
from app.service.secondary_control_service import (
    apply_controller,
    check_controller_limits,
    controller_max_flows,
    envelope_from_alpha,
    find_uncontrollable_extreme,
    min_shortfall,
    synthesize,
    synthesize_beta,
    synthesize_gamma_beta,
    verify_bruteforce,
    verify_top_k,
    verify_with_controller,
)
from tests.conftest import INF, make_triangle, random_grid


def _mixed(cap):
    return make_triangle(caps=(INF, cap, INF), demand=(0.0, 1.0, 1.0),
                         generators=[(1, 0.0, 10.0, (1.0, 0.0))], name="mixed")


def test_min_shortfall_servable(tri3):
    result = min_shortfall(tri3, get_matrices(tri3), tri3.demand)
    assert result.controllable
    assert result.total_shortfall == pytest.approx(0.0, abs=1e-9)


def test_min_shortfall_limited_by_lines():
    grid = make_triangle(caps=(INF, 0.5, 0.5), demand=(0.0, 0.0, 1.2))
    result = min_shortfall(grid, get_matrices(grid), grid.demand)
    assert not result.controllable
    assert result.total_shortfall == pytest.approx(0.2, abs=1e-7)
    assert_allclose(result.witness_demand, grid.demand)


def test_min_shortfall_minimum_generation_too_high():
    grid = make_triangle(generators=[(1, 2.0, 3.0, (1.0, 0.0))])
    result = min_shortfall(grid, get_matrices(grid), grid.demand)
    assert result.controllable is False
    assert math.isinf(result.total_shortfall)


def test_min_shortfall_rejects_negative_demand(tri3):
    with pytest.raises(DispatchError):
        min_shortfall(tri3, get_matrices(tri3), np.array([0.0, -0.5, 1.0]))


def test_bruteforce_finds_mixed_corner(mixed_extreme_grid):
    env = envelope_from_alpha(mixed_extreme_grid.demand, 0.5)
    result = verify_bruteforce(mixed_extreme_grid, get_matrices(mixed_extreme_grid), env)
    assert result.controllable is False
    assert result.points_checked == 4
    assert result.total_shortfall == pytest.approx(0.4, abs=1e-7)
    assert result.witness_demand[1] != result.witness_demand[2]
    assert result.verdict.startswith("uncontrollable (witness=")


def test_bruteforce_controllable_when_cap_allows():
    grid = _mixed(0.4)
    result = verify_bruteforce(grid, get_matrices(grid), envelope_from_alpha(grid.demand, 0.5), progress=True)
    assert result.controllable and result.verdict == "controllable"


def test_bruteforce_without_varying_buses(tri3):
    env = envelope_from_alpha(tri3.demand, 0.0)
    result = verify_bruteforce(tri3, get_matrices(tri3), env)
    assert result.controllable and result.points_checked == 1
    assert result.method == "bruteforce"


def test_bruteforce_limit(mixed_extreme_grid):
    env = envelope_from_alpha(mixed_extreme_grid.demand, 0.5)
    with pytest.raises(BruteForceLimitError, match="beta or gamma-beta"):
        verify_bruteforce(mixed_extreme_grid, get_matrices(mixed_extreme_grid), env, limit=1)


def test_envelope_rejects_negative_alpha(tri3):
    with pytest.raises(ControllerConditionError):
        envelope_from_alpha(tri3.demand, -0.1)


def test_beta_controller_on_mixed_grid(mixed_extreme_grid):
    mat = get_matrices(mixed_extreme_grid)
    env = envelope_from_alpha(mixed_extreme_grid.demand, 0.5)
    spec = synthesize_beta(mixed_extreme_grid, mat, env)
    assert_allclose(spec.beta, [1.0, 0.0, 0.0], atol=1e-9)
    assert spec.eta == pytest.approx(5 / 3, rel=1e-6)
    assert not spec.reliable
    result = verify_with_controller(mixed_extreme_grid, mat, env, ControllerKind.BETA)
    assert result.controllable is None
    assert result.verdict.startswith("inconclusive (eta=")

    grid = _mixed(0.4)
    result = verify_with_controller(grid, get_matrices(grid), env, "beta")
    assert result.controllable
    assert result.eta == pytest.approx(5 / 6, rel=1e-6)


def test_controller_max_flows_match_enumeration(five_bus):
    mat = get_matrices(five_bus)
    env = envelope_from_alpha(five_bus.demand, 0.2)
    for kind in ControllerKind:
        spec = synthesize(five_bus, mat, env, kind)
        worst = np.zeros(five_bus.m)
        varying = env.varying
        for corner in itertools.product((0, 1), repeat=len(varying)):
            demand = np.array(env.pd_min)
            demand[varying] = np.where(np.array(corner) == 1, env.pd_max[varying], env.pd_min[varying])
            p_g = apply_controller(spec, demand, env, five_bus)
            worst = np.maximum(worst, np.abs(mat.B @ (p_g - demand)))
        assert_allclose(controller_max_flows(mat, spec, env), worst, atol=1e-9)
        finite = np.isfinite(five_bus.line_caps)
        assert np.max(worst[finite] / five_bus.line_caps[finite]) == pytest.approx(spec.eta, rel=1e-5)


def test_gamma_beta_never_worse_than_beta(five_bus):
    mat = get_matrices(five_bus)
    for alpha in (0.05, 0.2, 0.4):
        env = envelope_from_alpha(five_bus.demand, alpha)
        gb = synthesize_gamma_beta(five_bus, mat, env)
        try:
            b = synthesize_beta(five_bus, mat, env)
        except ControllerConditionError:
            continue
        assert gb.eta <= b.eta + 1e-6


def test_reliable_controller_implies_bruteforce(five_bus):
    mat = get_matrices(five_bus)
    for alpha in (0.05, 0.2, 0.4, 0.6):
        env = envelope_from_alpha(five_bus.demand, alpha)
        if verify_with_controller(five_bus, mat, env).controllable:
            assert verify_bruteforce(five_bus, mat, env).controllable


def test_apply_controller(mixed_extreme_grid):
    env = envelope_from_alpha(mixed_extreme_grid.demand, 0.5)
    beta = ControllerSpec(kind=ControllerKind.BETA, beta=np.array([1.0, 0.0, 0.0]))
    assert_allclose(apply_controller(beta, np.array([0.0, 1.2, 0.8]), env), [2.0, 0.0, 0.0])
    gamma_beta = ControllerSpec(kind=ControllerKind.GAMMA_BETA, beta=np.array([0.0, 1.0, 0.0]),
                                gamma=np.array([1.0, 0.0, 0.0]))
    assert_allclose(apply_controller(gamma_beta, np.array([0.0, 1.5, 1.0]), env), [2.0, 0.5, 0.0])
    with pytest.raises(ControllerConditionError, match="outside the envelope"):
        apply_controller(beta, np.array([0.0, 2.0, 1.0]), env)


def test_controller_limits_checked():
    grid = make_triangle(demand=(0.0, 1.0, 1.0), generators=[(1, 0.0, 2.5, (1.0, 0.0))])
    env = envelope_from_alpha(grid.demand, 0.5)
    spec = ControllerSpec(kind=ControllerKind.BETA, beta=np.array([1.0, 0.0, 0.0]))
    with pytest.raises(ControllerConditionError, match="upper envelope total"):
        check_controller_limits(grid, spec, env)
    result = verify_with_controller(grid, get_matrices(grid), env, ControllerKind.BETA)
    assert result.controllable is None and math.isinf(result.eta)


def test_controller_spec_validation():
    with pytest.raises(ValueError):
        ControllerSpec(kind=ControllerKind.BETA, beta=np.array([0.5, 0.4]))
    with pytest.raises(ValueError):
        ControllerSpec(kind=ControllerKind.GAMMA_BETA, beta=np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        DemandEnvelope(pd_min=np.array([1.0]), pd_max=np.array([0.5]))


def test_top_k_is_approximate(mixed_extreme_grid):
    env = envelope_from_alpha(mixed_extreme_grid.demand, 0.5)
    result = verify_top_k(mixed_extreme_grid, get_matrices(mixed_extreme_grid), env, k=1)
    # one bus pinned at its midpoint hides the mixed corner
    assert result.controllable and result.approximate
    assert result.verdict == "controllable (approximate)"
    assert result.method == "top-k"
    exact = verify_top_k(mixed_extreme_grid, get_matrices(mixed_extreme_grid), env, k=2)
    assert exact.controllable is False


def test_partial_search(mixed_extreme_grid, tri3):
    env = envelope_from_alpha(mixed_extreme_grid.demand, 0.5)
    found = find_uncontrollable_extreme(mixed_extreme_grid, get_matrices(mixed_extreme_grid), env, max_points=50)
    assert found.controllable is False
    assert found.method == "partial-search"
    assert 2 <= found.points_checked <= 50

    env3 = envelope_from_alpha(tri3.demand, 0.5)
    nothing = find_uncontrollable_extreme(tri3, get_matrices(tri3), env3, max_points=10)
    assert nothing.controllable is None
    assert nothing.points_checked == 10
    assert nothing.verdict.startswith("inconclusive")


def test_reliable_controller_has_no_false_positives(rng):
    for _ in range(50):
        grid = random_grid(rng, n=4, extra_lines=1, capped=True)
        mat = get_matrices(grid)
        env = envelope_from_alpha(grid.demand, float(rng.uniform(0.05, 0.5)))
        if verify_with_controller(grid, mat, env).controllable:
            assert verify_bruteforce(grid, mat, env).controllable
