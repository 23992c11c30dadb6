import itertools

import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.core.errors import DroopError, ReserveInfeasibleError, ShortfallError
from app.schema.PrimaryResponse import AttackBounds
from app.service.grid_service import get_matrices
from app.service.primary_response_service import (
    build_saturation_profile,
    default_droop,
    droop_vectors,
    evaluate_profile,
    flow_change_upper_bound,
    make_droop,
    max_flow_change_linear,
    max_flow_change_saturated,
    reserve_limits,
    saturation_response,
    simulate_attack,
)
from tests.conftest import INF, make_grid, make_triangle, random_grid


def _ramp_oracle(inv_R, headroom, s):
    """Event-driven ramp: active generators share the remaining change by 1/R until they saturate."""
    out = np.zeros(len(inv_R))
    active = [i for i in range(len(inv_R)) if inv_R[i] > 0]
    remaining = s
    while remaining > 1e-15 and active:
        total = sum(inv_R[i] for i in active)
        # change left before the first active generator saturates
        to_next = min((headroom[i] - out[i]) * total / inv_R[i] for i in active)
        step = min(to_next, remaining)
        for i in active:
            out[i] += step * inv_R[i] / total
        remaining -= step
        active = [i for i in active if headroom[i] - out[i] > 1e-15]
    return out


def _two_gen_grid(pmax=(1.0, 5.0)):
    return make_grid([0.0, 0.0], [(1, 0.0, pmax[0], (1.0, 0.0)), (2, 0.0, pmax[1], (1.0, 0.0))],
                     [(1, 2, 1.0, INF)])


def test_droop_vectors():
    v, W = droop_vectors(make_droop([1.0, 1.0, 0.0]))
    assert_allclose(v, [0.5, 0.5, 0.0])
    assert_allclose(W[:, 2], [0.5, 0.5, -1.0])
    v, W = droop_vectors(np.array([0.0, 1.0, 0.0]))
    assert_allclose(v, [0.0, 1.0, 0.0])
    assert_allclose(W, v[:, None] - np.eye(3))
    # R = (1, 2)
    v, _ = droop_vectors(make_droop([1.0, 0.5]))
    assert_allclose(v, [2 / 3, 1 / 3])


def test_droop_needs_a_positive_gain():
    with pytest.raises(DroopError):
        make_droop([0.0, 0.0])
    with pytest.raises(DroopError):
        make_droop([1.0, -1.0])


def test_default_droop_overrides(tri3):
    model = default_droop(tri3)
    assert_allclose(model.shares, [2 / 3, 1 / 3, 0.0])
    model = default_droop(tri3, {2: 1.0})
    assert_allclose(model.inv_R, [1.0, 1.0, 0.0])
    with pytest.raises(DroopError, match="no generation"):
        default_droop(tri3, {3: 1.0})
    with pytest.raises(DroopError, match="unknown bus"):
        default_droop(tri3, {7: 1.0})


def test_linear_flow_change_on_triangle():
    grid = make_triangle(generators=[(1, 0.0, 1.0, (1.0, 0.0)), (2, 0.0, 1.0, (1.0, 0.0))])
    mat = get_matrices(grid)
    model = make_droop([1.0, 1.0, 0.0])
    bounds = AttackBounds(delta_max=np.array([0.0, 0.0, 0.1]))
    assert_allclose(max_flow_change_linear(mat, model, bounds), [0.0, 0.05, 0.05], atol=1e-12)
    zero = AttackBounds(delta_max=np.zeros(3))
    assert_allclose(max_flow_change_linear(mat, model, zero), np.zeros(3))


def test_linear_flow_change_matches_sign_patterns(rng):
    for _ in range(5):
        grid = random_grid(rng, n=6)
        mat = get_matrices(grid)
        model = default_droop(grid)
        delta = rng.uniform(0.0, 0.3, size=grid.n)
        bounds = AttackBounds(delta_max=delta)
        _, W = droop_vectors(model)
        sens = mat.B @ W
        brute = np.zeros(grid.m)
        for signs in itertools.product((-1.0, 1.0), repeat=grid.n):
            brute = np.maximum(brute, np.abs(sens @ (np.array(signs) * delta)))
        assert_allclose(max_flow_change_linear(mat, model, bounds), brute, atol=1e-8)


def test_reserve_limits():
    model = make_droop([1.0, 1.0])
    bounds = AttackBounds(delta_max=np.array([0.5, 0.5]))
    lo, hi = reserve_limits(np.zeros(2), np.full(2, 2.0), model, bounds)
    assert_allclose(lo, [0.5, 0.5])
    assert_allclose(hi, [1.5, 1.5])
    lo, hi = reserve_limits(np.zeros(2), np.full(2, 2.0), model, AttackBounds(delta_max=np.zeros(2)))
    assert_allclose(lo, [0.0, 0.0])
    assert_allclose(hi, [2.0, 2.0])
    with pytest.raises(ReserveInfeasibleError) as err:
        reserve_limits(np.zeros(2), np.array([0.4, 2.0]), model, bounds)
    assert err.value.buses == [0]


def test_saturation_response_two_generators():
    grid = _two_gen_grid()
    model = make_droop([1.0, 1.0])
    p_g = np.zeros(2)
    assert_allclose(saturation_response(p_g, grid, model, 4.0), [1.0, 3.0])
    assert_allclose(saturation_response(p_g, grid, model, 0.0), [0.0, 0.0])
    # below the first breakpoint the response is plain droop sharing
    assert_allclose(saturation_response(p_g, grid, model, 1.0), [0.5, 0.5])
    with pytest.raises(ShortfallError):
        saturation_response(p_g, grid, model, 6.5)


def test_saturation_response_mirrors_decreases():
    grid = _two_gen_grid()
    model = make_droop([1.0, 1.0])
    assert_allclose(saturation_response(np.array([1.0, 5.0]), grid, model, -4.0), [-1.0, -3.0])


def test_profile_breakpoints():
    grid = _two_gen_grid()
    profile = build_saturation_profile(np.zeros(2), grid.pg_min, grid.pg_max, make_droop([1.0, 1.0]))
    assert_allclose(profile.S, [2.0, 6.0])
    assert profile.total_headroom == pytest.approx(6.0)
    with pytest.raises(ValueError):
        evaluate_profile(profile, -1.0)


def test_saturation_response_matches_ramp_simulation(rng):
    for _ in range(50):
        n = int(rng.integers(2, 6))
        inv_R = rng.uniform(0.2, 3.0, size=n)
        headroom = rng.uniform(0.0, 2.0, size=n)
        profile = build_saturation_profile(np.zeros(n), np.zeros(n), headroom, make_droop(inv_R))
        s = float(rng.uniform(0.0, headroom.sum()))
        assert_allclose(evaluate_profile(profile, s), _ramp_oracle(inv_R, headroom, s), atol=1e-9)


def test_saturated_equals_linear_far_from_limits():
    grid = make_triangle(generators=[(1, 0.0, 2.0, (1.0, 0.0)), (2, 0.0, 2.0, (1.0, 0.0))])
    mat = get_matrices(grid)
    model = default_droop(grid)
    bounds = AttackBounds(delta_max=np.array([0.0, 0.0, 0.1]))
    p_g = np.array([0.5, 0.5, 0.0])
    assert_allclose(max_flow_change_saturated(mat, grid, model, p_g, bounds),
                    max_flow_change_linear(mat, model, bounds), atol=1e-6)
    zero = AttackBounds(delta_max=np.zeros(3))
    assert_allclose(max_flow_change_saturated(mat, grid, model, p_g, zero), np.zeros(3))


def test_saturated_with_exhausted_generator_matches_simulation():
    # Generator 1 has no headroom, so increases are answered by generator 2 alone.
    grid = make_triangle(generators=[(1, 0.0, 0.5, (1.0, 0.0)), (2, 0.0, 2.0, (1.0, 0.0))])
    mat = get_matrices(grid)
    model = default_droop(grid)
    p_g = np.array([0.5, 0.5, 0.0])
    bounds = AttackBounds(delta_max=np.array([0.0, 0.0, 0.2]))
    base = mat.B @ (p_g - grid.demand)
    worst = np.zeros(grid.m)
    for x in np.linspace(-0.2, 0.2, 401):
        flows = simulate_attack(p_g, grid, mat, model, np.array([0.0, 0.0, x]))
        worst = np.maximum(worst, np.abs(flows - base))
    assert_allclose(max_flow_change_saturated(mat, grid, model, p_g, bounds), worst, atol=1e-6)


def _saturation_totals(inv_R, room):
    """Total demand changes at which each responding generator reaches its limit."""
    active = inv_R > 0
    r, h = inv_R[active], room[active]
    return [float(np.minimum(h, r * level).sum()) for level in h / r]


def _worst_flow_change_by_enumeration(p_g, grid, mat, model, bounds):
    """
    Max |flow change| over the attack box. The flow change is linear between
    saturation points of the total change, so the maximum sits on a box
    corner or where a box edge crosses one of those totals.
    """
    attacked = np.flatnonzero((bounds.dev_up > 0) | (bounds.dev_down > 0))
    lo, hi = -bounds.dev_down[attacked], bounds.dev_up[attacked]
    kinks = {0.0}
    kinks.update(_saturation_totals(model.inv_R, grid.pg_max - p_g))
    kinks.update(-s for s in _saturation_totals(model.inv_R, p_g - grid.pg_min))
    base = mat.B @ (p_g - grid.demand)
    worst = np.zeros(grid.m)

    def visit(x):
        attack = np.zeros(grid.n)
        attack[attacked] = x
        np.maximum(worst, np.abs(simulate_attack(p_g, grid, mat, model, attack) - base), out=worst)

    for corner in itertools.product((False, True), repeat=len(attacked)):
        x = np.where(corner, hi, lo)
        visit(x)
        for j in range(len(attacked)):
            rest = x.sum() - x[j]
            for total in kinks:
                if lo[j] < total - rest < hi[j]:
                    y = x.copy()
                    y[j] = total - rest
                    visit(y)
    return worst


def test_saturated_matches_enumeration_on_random_grids(rng):
    for _ in range(6):
        n = int(rng.integers(4, 9))
        grid = random_grid(rng, n=n, extra_lines=2, n_gen=int(rng.integers(1, 4)))
        # uneven loading so that generators saturate one after another
        p_g = grid.pg_max * rng.uniform(0.3, 0.95, size=n)
        grid = grid.with_demand(grid.demand * p_g.sum() / grid.demand.sum())
        mat = get_matrices(grid)
        model = default_droop(grid)
        reserve = min(float((grid.pg_max - p_g).sum()), float(p_g.sum()))
        alpha = float(rng.uniform(0.5, 0.95)) * reserve / float(grid.demand.sum())
        bounds = AttackBounds.from_alpha(grid.demand, alpha)
        assert_allclose(max_flow_change_saturated(mat, grid, model, p_g, bounds),
                        _worst_flow_change_by_enumeration(p_g, grid, mat, model, bounds), atol=1e-6)


def test_saturated_between_extreme_corners_and_upper_bound(rng):
    grid = make_triangle(demand=(0.0, 0.6, 0.6),
                         generators=[(1, 0.0, 1.0, (1.0, 0.0)), (2, 0.0, 0.8, (1.0, 0.0))])
    mat = get_matrices(grid)
    model = default_droop(grid)
    bounds = AttackBounds(delta_max=np.array([0.0, 0.2, 0.2]))
    upper = flow_change_upper_bound(mat, grid, bounds)
    for _ in range(5):
        share = rng.uniform(0.2, 0.8)
        p_g = np.array([1.2 * share, 1.2 * (1 - share), 0.0])
        p_g = np.minimum(p_g, grid.pg_max)
        p_g[0] = 1.2 - p_g[1]
        saturated = max_flow_change_saturated(mat, grid, model, p_g, bounds)
        base = mat.B @ (p_g - grid.demand)
        for corner in itertools.product((-0.2, 0.2), repeat=2):
            flows = simulate_attack(p_g, grid, mat, model, np.array([0.0, *corner]))
            assert np.all(np.abs(flows - base) <= saturated + 1e-9)
        assert np.all(saturated <= upper + 1e-9)


def test_upper_bound_on_triangle():
    grid = make_triangle(generators=[(1, 0.0, 1.0, (1.0, 0.0)), (2, 0.0, 1.0, (1.0, 0.0))])
    mat = get_matrices(grid)
    bounds = AttackBounds(delta_max=np.array([0.0, 0.0, 0.5]))
    assert_allclose(flow_change_upper_bound(mat, grid, bounds), [1 / 6, 1 / 3, 1 / 3], atol=1e-7)
    assert_allclose(flow_change_upper_bound(mat, grid, AttackBounds(delta_max=np.zeros(3))), np.zeros(3),
                    atol=1e-9)


def test_simulate_attack_without_attack_keeps_flows(tri3):
    mat = get_matrices(tri3)
    p_g = np.array([1.0, 0.0, 0.0])
    assert_allclose(simulate_attack(p_g, tri3, mat, default_droop(tri3), np.zeros(3)),
                    mat.B @ (p_g - tri3.demand), atol=1e-12)
