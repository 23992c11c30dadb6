import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.core.config import FLOW_CONSERVATION_TOL, MATRIX_CACHE_SIZE
from app.core.errors import GridError
from app.schema.RawCase import CapacityMode, CapacityRule
from app.service.grid_service import (
    _cached_matrices,
    build_matrices,
    compute_base_flows,
    dc_power_flow,
    get_matrices,
    load_grid,
)
from tests.conftest import INF, make_grid, make_triangle, random_grid


def test_two_bus_closed_form():
    grid = make_grid([0.0, 1.0], [(1, 0.0, 2.0, (1.0, 0.0))], [(1, 2, 1.0, INF)])
    mat = build_matrices(grid)
    A = np.array([[1.0, -1.0], [-1.0, 1.0]])
    assert_allclose(mat.A, A)
    assert_allclose(mat.A_plus, A / 4, atol=1e-12)
    assert_allclose(mat.B, [[0.5, -0.5]], atol=1e-12)


def test_triangle_flows():
    mat = build_matrices(make_triangle())
    # lines (1,2), (2,3), (1,3)
    assert_allclose(dc_power_flow(mat, np.array([1.0, 0.0, -1.0])), [1 / 3, 1 / 3, 2 / 3], atol=1e-12)
    assert_allclose(dc_power_flow(mat, np.array([0.5, 0.5, -1.0])), [0.0, 0.5, 0.5], atol=1e-12)
    assert_allclose(dc_power_flow(mat, np.zeros(3)), np.zeros(3), atol=1e-15)


def test_unbalanced_injection_rejected():
    mat = build_matrices(make_triangle())
    with pytest.raises(GridError, match="unbalanced"):
        dc_power_flow(mat, np.array([1.0, 0.0, 0.0]))


def test_disconnected_grid_lists_components():
    with pytest.raises(GridError, match=r"\[\[1, 2\], \[3, 4\]\]"):
        make_grid([0.0, 1.0, 0.0, 1.0], [(1, 0.0, 2.0, (1.0, 0.0))],
                  [(1, 2, 1.0, INF), (3, 4, 1.0, INF)])


def test_pseudo_inverse_and_conservation_on_random_grids(rng):
    for trial in range(100):
        grid = random_grid(rng, n=int(rng.integers(3, 9)), extra_lines=int(rng.integers(0, 4)))
        mat = build_matrices(grid)
        assert np.abs(mat.A @ mat.A_plus @ mat.A - mat.A).max() < 1e-9
        p = rng.normal(size=grid.n)
        p -= p.mean()
        flows = dc_power_flow(mat, p)
        # net outflow at each bus equals its injection
        assert np.abs(mat.D @ flows - p).max() < FLOW_CONSERVATION_TOL


def test_matrices_are_cached_per_topology():
    grid = make_triangle()
    assert get_matrices(grid) is get_matrices(make_triangle(caps=(0.5, 0.5, 0.5)))


def test_matrix_cache_is_bounded(rng):
    for i in range(MATRIX_CACHE_SIZE + 8):
        get_matrices(random_grid(rng, n=4, extra_lines=1, name=f"g{i}"))
    assert _cached_matrices.cache_info().currsize <= MATRIX_CACHE_SIZE
    grid = make_triangle()
    assert get_matrices(grid) is get_matrices(grid)


def test_matrices_are_read_only():
    mat = build_matrices(make_triangle())
    with pytest.raises(ValueError):
        mat.B[0, 0] = 1.0


def test_load_builtin_tri3(tri3):
    assert tri3.n == 3 and tri3.m == 3 and tri3.n_gen == 2
    assert tri3.ref_bus == 0
    assert np.all(np.isinf(tri3.line_caps))
    assert_allclose(tri3.pg_max, [1.0, 0.5, 0.0])
    assert_allclose(tri3.gen_cost, [[0.0, 1.0, 0.0], [0.0, 2.0, 0.0]])


def test_five_bus_base_flows_use_given_outputs(five_bus):
    flows = compute_base_flows(five_bus)
    p = five_bus.gen_incidence @ five_bus.gen_pg - five_bus.demand
    p[five_bus.ref_bus] -= p.sum()
    assert_allclose(flows, dc_power_flow(get_matrices(five_bus), p) * 100.0)


def test_ieee14_needs_synthesized_capacities():
    grid = load_grid("ieee14")
    assert (grid.n, grid.m, grid.n_gen) == (14, 20, 5)
    assert np.all(np.isinf(grid.line_caps))
    capped = load_grid("ieee14", CapacityRule(mode=CapacityMode.UNIFORM_MAX))
    base = compute_base_flows(grid)
    assert_allclose(capped.line_caps * 100.0, np.full(20, 1.1 * np.abs(base).max()))


def test_base_flows_without_outputs_use_uncapped_opf(tri3):
    # tri3 has no generator outputs; the cheap generator serves the whole demand
    assert tri3.gen_pg is None
    assert_allclose(compute_base_flows(tri3), [1 / 3, 1 / 3, 2 / 3], atol=1e-7)
