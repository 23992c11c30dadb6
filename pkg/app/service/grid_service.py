from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from pydantic import ValidationError
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from app.core.config import BALANCE_TOL, MATRIX_CACHE_SIZE
from app.core.errors import GridError
from app.core.logger import setup_logger
from app.schema.Grid import FlowMatrices, Grid
from app.schema.RawCase import CapacityMode, CapacityRule, RawCase
from app.service.case_io_service import parse_case, resolve_case, synthesize_capacities

logger = setup_logger("app_logger")


def _cost_in_pu(cost: Sequence[float], base_mva: float) -> tuple[float, float, float]:
    """High-to-low MW coefficients -> (a, b, c0) over pu output."""
    padded = [0.0] * (3 - len(cost)) + list(cost)
    a, b, c0 = padded
    return a * base_mva ** 2, b * base_mva, c0


def _reference_bus(raw: RawCase, index: dict[int, int]) -> int:
    for bus in raw.buses:
        if bus.bus_type == 3:
            return index[bus.id]
    if raw.generators:
        largest = max(raw.generators, key=lambda g: g.p_max_mw)
        return index[largest.bus]
    return 0


def check_connected(n: int, line_from: np.ndarray, line_to: np.ndarray, bus_ids: Sequence[int]) -> None:
    adjacency = coo_matrix((np.ones(len(line_from)), (line_from, line_to)), shape=(n, n))
    count, labels = connected_components(adjacency, directed=False)
    if count > 1:
        components = [sorted(int(bus_ids[i]) for i in np.flatnonzero(labels == c)) for c in range(count)]
        raise GridError(f"network is disconnected into {count} components: {components}")


def build_grid(raw: RawCase, capacities_mw: Optional[Sequence[float]] = None) -> Grid:
    """Per-unit Grid from a parsed case. capacities_mw defaults to unlimited."""
    base = raw.base_mva
    bus_ids = tuple(b.id for b in raw.buses)
    index = {bus: i for i, bus in enumerate(bus_ids)}
    line_from = np.array([index[br.from_bus] for br in raw.branches], dtype=int)
    line_to = np.array([index[br.to_bus] for br in raw.branches], dtype=int)
    check_connected(len(bus_ids), line_from, line_to, bus_ids)

    if capacities_mw is None:
        caps = np.full(raw.m, np.inf)
    else:
        caps = np.asarray(capacities_mw, dtype=float) / base
        if caps.shape != (raw.m,):
            raise GridError(f"expected {raw.m} line capacities, got {caps.shape}")

    pg_given = [g.pg_mw for g in raw.generators]
    try:
        grid = Grid(
            name=raw.name,
            base_mva=base,
            bus_ids=bus_ids,
            line_from=line_from,
            line_to=line_to,
            reactance=np.array([br.x_pu for br in raw.branches], dtype=float),
            line_caps=caps,
            demand=np.array([b.pd_mw for b in raw.buses], dtype=float) / base,
            gen_bus=np.array([index[g.bus] for g in raw.generators], dtype=int),
            gen_pmin=np.array([g.p_min_mw for g in raw.generators], dtype=float) / base,
            gen_pmax=np.array([g.p_max_mw for g in raw.generators], dtype=float) / base,
            gen_cost=np.array([_cost_in_pu(g.cost, base) for g in raw.generators], dtype=float).reshape(-1, 3),
            gen_pg=None if any(p is None for p in pg_given) or not pg_given else np.array(pg_given) / base,
            ref_bus=_reference_bus(raw, index),
        )
    except ValidationError as e:
        raise GridError(str(e)) from e
    logger.debug(f"Built grid {grid.name}: n={grid.n}, m={grid.m}, generators={grid.n_gen}, ref bus {bus_ids[grid.ref_bus]}")
    return grid


def build_matrices(grid: Grid) -> FlowMatrices:
    """D, Y, A, A+ and B = Y D^T A+ for a connected grid."""
    n, m = grid.n, grid.m
    check_connected(n, grid.line_from, grid.line_to, grid.bus_ids)
    D = np.zeros((n, m))
    D[grid.line_from, np.arange(m)] = 1.0
    D[grid.line_to, np.arange(m)] = -1.0
    y = 1.0 / grid.reactance
    A = (D * y) @ D.T

    # A+ = (A + J/n)^-1 - J/n for a connected Laplacian.
    J = np.full((n, n), 1.0 / n)
    try:
        A_plus = np.linalg.inv(A + J) - J
    except np.linalg.LinAlgError as e:
        raise GridError(f"admittance matrix of {grid.name} is singular beyond its null vector") from e
    A_plus = (A_plus + A_plus.T) / 2

    residual = np.abs(A @ A_plus @ A - A).max(initial=0.0)
    if residual > 1e-9 * max(1.0, np.abs(A).max(initial=0.0)):
        raise GridError(f"pseudo-inverse check failed for {grid.name}: residual {residual:.3e}")

    B = (y[:, None] * D.T) @ A_plus
    for arr in (D, y, A, A_plus, B):
        arr.setflags(write=False)
    return FlowMatrices(D=D, y=y, A=A, A_plus=A_plus, B=B)


class _TopologyKey:
    """Hashes a grid by its fingerprint so that lru_cache can hold it."""

    __slots__ = ("grid", "fingerprint")

    def __init__(self, grid: Grid):
        self.grid = grid
        self.fingerprint = grid.fingerprint

    def __hash__(self) -> int:
        return hash(self.fingerprint)

    def __eq__(self, other) -> bool:
        return isinstance(other, _TopologyKey) and other.fingerprint == self.fingerprint


@lru_cache(maxsize=MATRIX_CACHE_SIZE)
def _cached_matrices(key: _TopologyKey) -> FlowMatrices:
    return build_matrices(key.grid)


def get_matrices(grid: Grid) -> FlowMatrices:
    """build_matrices, cached by network topology and reactances (least recently used evicted first)."""
    return _cached_matrices(_TopologyKey(grid))


def dc_power_flow(mat: FlowMatrices, p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    imbalance = float(p.sum())
    if abs(imbalance) > BALANCE_TOL:
        raise GridError(f"injection is unbalanced by {imbalance:.3e} pu")
    return mat.B @ p


def compute_base_flows(grid: Grid, mat: Optional[FlowMatrices] = None) -> np.ndarray:
    """
    Pre-attack DC flows in MW. Uses the case's generator outputs with the
    reference bus absorbing the imbalance; without outputs, an OPF with
    unlimited lines.
    """
    mat = mat or get_matrices(grid)
    if grid.gen_pg is not None:
        p = grid.gen_incidence @ grid.gen_pg - grid.demand
        p[grid.ref_bus] -= p.sum()
    else:
        # Imported here: dispatch depends on this module.
        from app.service.dispatch_service import solve_opf

        dispatch = solve_opf(grid.with_caps(np.full(grid.m, np.inf)), mat, grid.demand)
        if not dispatch.feasible:
            raise GridError(f"no base dispatch for {grid.name}: demand cannot be served")
        p = dispatch.p_g - grid.demand
    return dc_power_flow(mat, p) * grid.base_mva


def load_grid(path_or_name: str, rule: Optional[CapacityRule] = None) -> Grid:
    """Resolve, parse and build a grid with capacities from rule."""
    rule = rule or CapacityRule()
    name, text = resolve_case(path_or_name)
    raw = parse_case(text, name=name)
    if rule.mode == CapacityMode.GIVEN:
        caps = synthesize_capacities(raw, rule)
    else:
        uncapped = build_grid(raw)
        caps = synthesize_capacities(raw, rule, compute_base_flows(uncapped))
    grid = build_grid(raw, caps)
    logger.info(f"Loaded grid {grid.name} with capacity rule {rule.mode.value}")
    return grid
