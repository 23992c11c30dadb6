from typing import Optional, Union

import numpy as np
from pydantic import ValidationError

from app.core.errors import DispatchError, DroopError, ReserveInfeasibleError, ShortfallError
from app.core.logger import setup_logger
from app.core.parallel import parallel_map
from app.schema.Grid import FlowMatrices, Grid
from app.schema.LinearProgram import LpStatus, Relation, Sense
from app.schema.PrimaryResponse import AttackBounds, DroopModel, SaturationProfile
from app.service.lp_service import LpBuilder, solve

logger = setup_logger("app_logger")

LIMIT_TOL = 1e-7


def make_droop(inv_R: np.ndarray) -> DroopModel:
    try:
        return DroopModel(inv_R=np.asarray(inv_R, dtype=float))
    except ValidationError as e:
        raise DroopError(f"invalid droop gains: {e.errors()[0]['msg']}") from e


def default_droop(grid: Grid, overrides: Optional[dict[int, float]] = None) -> DroopModel:
    """
    1/R_i proportional to the bus generation capacity (1/R_i = p_max_i in pu).
    overrides maps bus id -> R and replaces the default gain of that bus.
    """
    inv_R = np.array(grid.pg_max, dtype=float)
    index = {bus: i for i, bus in enumerate(grid.bus_ids)}
    for bus, r in (overrides or {}).items():
        if bus not in index:
            raise DroopError(f"droop override for unknown bus {bus}")
        if grid.pg_max[index[bus]] <= 0:
            raise DroopError(f"droop override for bus {bus} which has no generation")
        if r <= 0:
            raise DroopError(f"droop R for bus {bus} must be positive")
        inv_R[index[bus]] = 1.0 / r
    return make_droop(inv_R)


def droop_vectors(model: Union[DroopModel, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """
    Returns (v, W): v is the common response vector (v_j = (1/R_j) / sum 1/R),
    column i of W is w_i = v - e_i.
    """
    if not isinstance(model, DroopModel):
        model = make_droop(model)
    v = model.shares
    W = v[:, None] - np.eye(len(v))
    return v, W


def max_flow_change_linear(mat: FlowMatrices, model: DroopModel, bounds: AttackBounds) -> np.ndarray:
    """Worst-case |flow change| per line with unsaturated droop response."""
    _, W = droop_vectors(model)
    sens = mat.B @ W
    up, down = bounds.dev_up, bounds.dev_down
    towards = np.maximum(sens * up, -sens * down).sum(axis=1)
    away = np.maximum(-sens * up, sens * down).sum(axis=1)
    return np.maximum(towards, away)


def reserve_limits(pg_min: np.ndarray, pg_max: np.ndarray, model: DroopModel,
                   bounds: AttackBounds) -> tuple[np.ndarray, np.ndarray]:
    """Per-bus generation interval that keeps droop reserve for the whole attack budget."""
    shares = model.shares
    lo = pg_min + shares * bounds.total_down
    hi = pg_max - shares * bounds.total_up
    empty = np.flatnonzero(lo > hi + LIMIT_TOL)
    if empty.size:
        raise ReserveInfeasibleError(
            f"reserve limits leave an empty interval at bus indices {empty.tolist()}", buses=empty.tolist())
    return lo, np.maximum(hi, lo)


def build_saturation_profile(p_g: np.ndarray, pg_min: np.ndarray, pg_max: np.ndarray,
                             model: DroopModel, direction: int = 1) -> SaturationProfile:
    """
    Piecewise-linear response to a total demand change. direction=1 ramps
    towards p_max, direction=-1 is the mirrored ramp towards p_min.
    """
    if direction not in (1, -1):
        raise ValueError("direction must be 1 or -1")
    n = len(p_g)
    room = pg_max - p_g if direction == 1 else p_g - pg_min
    if np.any(room < -LIMIT_TOL):
        raise DispatchError("dispatch lies outside the generator limits")
    room = np.maximum(room, 0.0)

    active = np.flatnonzero(model.inv_R > 0)
    r = model.inv_R[active]
    h = room[active]
    t = h / r
    order_local = np.argsort(t, kind="stable")
    order = active[order_local]
    r_s, h_s, t_s = r[order_local], h[order_local], t[order_local]
    k = len(order)

    cum_h = np.concatenate([[0.0], np.cumsum(h_s)])
    tail_r = np.concatenate([np.cumsum(r_s[::-1])[::-1], [0.0]])
    S = cum_h[1:] + t_s * tail_r[1:]
    S = np.maximum.accumulate(S)

    offsets = np.zeros((k, n))
    slopes = np.zeros((k, n))
    for z in range(k):
        saturated, moving = order[:z], order[z:]
        offsets[z, saturated] = room[saturated]
        share = r_s[z:] / tail_r[z]
        slopes[z, moving] = share
        offsets[z, moving] = -share * cum_h[z]
    return SaturationProfile(direction=direction, order=order, t=t_s, S=S,
                             offsets=offsets, slopes=slopes, headroom=room)


def evaluate_profile(profile: SaturationProfile, s: float) -> np.ndarray:
    """Per-bus output change for a total demand change of magnitude s >= 0."""
    if s < 0:
        raise ValueError("evaluate_profile takes the magnitude of the demand change")
    if s > profile.total_headroom + LIMIT_TOL:
        raise ShortfallError(
            f"demand change {s:.6g} exceeds the available reserve {profile.total_headroom:.6g}")
    if profile.n_regions == 0:
        return np.zeros_like(profile.headroom)
    z = min(int(np.searchsorted(profile.S, s, side="left")), profile.n_regions - 1)
    change = profile.offsets[z] + profile.slopes[z] * s
    change = np.clip(change, 0.0, profile.headroom)
    return profile.direction * change


def saturation_response(p_g: np.ndarray, grid: Grid, model: DroopModel, s: float) -> np.ndarray:
    """
    Per-bus generation change of the droop response to a total demand
    change s, with generators saturating at their limits. Negative s is a
    demand decrease, answered by the mirrored profile.
    """
    direction = 1 if s >= 0 else -1
    profile = build_saturation_profile(p_g, grid.pg_min, grid.pg_max, model, direction)
    return evaluate_profile(profile, abs(s))


def simulate_attack(p_g: np.ndarray, grid: Grid, mat: FlowMatrices, model: DroopModel,
                    delta_p_d: np.ndarray) -> np.ndarray:
    """Post-attack flows: droop response with saturation, then DC flow."""
    response = saturation_response(p_g, grid, model, float(np.sum(delta_p_d)))
    injection = p_g + response - grid.demand - delta_p_d
    return mat.B @ injection


def _region_lp(mat: FlowMatrices, k: int, profile: SaturationProfile, z: int, s_lo: float, s_hi: float,
               up: np.ndarray, down: np.ndarray) -> float:
    """Max |flow change| on line k for total changes in [s_lo, s_hi] inside region z."""
    d = profile.direction
    b = mat.B[k]
    const = float(b @ (d * profile.offsets[z]))
    coef = float(b @ profile.slopes[z]) - b
    best = 0.0
    for orientation in (1.0, -1.0):
        builder = LpBuilder(label=f"sat_line{k}_dir{d}_z{z}")
        dp = builder.add_variables("dpd", len(b), lower=-down, upper=up)
        ones = np.ones((1, len(b)))
        if d == 1:
            builder.add_rows([(dp, ones)], Relation.GE, s_lo)
            builder.add_rows([(dp, ones)], Relation.LE, s_hi)
        else:
            builder.add_rows([(dp, ones)], Relation.LE, -s_lo)
            builder.add_rows([(dp, ones)], Relation.GE, -s_hi)
        builder.set_objective([(dp, orientation * coef)], Sense.MAX)
        result = solve(builder.build())
        if result.status == LpStatus.OPTIMAL:
            best = max(best, orientation * const + result.objective_value)
        elif result.status == LpStatus.UNBOUNDED:
            raise DispatchError(f"region LP for line {k} is unbounded")
    return best


def max_flow_change_saturated(mat: FlowMatrices, grid: Grid, model: DroopModel, p_g: np.ndarray,
                              bounds: AttackBounds, workers: Optional[int] = None) -> np.ndarray:
    """
    Worst-case |flow change| per line under droop response with generator
    saturation, for demand increases and decreases. One LP per line,
    saturation region, direction and flow orientation.
    """
    up, down = bounds.dev_up, bounds.dev_down
    jobs = []
    for direction, budget in ((1, bounds.total_up), (-1, bounds.total_down)):
        if budget <= 0:
            continue
        profile = build_saturation_profile(p_g, grid.pg_min, grid.pg_max, model, direction)
        cap = min(budget, profile.total_headroom)
        if budget > profile.total_headroom + LIMIT_TOL:
            logger.warning(
                f"Attack budget {budget:.6g} pu ({'increase' if direction == 1 else 'decrease'}) exceeds the "
                f"reserve {profile.total_headroom:.6g} pu; worst case capped at the reserve")
        for z in range(profile.n_regions):
            s_lo, s_hi = profile.region_bounds(z)
            if s_lo > cap:
                break
            jobs.append((profile, z, s_lo, min(s_hi, cap)))

    def per_line(k: int) -> float:
        return max((_region_lp(mat, k, profile, z, lo, hi, up, down) for profile, z, lo, hi in jobs), default=0.0)

    result = np.array(parallel_map(per_line, range(grid.m), workers))
    logger.debug(f"Saturated flow changes on {grid.name}: {len(jobs)} regions, max {result.max(initial=0):.6g} pu")
    return result


def _upper_bound_line(mat: FlowMatrices, grid: Grid, bounds: AttackBounds, k: int) -> float:
    n = grid.n
    b = mat.B[k]
    up, down = bounds.dev_up, bounds.dev_down
    ones = np.ones((1, n))
    eye = np.eye(n)
    best = 0.0
    for direction in (1, -1):
        for orientation in (1.0, -1.0):
            builder = LpBuilder(label=f"ub_line{k}_dir{direction}")
            pg = builder.add_variables("pg", n, lower=grid.pg_min, upper=grid.pg_max)
            dpd = builder.add_variables("dpd", n, lower=-down, upper=up)
            if direction == 1:
                dpg = builder.add_variables("dpg", n, lower=0.0)
                builder.add_rows([(pg, eye), (dpg, eye)], Relation.LE, grid.pg_max)
                builder.add_rows([(dpd, ones)], Relation.GE, 0.0)
            else:
                dpg = builder.add_variables("dpg", n, lower=-np.inf, upper=0.0)
                builder.add_rows([(pg, eye), (dpg, eye)], Relation.GE, grid.pg_min)
                builder.add_rows([(dpd, ones)], Relation.LE, 0.0)
            builder.add_rows([(pg, ones)], Relation.EQ, grid.demand.sum())
            builder.add_rows([(dpg, ones), (dpd, -ones)], Relation.EQ, 0.0)
            builder.set_objective([(dpg, orientation * b), (dpd, -orientation * b)], Sense.MAX)
            result = solve(builder.build())
            if result.status == LpStatus.INFEASIBLE:
                raise DispatchError(f"generation limits cannot balance the forecast demand of {grid.name}")
            if result.status == LpStatus.UNBOUNDED:
                raise DispatchError(f"upper-bound LP for line {k} is unbounded")
            best = max(best, result.objective_value)
    return best


def flow_change_upper_bound(mat: FlowMatrices, grid: Grid, bounds: AttackBounds,
                            workers: Optional[int] = None) -> np.ndarray:
    """Dispatch-independent bound on |flow change| per line (generation response free)."""
    return np.array(parallel_map(lambda k: _upper_bound_line(mat, grid, bounds, k), range(grid.m), workers))
