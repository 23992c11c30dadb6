import math
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import ValidationError

from app.core.config import (
    BALANCE_TOL,
    DEFAULT_COST_SEGMENTS,
    DEFAULT_DISCRETE_STEP_PU,
    DEFAULT_IMMUNE_MAX_ITERS,
    VIOLATION_MARGIN,
)
from app.core.errors import CostModelError, DispatchError, ImmuneConvergenceError, ReserveInfeasibleError, ShortfallError
from app.core.logger import setup_logger
from app.schema.Dispatch import CostModel, Dispatch, PiecewiseCost, UpdateRule
from app.schema.Grid import FlowMatrices, Grid
from app.schema.LinearProgram import LpStatus, Relation, Sense
from app.schema.PrimaryResponse import AttackBounds, DroopModel
from app.service.lp_service import LpBuilder, solve
from app.service.primary_response_service import (
    flow_change_upper_bound,
    max_flow_change_linear,
    max_flow_change_saturated,
    reserve_limits,
    simulate_attack,
)

logger = setup_logger("app_logger")

ALGORITHMS = ("opf", "safe", "conservative", "immune", "immune-0.95", "immune-0.9", "immune-discrete")
IMMUNE_NAMES = {
    UpdateRule.EXACT: "immune",
    UpdateRule.SCALE_095: "immune-0.95",
    UpdateRule.SCALE_09: "immune-0.9",
    UpdateRule.DISCRETE: "immune-discrete",
}


def linearize_cost(poly: Sequence[float], p_min: float, p_max: float,
                   segments: int = DEFAULT_COST_SEGMENTS) -> PiecewiseCost:
    """
    Interpolate a*p^2 + b*p + c0 (poly = (a, b, c0)) at segments+1 uniform
    breakpoints on [p_min, p_max].
    """
    a, b, c0 = poly
    if a < 0:
        raise CostModelError(f"cost {a}*p^2 + {b}*p + {c0} is concave")
    if segments < 1:
        raise CostModelError(f"need at least one segment, got {segments}")
    if p_max < p_min:
        raise CostModelError(f"empty output range [{p_min}, {p_max}]")
    breakpoints = np.linspace(p_min, p_max, segments + 1)
    values = a * breakpoints ** 2 + b * breakpoints + c0
    width = (p_max - p_min) / segments
    if width > 0:
        slopes = np.diff(values) / width
    else:
        slopes = np.full(segments, 2 * a * p_min + b)
    return PiecewiseCost(p_min=p_min, p_max=p_max, breakpoints=breakpoints,
                         slopes=np.maximum.accumulate(slopes), base_cost=float(values[0]))


def build_cost_model(grid: Grid, segments: int = DEFAULT_COST_SEGMENTS) -> CostModel:
    pieces = [linearize_cost(tuple(grid.gen_cost[g]), float(grid.gen_pmin[g]), float(grid.gen_pmax[g]), segments)
              for g in range(grid.n_gen)]
    return CostModel(poly=np.array(grid.gen_cost), pieces=pieces)


def _finite_rows(caps: np.ndarray) -> np.ndarray:
    return np.flatnonzero(np.isfinite(caps))


def _line_label(grid: Grid, k: int) -> str:
    return f"{grid.bus_ids[grid.line_from[k]]}-{grid.bus_ids[grid.line_to[k]]}"


def _balance_cause(grid: Grid) -> Optional[str]:
    """Cause string when no dispatch within generator limits can meet the forecast demand."""
    total = float(grid.demand.sum())
    lo, hi = float(grid.gen_pmin.sum()), float(grid.gen_pmax.sum())
    if total > hi + BALANCE_TOL:
        return f"balance: generation limits cannot meet demand (short by {total - hi:.6g} pu)"
    if total < lo - BALANCE_TOL:
        return f"balance: minimum generation exceeds demand by {lo - total:.6g} pu"
    return None


def _build_opf(grid: Grid, mat: FlowMatrices, demand: np.ndarray, caps: np.ndarray,
               gen_limits: Optional[tuple[np.ndarray, np.ndarray]], cost: CostModel,
               label: str, elastic: bool = False):
    K = cost.segments
    ng = grid.n_gen
    builder = LpBuilder(label=label)
    widths = np.repeat([piece.width for piece in cost.pieces], K)
    y = builder.add_variables("y", ng * K, lower=0.0, upper=widths)
    slopes = np.concatenate([piece.slopes for piece in cost.pieces]) if ng else np.zeros(0)
    expand = np.repeat(np.eye(ng), K, axis=1)  # gen output = pmin + expand @ y
    objective = [(y, slopes)]
    slack_blocks = {}

    def add(name: str, terms, relation: Relation, rhs):
        rhs = np.atleast_1d(rhs)
        if elastic and len(rhs):
            sign = -1.0 if relation == Relation.LE else 1.0
            viol = builder.add_variables(f"viol_{name}", len(rhs), lower=0.0)
            slack_blocks.setdefault(name, []).append(viol)
            objective.append((viol, np.ones(len(rhs))))
            terms = list(terms) + [(viol, sign * np.eye(len(rhs)))]
        builder.add_rows(terms, relation, rhs)

    total = float(demand.sum() - grid.gen_pmin.sum())
    if elastic:
        add("balance_up", [(y, np.ones((1, ng * K)))], Relation.LE, total)
        add("balance_down", [(y, np.ones((1, ng * K)))], Relation.GE, total)
    else:
        builder.add_rows([(y, np.ones((1, ng * K)))], Relation.EQ, total)

    rows = _finite_rows(caps)
    if rows.size:
        G = mat.B[rows] @ grid.gen_incidence
        base = mat.B[rows] @ (grid.gen_incidence @ grid.gen_pmin - demand)
        add("line_upper", [(y, G @ expand)], Relation.LE, caps[rows] - base)
        add("line_lower", [(y, G @ expand)], Relation.GE, -caps[rows] - base)

    if gen_limits is not None:
        lo, hi = gen_limits
        buses = np.flatnonzero(grid.pg_max > 0)
        if buses.size:
            C = grid.gen_incidence[buses] @ expand
            pmin_bus = grid.pg_min[buses]
            add("bus_upper", [(y, C)], Relation.LE, hi[buses] - pmin_bus)
            add("bus_lower", [(y, C)], Relation.GE, lo[buses] - pmin_bus)

    builder.set_objective(objective if elastic else [(y, slopes)], Sense.MIN)
    return builder, y, expand, rows, slack_blocks


def diagnose_infeasibility(grid: Grid, mat: FlowMatrices, demand: np.ndarray, caps: np.ndarray,
                           gen_limits: Optional[tuple[np.ndarray, np.ndarray]], cost: CostModel) -> list[str]:
    """Names the constraint classes an elastic version of the OPF has to violate."""
    builder, _, _, rows, slacks = _build_opf(grid, mat, demand, caps, gen_limits, cost, "opf_elastic", elastic=True)
    result = solve(builder.build())
    if result.status != LpStatus.OPTIMAL:
        return ["diagnosis LP did not solve"]
    causes = []
    for name, blocks in slacks.items():
        values = np.concatenate([result.x[b] for b in blocks])
        bad = np.flatnonzero(values > 1e-7)
        if not bad.size:
            continue
        if name.startswith("balance"):
            causes.append(f"balance: generation limits cannot meet demand (short by {values.max():.6g} pu)")
        elif name.startswith("line"):
            labels = [_line_label(grid, rows[i]) for i in bad]
            causes.append(f"{name}: lines {labels} cannot be kept within capacity")
        else:
            buses = np.flatnonzero(grid.pg_max > 0)[bad]
            causes.append(f"{name}: buses {[grid.bus_ids[i] for i in buses]} violate reserve limits")
    return causes or ["infeasible within solver tolerance"]


def solve_opf(grid: Grid, mat: FlowMatrices, demand: Optional[np.ndarray] = None,
              caps: Optional[np.ndarray] = None, gen_limits: Optional[tuple[np.ndarray, np.ndarray]] = None,
              cost: Optional[CostModel] = None, algorithm: str = "opf",
              segments: int = DEFAULT_COST_SEGMENTS) -> Dispatch:
    """Minimum piecewise-linear cost dispatch under balance, generator and line limits."""
    demand = grid.demand if demand is None else np.asarray(demand, dtype=float)
    caps = grid.line_caps if caps is None else np.asarray(caps, dtype=float)
    if np.any(demand < 0):
        raise DispatchError("demand must be nonnegative")
    cost = cost or build_cost_model(grid, segments)

    builder, y, expand, _, _ = _build_opf(grid, mat, demand, caps, gen_limits, cost, f"opf_{algorithm}")
    result = solve(builder.build())
    if result.status != LpStatus.OPTIMAL:
        causes = diagnose_infeasibility(grid, mat, demand, caps, gen_limits, cost)
        logger.info(f"OPF ({algorithm}) on {grid.name} is {result.status.value}: {causes}")
        return Dispatch.infeasible(algorithm, causes)

    gen_output = grid.gen_pmin + expand @ result.x[y]
    p_g = grid.gen_incidence @ gen_output
    flows = mat.B @ (p_g - demand)
    lp_cost = float(result.objective_value + sum(piece.base_cost for piece in cost.pieces))
    return Dispatch(algorithm=algorithm, feasible=True, p_g=p_g, gen_output=gen_output, flows=flows,
                    cost=cost.true_cost(gen_output), iterations=1, caps=caps,
                    meta={"lp_cost": lp_cost, "segments": cost.segments})


def safe_dispatch(grid: Grid, mat: FlowMatrices, model: DroopModel, bounds: AttackBounds,
                  cost: Optional[CostModel] = None, segments: int = DEFAULT_COST_SEGMENTS) -> Dispatch:
    """One OPF with caps reduced by the linear worst-case flow change and droop reserve kept."""
    delta_f = max_flow_change_linear(mat, model, bounds)
    unbalanced = _balance_cause(grid)
    if unbalanced:
        logger.info(f"SAFE on {grid.name} infeasible: {unbalanced}")
        return Dispatch.infeasible("safe", [unbalanced], delta_f_max=delta_f)
    caps = grid.line_caps - delta_f
    negative = [_line_label(grid, k) for k in np.flatnonzero(caps < 0)]
    try:
        limits = reserve_limits(grid.pg_min, grid.pg_max, model, bounds)
    except ReserveInfeasibleError as e:
        causes = [f"reserve: buses {[grid.bus_ids[i] for i in e.buses]} cannot hold the droop reserve"]
        if negative:
            causes.append(f"lines {negative} have negative effective capacity")
        logger.info(f"SAFE on {grid.name} infeasible: {causes}")
        return Dispatch.infeasible("safe", causes, delta_f_max=delta_f)
    if negative:
        causes = [f"lines {negative} have negative effective capacity"]
        logger.info(f"SAFE on {grid.name} infeasible: {causes}")
        return Dispatch.infeasible("safe", causes, delta_f_max=delta_f)
    dispatch = solve_opf(grid, mat, caps=caps, gen_limits=limits, cost=cost, algorithm="safe", segments=segments)
    return dispatch.model_copy(update={"meta": {**dispatch.meta, "delta_f_max": delta_f}})


def conservative_dispatch(grid: Grid, mat: FlowMatrices, bounds: AttackBounds,
                          cost: Optional[CostModel] = None, segments: int = DEFAULT_COST_SEGMENTS) -> Dispatch:
    """OPF with caps reduced by the dispatch-independent upper bound on flow change."""
    unbalanced = _balance_cause(grid)
    if unbalanced:
        logger.info(f"conservative dispatch on {grid.name} infeasible: {unbalanced}")
        return Dispatch.infeasible("conservative", [unbalanced])
    delta_hat = flow_change_upper_bound(mat, grid, bounds)
    caps = grid.line_caps - delta_hat
    if np.any(caps < 0):
        lines = [_line_label(grid, k) for k in np.flatnonzero(caps < 0)]
        return Dispatch.infeasible("conservative", [f"lines {lines} have negative effective capacity"],
                                   delta_f_hat=delta_hat)
    dispatch = solve_opf(grid, mat, caps=caps, cost=cost, algorithm="conservative", segments=segments)
    return dispatch.model_copy(update={"meta": {**dispatch.meta, "delta_f_hat": delta_hat}})


def _floor_to_step(values: np.ndarray, step: float) -> np.ndarray:
    return np.floor(values / step) * step


def _updated_caps(rule: UpdateRule, f_max: np.ndarray, delta_f: np.ndarray, floor: np.ndarray,
                  step: float) -> np.ndarray:
    target = f_max - delta_f
    if rule == UpdateRule.DISCRETE:
        return np.maximum(_floor_to_step(target, step), floor)
    return rule.scale * target


def immune(grid: Grid, mat: FlowMatrices, model: DroopModel, bounds: AttackBounds,
           update_rule: UpdateRule = UpdateRule.EXACT, max_iters: int = DEFAULT_IMMUNE_MAX_ITERS,
           cost: Optional[CostModel] = None, segments: int = DEFAULT_COST_SEGMENTS,
           discrete_step: float = DEFAULT_DISCRETE_STEP_PU) -> Dispatch:
    """
    Iterate OPF under caps c, then tighten c on every line whose flow plus
    worst saturated flow change exceeds its capacity, until none does.
    Returns an infeasible Dispatch when an OPF fails along the way.
    """
    if max_iters < 1:
        raise DispatchError("max_iters must be at least 1")
    cost = cost or build_cost_model(grid, segments)
    f_max = np.array(grid.line_caps, dtype=float)
    algorithm = IMMUNE_NAMES[update_rule]
    unbalanced = _balance_cause(grid)
    if unbalanced:
        logger.info(f"IMMUNE on {grid.name} infeasible: {unbalanced}")
        return Dispatch.infeasible(algorithm, [unbalanced], iterations=0)
    floor = f_max - flow_change_upper_bound(mat, grid, bounds)
    caps = f_max.copy()
    history = []
    last = None

    for it in range(1, max_iters + 1):
        history.append(caps.copy())
        dispatch = solve_opf(grid, mat, caps=caps, cost=cost, algorithm=algorithm)
        if not dispatch.feasible:
            logger.info(f"IMMUNE on {grid.name} stopped at iteration {it}: OPF infeasible")
            return Dispatch.infeasible(algorithm, dispatch.causes, iterations=it, cap_history=history, floor=floor)
        last = dispatch
        delta_f = max_flow_change_saturated(mat, grid, model, dispatch.p_g, bounds)
        violated = np.flatnonzero(np.abs(dispatch.flows) + delta_f > f_max + VIOLATION_MARGIN)
        logger.debug(f"IMMUNE iteration {it} on {grid.name}: cost {dispatch.cost:.6g}, {violated.size} violated lines")
        if not violated.size:
            logger.info(f"IMMUNE ({update_rule.value}) on {grid.name} converged in {it} iterations")
            return dispatch.model_copy(update={
                "iterations": it, "caps": caps,
                "meta": {**dispatch.meta, "cap_history": history, "floor": floor, "delta_f_max": delta_f},
            })
        new_caps = caps.copy()
        new_caps[violated] = np.minimum(
            caps[violated], _updated_caps(update_rule, f_max, delta_f, floor, discrete_step)[violated])
        if update_rule in (UpdateRule.EXACT, UpdateRule.DISCRETE):
            below = np.flatnonzero(new_caps < floor - 1e-6)
            if below.size:
                logger.warning(f"IMMUNE caps fell below the upper-bound floor on lines "
                               f"{[_line_label(grid, k) for k in below]}")
        caps = new_caps

    logger.warning(f"IMMUNE on {grid.name} did not converge within {max_iters} iterations")
    raise ImmuneConvergenceError(f"IMMUNE did not converge within {max_iters} iterations", last_dispatch=last)


def run_algorithm(name: str, grid: Grid, mat: FlowMatrices, model: DroopModel, bounds: Optional[AttackBounds],
                  cost: Optional[CostModel] = None, max_iters: int = DEFAULT_IMMUNE_MAX_ITERS,
                  update_rule: Optional[UpdateRule] = None,
                  discrete_step: float = DEFAULT_DISCRETE_STEP_PU) -> Dispatch:
    """Dispatch by algorithm name (one of ALGORITHMS)."""
    if name == "opf" or bounds is None:
        return solve_opf(grid, mat, cost=cost, algorithm="opf")
    if name == "safe":
        return safe_dispatch(grid, mat, model, bounds, cost=cost)
    if name == "conservative":
        return conservative_dispatch(grid, mat, bounds, cost=cost)
    if name.startswith("immune"):
        if update_rule is None:
            update_rule = {v: k for k, v in IMMUNE_NAMES.items()}.get(name, UpdateRule.EXACT)
        return immune(grid, mat, model, bounds, update_rule=update_rule, max_iters=max_iters, cost=cost,
                      discrete_step=discrete_step)
    raise DispatchError(f"unknown algorithm {name!r}; expected one of {ALGORITHMS}")


def with_baseline(dispatch: Dispatch, baseline_cost: Optional[float]) -> Dispatch:
    """Adds cost_increase_pct relative to a baseline OPF cost."""
    if not dispatch.feasible or not baseline_cost:
        return dispatch
    pct = 100.0 * (dispatch.cost - baseline_cost) / baseline_cost
    return dispatch.model_copy(update={"meta": {**dispatch.meta, "cost_increase_pct": pct}})


def _corner_attacks(up: np.ndarray, down: np.ndarray, corner_limit: int, rng: np.random.Generator) -> np.ndarray:
    varying = np.flatnonzero((up > 0) | (down > 0))
    d = len(varying)
    if d <= corner_limit:
        bits = (np.arange(2 ** d)[:, None] >> np.arange(d)) & 1
    else:
        bits = rng.integers(0, 2, size=(2 ** corner_limit, d))
    corners = np.zeros((len(bits), len(up)))
    corners[:, varying] = np.where(bits == 1, up[varying], -down[varying])
    return corners


def robustness_certificate(dispatch: Dispatch, grid: Grid, mat: FlowMatrices, model: DroopModel,
                           bounds: AttackBounds, samples: int = 1000, seed: int = 0,
                           corner_limit: int = 12) -> dict:
    """
    Replays random and extreme attacks against a dispatch and counts the
    ones that push some line above capacity.
    """
    if not dispatch.feasible:
        raise DispatchError("cannot certify an infeasible dispatch")
    rng = np.random.default_rng(seed)
    up, down = bounds.dev_up, bounds.dev_down
    random_attacks = rng.uniform(-down, up, size=(samples, grid.n))
    attacks = np.vstack([random_attacks, _corner_attacks(up, down, corner_limit, rng)])
    violations, reserve_exceeded, worst = 0, 0, -math.inf
    for delta in attacks:
        try:
            flows = simulate_attack(dispatch.p_g, grid, mat, model, delta)
        except ShortfallError:
            reserve_exceeded += 1
            continue
        overload = float(np.max(np.abs(flows) - grid.line_caps, initial=-math.inf))
        worst = max(worst, overload)
        if overload > VIOLATION_MARGIN:
            violations += 1
    logger.info(f"Certificate for {dispatch.algorithm} on {grid.name}: {violations} violating of {len(attacks)} attacks")
    return {"attacks": len(attacks), "violations": violations, "reserve_exceeded": reserve_exceeded,
            "worst_overload": worst}


def sweep_primary(grid: Grid, mat: FlowMatrices, model: DroopModel, alphas: Iterable[float],
                  algorithms: Sequence[str] = ("safe", "immune", "immune-0.95", "immune-0.9"),
                  segments: int = DEFAULT_COST_SEGMENTS, max_iters: int = DEFAULT_IMMUNE_MAX_ITERS) -> pd.DataFrame:
    """Cost and iteration table per alpha and algorithm, with the plain OPF as baseline."""
    cost = build_cost_model(grid, segments)
    baseline = solve_opf(grid, mat, cost=cost)
    rows = []
    for alpha in alphas:
        try:
            bounds = AttackBounds.from_alpha(grid.demand, alpha)
        except ValidationError as e:
            raise DispatchError(str(e)) from e
        for name in algorithms:
            try:
                d = with_baseline(run_algorithm(name, grid, mat, model, bounds, cost=cost, max_iters=max_iters),
                                  baseline.cost)
            except ImmuneConvergenceError:
                rows.append({"alpha": alpha, "algorithm": name, "feasible": False, "cost": None,
                             "iterations": max_iters, "cost_increase_pct": None, "note": "no convergence"})
                continue
            rows.append({"alpha": alpha, "algorithm": name, "feasible": d.feasible, "cost": d.cost,
                         "iterations": d.iterations, "cost_increase_pct": d.meta.get("cost_increase_pct"),
                         "note": ""})
    table = pd.DataFrame(rows, columns=["alpha", "algorithm", "feasible", "cost", "iterations",
                                        "cost_increase_pct", "note"])
    table.attrs["opf_cost"] = baseline.cost
    return table
