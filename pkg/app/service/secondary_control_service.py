import math
from typing import Optional

import numpy as np
from tqdm import tqdm

from app.core.config import DEFAULT_BRUTEFORCE_LIMIT, ETA_TOL
from app.core.errors import BruteForceLimitError, ControllerConditionError, DispatchError
from app.core.logger import setup_logger
from app.core.parallel import parallel_map
from app.schema.Controller import ControllerKind, ControllerSpec, DemandEnvelope, FeasibilityResult
from app.schema.Grid import FlowMatrices, Grid
from app.schema.LinearProgram import LpStatus, Relation, Sense
from app.schema.PrimaryResponse import AttackBounds
from app.service.lp_service import LpBuilder, abs_linearize, solve

logger = setup_logger("app_logger")

SHORTFALL_TOL = 1e-6
CHUNK = 256


def envelope_from_bounds(bounds: AttackBounds, forecast: np.ndarray) -> DemandEnvelope:
    if bounds.pd_min is not None:
        return DemandEnvelope(pd_min=np.array(bounds.pd_min), pd_max=np.array(bounds.pd_max))
    forecast = np.asarray(forecast, dtype=float)
    return DemandEnvelope(pd_min=np.maximum(forecast - bounds.dev_down, 0.0), pd_max=forecast + bounds.dev_up)


def envelope_from_alpha(forecast: np.ndarray, alpha: float) -> DemandEnvelope:
    """max(1 - alpha, 0) p_d <= demand <= (1 + alpha) p_d; demand never goes below zero."""
    if alpha < 0:
        raise ControllerConditionError(f"alpha must be nonnegative, got {alpha}")
    return DemandEnvelope.from_alpha(forecast, alpha)


def _format_witness(demand: np.ndarray) -> str:
    return "[" + ", ".join(f"{x:.6g}" for x in demand) + "]"


def min_shortfall(grid: Grid, mat: FlowMatrices, demand: np.ndarray) -> FeasibilityResult:
    """
    Smallest total unserved demand 1'q for one demand vector, subject to
    balance, generator limits and line capacities. Zero iff the demand is
    servable.
    """
    demand = np.asarray(demand, dtype=float)
    if np.any(demand < -1e-12):
        raise DispatchError("min_shortfall needs a nonnegative demand vector")
    builder = LpBuilder(label="min_shortfall")
    g = builder.add_variables("pg", grid.n_gen, lower=grid.gen_pmin, upper=grid.gen_pmax)
    q = builder.add_variables("q", grid.n, lower=0.0, upper=np.maximum(demand, 0.0))
    builder.add_rows([(g, np.ones((1, grid.n_gen))), (q, np.ones((1, grid.n)))], Relation.EQ, demand.sum())
    rows = np.flatnonzero(np.isfinite(grid.line_caps))
    if rows.size:
        B = mat.B[rows]
        base = B @ demand
        caps = grid.line_caps[rows]
        terms = [(g, B @ grid.gen_incidence), (q, B)]
        builder.add_rows(terms, Relation.LE, caps + base)
        builder.add_rows(terms, Relation.GE, -caps + base)
    builder.set_objective([(q, np.ones(grid.n))], Sense.MIN)
    result = solve(builder.build())

    if result.status != LpStatus.OPTIMAL:
        # Minimum generation exceeds the demand or cannot be routed within the caps.
        return FeasibilityResult(controllable=False, verdict="not servable", method="lp",
                                 total_shortfall=math.inf, witness_demand=demand, points_checked=1)
    shortfall = np.maximum(result.x[q], 0.0)
    total = float(shortfall.sum())
    ok = total <= SHORTFALL_TOL
    return FeasibilityResult(controllable=ok, verdict="servable" if ok else "not servable", method="lp",
                             shortfall=shortfall, total_shortfall=total,
                             witness_demand=None if ok else demand, points_checked=1)


def _gray_corner(env: DemandEnvelope, varying: np.ndarray, index: int) -> np.ndarray:
    code = index ^ (index >> 1)
    bits = (code >> np.arange(len(varying))) & 1
    demand = np.array(env.pd_min, dtype=float)
    demand[varying] = np.where(bits == 1, env.pd_max[varying], env.pd_min[varying])
    return demand


def _worst(results: list[FeasibilityResult]) -> FeasibilityResult:
    return max(results, key=lambda r: r.total_shortfall)


def verify_bruteforce(grid: Grid, mat: FlowMatrices, env: DemandEnvelope,
                      limit: int = DEFAULT_BRUTEFORCE_LIMIT, workers: Optional[int] = None,
                      progress: bool = False) -> FeasibilityResult:
    """
    Exact check: every extreme demand vector of the envelope must be
    servable. Extreme points are visited in Gray-code order.
    """
    varying = env.varying
    d = len(varying)
    if d > limit:
        raise BruteForceLimitError(
            f"{d} buses with varying demand exceeds the brute-force limit of {limit}; "
            f"use the beta or gamma-beta controller check instead")
    if d == 0:
        single = min_shortfall(grid, mat, env.pd_max)
        verdict = "controllable" if single.controllable else f"uncontrollable (witness={_format_witness(env.pd_max)})"
        return single.model_copy(update={"verdict": verdict, "method": "bruteforce"})

    total = 2 ** d
    logger.info(f"Brute-force check of {total} extreme demand vectors on {grid.name}")
    worst = None
    with tqdm(total=total, desc="extreme points", unit="pt", disable=not progress) as bar:
        for start in range(0, total, CHUNK):
            indices = range(start, min(start + CHUNK, total))
            results = parallel_map(lambda i: min_shortfall(grid, mat, _gray_corner(env, varying, i)), indices, workers)
            chunk_worst = _worst(results)
            if worst is None or chunk_worst.total_shortfall > worst.total_shortfall:
                worst = chunk_worst
            bar.update(len(indices))

    if worst.total_shortfall <= SHORTFALL_TOL:
        return FeasibilityResult(controllable=True, verdict="controllable", method="bruteforce",
                                 shortfall=worst.shortfall, total_shortfall=worst.total_shortfall,
                                 points_checked=total)
    logger.info(f"{grid.name} is not secondary controllable: shortfall {worst.total_shortfall:.6g} pu")
    return FeasibilityResult(controllable=False,
                             verdict=f"uncontrollable (witness={_format_witness(worst.witness_demand)})",
                             method="bruteforce", shortfall=worst.shortfall,
                             total_shortfall=worst.total_shortfall, witness_demand=worst.witness_demand,
                             points_checked=total)


def verify_top_k(grid: Grid, mat: FlowMatrices, env: DemandEnvelope, k: int,
                 workers: Optional[int] = None) -> FeasibilityResult:
    """
    Enumerates only the k varying buses with the largest upper demand; the
    rest sit at the envelope midpoint. A controllable verdict is approximate.
    """
    if k < 0:
        raise BruteForceLimitError("k must be nonnegative")
    varying = env.varying
    top = varying[np.argsort(-env.pd_max[varying], kind="stable")[:k]]
    keep = np.zeros(len(env.pd_min), dtype=bool)
    keep[top] = True
    mid = env.midpoint
    reduced = DemandEnvelope(pd_min=np.where(keep, env.pd_min, mid), pd_max=np.where(keep, env.pd_max, mid))
    result = verify_bruteforce(grid, mat, reduced, limit=max(k, 0), workers=workers)
    verdict = "controllable (approximate)" if result.controllable else result.verdict
    return result.model_copy(update={"method": "top-k", "approximate": True, "verdict": verdict})


def find_uncontrollable_extreme(grid: Grid, mat: FlowMatrices, env: DemandEnvelope,
                                max_points: int = 1000, seed: int = 0) -> FeasibilityResult:
    """
    Partial search for an unservable extreme demand: the all-max corner,
    then seeded random corners. Finding none proves nothing.
    """
    varying = env.varying
    rng = np.random.default_rng(seed)
    candidates = [np.array(env.pd_max, dtype=float)]
    for _ in range(max(max_points - 1, 0)):
        demand = np.array(env.pd_min, dtype=float)
        pick = rng.integers(0, 2, size=len(varying)) == 1
        demand[varying] = np.where(pick, env.pd_max[varying], env.pd_min[varying])
        candidates.append(demand)
    for checked, demand in enumerate(candidates, start=1):
        result = min_shortfall(grid, mat, demand)
        if not result.controllable:
            logger.info(f"Found an unservable extreme demand on {grid.name} after {checked} points")
            return result.model_copy(update={
                "verdict": f"uncontrollable (witness={_format_witness(demand)})",
                "method": "partial-search", "points_checked": checked})
    return FeasibilityResult(controllable=None, verdict=f"inconclusive (no witness in {len(candidates)} points)",
                             method="partial-search", points_checked=len(candidates))


def controller_max_flows(mat: FlowMatrices, spec: ControllerSpec, env: DemandEnvelope) -> np.ndarray:
    """Largest |flow| per line over the envelope when the controller sets generation."""
    midpoint_term = np.abs(mat.B @ (spec.W_gamma @ env.midpoint))
    spread_term = np.abs(mat.B @ spec.W_beta) @ env.half_width
    return midpoint_term + spread_term


def check_controller_limits(grid: Grid, spec: ControllerSpec, env: DemandEnvelope, tol: float = 1e-7) -> None:
    """Generation at the extreme total demands must stay within bus limits."""
    for label, total_dev in (("upper", env.half_width.sum()), ("lower", -env.half_width.sum())):
        p_g = env.midpoint.sum() * spec.effective_gamma + total_dev * spec.beta
        if np.any(p_g > grid.pg_max + tol) or np.any(p_g < grid.pg_min - tol):
            raise ControllerConditionError(f"controller breaks generator limits at the {label} envelope total")


def apply_controller(spec: ControllerSpec, demand: np.ndarray, env: DemandEnvelope,
                     grid: Optional[Grid] = None) -> np.ndarray:
    """Generation the controller assigns to one demand vector inside the envelope."""
    demand = np.asarray(demand, dtype=float)
    if np.any(demand < env.pd_min - 1e-9) or np.any(demand > env.pd_max + 1e-9):
        raise ControllerConditionError("demand lies outside the envelope")
    if grid is not None:
        check_controller_limits(grid, spec, env)
    if spec.kind == ControllerKind.BETA:
        return demand.sum() * spec.beta
    mid_total = env.midpoint.sum()
    return mid_total * spec.effective_gamma + (demand.sum() - mid_total) * spec.beta


def _normalise(vec: np.ndarray) -> np.ndarray:
    vec = np.maximum(vec, 0.0)
    return vec / vec.sum()


def _synthesize(grid: Grid, mat: FlowMatrices, env: DemandEnvelope, kind: ControllerKind) -> ControllerSpec:
    n = grid.n
    mid, half = env.midpoint, env.half_width
    mid_total, half_total = float(mid.sum()), float(half.sum())
    builder = LpBuilder(label=f"synthesize_{kind.value}")
    eta = builder.add_variables("eta", 1, lower=0.0)
    beta = builder.add_variables("beta", n, lower=0.0, upper=1.0)
    gamma = builder.add_variables("gamma", n, lower=0.0, upper=1.0) if kind == ControllerKind.GAMMA_BETA else beta
    ones, eye = np.ones((1, n)), np.eye(n)

    builder.add_rows([(beta, ones)], Relation.EQ, 1.0)
    if kind == ControllerKind.GAMMA_BETA:
        builder.add_rows([(gamma, ones)], Relation.EQ, 1.0)
        builder.add_rows([(gamma, mid_total * eye), (beta, half_total * eye)], Relation.LE, grid.pg_max)
        builder.add_rows([(gamma, mid_total * eye), (beta, -half_total * eye)], Relation.GE, grid.pg_min)
    else:
        builder.add_rows([(beta, float(env.pd_max.sum()) * eye)], Relation.LE, grid.pg_max)
        builder.add_rows([(beta, float(env.pd_min.sum()) * eye)], Relation.GE, grid.pg_min)

    rows = np.flatnonzero(np.isfinite(grid.line_caps))
    if rows.size:
        B = mat.B[rows]
        u = abs_linearize(builder, [(gamma, mid_total * B)], -(B @ mid), role="upper_bounded", name="u")
        flow_terms = [(u, np.eye(len(rows))), (eta, -grid.line_caps[rows][:, None])]
        for i in env.varying:
            q = abs_linearize(builder, [(beta, B)], -B[:, i], role="upper_bounded", name=f"Q{i}")
            flow_terms.append((q, half[i] * np.eye(len(rows))))
        builder.add_rows(flow_terms, Relation.LE, np.zeros(len(rows)))
    builder.set_objective([(eta, np.ones(1))], Sense.MIN)

    result = solve(builder.build())
    if result.status != LpStatus.OPTIMAL:
        raise ControllerConditionError(
            f"no {kind.value} controller meets the generator limits for this envelope ({result.status.value})")
    beta_v = _normalise(result.x[beta])
    gamma_v = _normalise(result.x[gamma]) if kind == ControllerKind.GAMMA_BETA else None
    spec = ControllerSpec(kind=kind, beta=beta_v, gamma=gamma_v, eta=float(result.x[eta][0]))

    # The LP optimum must match the closed-form worst flows of the controller.
    if rows.size:
        eta_check = float(np.max(controller_max_flows(mat, spec, env)[rows] / np.maximum(grid.line_caps[rows], 1e-12)))
        if abs(eta_check - spec.eta) > 1e-5 * max(1.0, spec.eta):
            logger.warning(f"{kind.value} synthesis: LP eta {spec.eta:.6g} vs recomputed {eta_check:.6g}")
            spec = spec.model_copy(update={"eta": max(spec.eta, eta_check)})
    if 1.0 < spec.eta <= 1.0 + ETA_TOL:
        logger.warning(f"{kind.value} controller eta={spec.eta:.9g} accepted as reliable within tolerance")
    logger.debug(f"{kind.value} controller for {grid.name}: eta={spec.eta:.6g}")
    return spec


def synthesize_beta(grid: Grid, mat: FlowMatrices, env: DemandEnvelope) -> ControllerSpec:
    """Beta-determined controller with the smallest worst-case flow ratio eta."""
    return _synthesize(grid, mat, env, ControllerKind.BETA)


def synthesize_gamma_beta(grid: Grid, mat: FlowMatrices, env: DemandEnvelope) -> ControllerSpec:
    return _synthesize(grid, mat, env, ControllerKind.GAMMA_BETA)


def synthesize(grid: Grid, mat: FlowMatrices, env: DemandEnvelope, kind: ControllerKind) -> ControllerSpec:
    return _synthesize(grid, mat, env, ControllerKind(kind))


def verify_with_controller(grid: Grid, mat: FlowMatrices, env: DemandEnvelope,
                           kind: ControllerKind = ControllerKind.GAMMA_BETA) -> FeasibilityResult:
    """Sound but incomplete: a reliable controller proves controllability, anything else is inconclusive."""
    kind = ControllerKind(kind)
    try:
        spec = _synthesize(grid, mat, env, kind)
    except ControllerConditionError as e:
        logger.info(f"{kind.value} synthesis failed on {grid.name}: {e}")
        return FeasibilityResult(controllable=None, verdict="inconclusive (eta=inf)", method=kind.value,
                                 eta=math.inf)
    if spec.reliable:
        return FeasibilityResult(controllable=True, verdict="controllable", method=kind.value, eta=spec.eta)
    return FeasibilityResult(controllable=None, verdict=f"inconclusive (eta={spec.eta:.6g})", method=kind.value,
                             eta=spec.eta)

