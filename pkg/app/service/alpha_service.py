import math
from typing import Iterable, Optional

import numpy as np
import pandas as pd

from app.core.config import DEFAULT_ALPHA_MAX_LIMIT, ETA_TOL
from app.core.errors import AlphaBoundError, BruteForceLimitError, ControllerConditionError
from app.core.logger import setup_logger
from app.schema.AlphaBounds import AlphaBounds, IterConfig
from app.schema.Controller import ControllerKind, ControllerSpec, FeasibilityResult
from app.schema.Grid import FlowMatrices, Grid
from app.schema.LinearProgram import LpStatus, Relation, Sense
from app.service.lp_service import LpBuilder, solve
from app.service.secondary_control_service import (
    envelope_from_alpha,
    find_uncontrollable_extreme,
    synthesize,
    verify_bruteforce,
)

logger = setup_logger("app_logger")

# Starting point of the iterative bound when the upper bound is unbounded.
UNBOUNDED_START = 1.0


def _scaled_demand_lp(grid: Grid, mat: FlowMatrices, sign: float):
    """max alpha with demand (1 + sign*alpha) p_d servable."""
    d = grid.demand
    builder = LpBuilder(label="alpha_hat" if sign > 0 else "alpha_hat_mirrored")
    alpha = builder.add_variables("alpha", 1, lower=0.0, upper=np.inf if sign > 0 else 1.0)
    g = builder.add_variables("pg", grid.n_gen, lower=grid.gen_pmin, upper=grid.gen_pmax)
    builder.add_rows([(g, np.ones((1, grid.n_gen))), (alpha, [[-sign * d.sum()]])], Relation.EQ, d.sum())
    rows = np.flatnonzero(np.isfinite(grid.line_caps))
    if rows.size:
        B = mat.B[rows]
        terms = [(g, B @ grid.gen_incidence), (alpha, -sign * (B @ d)[:, None])]
        builder.add_rows(terms, Relation.LE, grid.line_caps[rows] + B @ d)
        builder.add_rows(terms, Relation.GE, -grid.line_caps[rows] + B @ d)
    builder.set_objective([(alpha, np.ones(1))], Sense.MAX)
    return builder, alpha, g


def alpha_upper_bound(grid: Grid, mat: FlowMatrices, mirrored: bool = False) -> tuple[float, Optional[np.ndarray]]:
    """
    Largest alpha for which the maximum demand (1 + alpha) p_d can be served.
    Returns (alpha_hat, per-bus generation at that optimum); alpha_hat is
    inf when nothing binds. With mirrored, the minimum-demand case
    (1 - alpha) p_d against generator lower limits also caps the bound.
    """
    if not np.any(grid.demand > 0):
        raise AlphaBoundError(f"{grid.name} has no positive forecast demand")
    builder, alpha, g = _scaled_demand_lp(grid, mat, 1.0)
    result = solve(builder.build())
    if result.status == LpStatus.INFEASIBLE:
        raise AlphaBoundError(f"forecast demand of {grid.name} is not servable; no alpha is robust")
    if result.status == LpStatus.UNBOUNDED:
        alpha_hat, pg_star = math.inf, None
    else:
        alpha_hat = float(result.x[alpha][0])
        pg_star = grid.gen_incidence @ result.x[g]

    if mirrored:
        builder, alpha_m, _ = _scaled_demand_lp(grid, mat, -1.0)
        low = solve(builder.build())
        if low.status == LpStatus.OPTIMAL and float(low.x[alpha_m][0]) < alpha_hat:
            logger.info(f"Minimum-demand case lowers alpha_hat to {float(low.x[alpha_m][0]):.6g}")
            alpha_hat = float(low.x[alpha_m][0])
    logger.info(f"alpha_hat for {grid.name}: {alpha_hat:.6g}")
    return alpha_hat, pg_star


def _fixed_beta_lp(grid: Grid, beta: np.ndarray, base: np.ndarray, spread: np.ndarray, wide: bool):
    """
    alpha on [0, 1] with lower envelope (1 - alpha) p_d or, with wide, on
    [1, inf) where the lower envelope sits at zero demand.
    """
    total = grid.demand.sum() * beta
    builder = LpBuilder(label="alpha_star_wide" if wide else "alpha_star")
    alpha = builder.add_variables("alpha", 1, lower=1.0 if wide else 0.0, upper=np.inf if wide else 1.0)
    builder.add_rows([(alpha, total[:, None])], Relation.LE, grid.pg_max - total)
    rows = np.flatnonzero(np.isfinite(grid.line_caps))
    if wide:
        # demand in [0, (1 + alpha) p_d]: midpoint and half width are both (1 + alpha) p_d / 2
        worst = (base + spread) / 2
        if rows.size:
            builder.add_rows([(alpha, worst[rows][:, None])], Relation.LE, grid.line_caps[rows] - worst[rows])
    else:
        builder.add_rows([(alpha, -total[:, None])], Relation.GE, grid.pg_min - total)
        if rows.size:
            builder.add_rows([(alpha, spread[rows][:, None])], Relation.LE, grid.line_caps[rows] - base[rows])
    builder.set_objective([(alpha, np.ones(1))], Sense.MAX)
    return builder, alpha


def alpha_lower_bound_fixed_beta(grid: Grid, mat: FlowMatrices,
                                 pg_star: Optional[np.ndarray] = None) -> tuple[float, np.ndarray]:
    """
    Largest alpha certified by the beta controller that scales the
    generation of the upper-bound optimum (beta = pg*/|pg*|_1).
    """
    if pg_star is None:
        _, pg_star = alpha_upper_bound(grid, mat)
    if pg_star is None:
        logger.warning("alpha_hat is unbounded; fixing beta proportional to generation capacity")
        pg_star = np.array(grid.pg_max, dtype=float)
    if pg_star.sum() <= 0:
        logger.warning("upper-bound generation is zero; alpha_star = 0")
        return 0.0, np.zeros(grid.n)
    beta = pg_star / pg_star.sum()
    spec = ControllerSpec(kind=ControllerKind.BETA, beta=beta)
    d = grid.demand
    sens = mat.B @ spec.W_beta
    base = np.abs(sens @ d)
    spread = np.abs(sens) @ d

    builder, alpha = _fixed_beta_lp(grid, beta, base, spread, wide=False)
    result = solve(builder.build())
    if result.status == LpStatus.INFEASIBLE:
        logger.warning("fixed-beta controller fails already at the forecast demand; alpha_star = 0")
        return 0.0, beta
    alpha_star = float(result.x[alpha][0])
    if alpha_star < 1.0 - ETA_TOL or np.any(grid.pg_min > 0):
        return alpha_star, beta
    builder, alpha = _fixed_beta_lp(grid, beta, base, spread, wide=True)
    result = solve(builder.build())
    if result.status == LpStatus.UNBOUNDED:
        return math.inf, beta
    if result.status == LpStatus.OPTIMAL:
        alpha_star = float(result.x[alpha][0])
    return alpha_star, beta


def _eta_at(grid: Grid, mat: FlowMatrices, kind: ControllerKind, alpha: float) -> tuple[float, Optional[ControllerSpec]]:
    try:
        spec = synthesize(grid, mat, envelope_from_alpha(grid.demand, alpha), kind)
    except ControllerConditionError:
        # Generator limits cannot be met: treat as far from reliable.
        return 2.0, None
    return spec.eta, spec


def alpha_lower_bound_iterative(grid: Grid, mat: FlowMatrices, kind: ControllerKind = ControllerKind.GAMMA_BETA,
                                cfg: Optional[IterConfig] = None,
                                alpha_hat: Optional[float] = None,
                                certified: float = 0.0) -> tuple[float, Optional[ControllerSpec], dict]:
    """
    Iterates alpha <- alpha + step * (1 - eta) from alpha_hat, where eta is
    the optimal controller's worst flow ratio at alpha. Returns the largest
    alpha whose controller was reliable, with that controller and a meta
    dict (iterations, step, backoffs, tail_probes, trace).

    certified is an alpha already known to admit a reliable controller of
    this kind (a weaker bound); it is re-checked and used as the floor.
    """
    cfg = cfg or IterConfig()
    kind = ControllerKind(kind)
    if alpha_hat is None:
        alpha_hat, _ = alpha_upper_bound(grid, mat)
    ceiling = alpha_hat if math.isfinite(alpha_hat) else math.inf
    alpha = alpha_hat if math.isfinite(alpha_hat) else UNBOUNDED_START
    step = cfg.step
    best, best_spec = None, None
    if certified > 0 and math.isfinite(certified):
        eta, spec = _eta_at(grid, mat, kind, certified)
        if eta <= 1.0 + ETA_TOL:
            best, best_spec = certified, spec
    stale, backoffs, iterations = 0, 0, 0
    trace = []
    certified_last = False

    for iterations in range(1, cfg.max_iters + 1):
        eta, spec = _eta_at(grid, mat, kind, alpha)
        certified_last = eta <= 1.0 + ETA_TOL
        trace.append({"alpha": alpha, "eta": eta})
        logger.debug(f"{kind.value} iteration {iterations}: alpha={alpha:.6g}, eta={eta:.6g}")
        if certified_last and (best is None or alpha > best):
            best, best_spec, stale = alpha, spec, 0
        else:
            stale += 1
            if stale >= cfg.backoff_after:
                step /= 2
                backoffs += 1
                stale = 0
                logger.debug(f"{kind.value}: halving step to {step:.6g}")
        new_alpha = min(max(alpha + step * (1.0 - eta), 0.0), ceiling)
        if abs(new_alpha - alpha) <= cfg.stop_delta:
            break
        alpha = new_alpha
    else:
        logger.warning(f"{kind.value} lower bound did not settle within {cfg.max_iters} iterations; "
                       f"returning the best certified alpha")

    tail_probes = 0
    lo = 0.0 if best is None else best
    if not certified_last and alpha > lo:
        if best is None:
            eta0, spec0 = _eta_at(grid, mat, kind, 0.0)
            tail_probes += 1
            if eta0 > 1.0 + ETA_TOL:
                logger.warning(f"no reliable {kind.value} controller even at alpha = 0 on {grid.name}")
                return 0.0, None, {"iterations": iterations, "step": step, "backoffs": backoffs,
                                   "tail_probes": tail_probes, "trace": trace}
            best, best_spec = 0.0, spec0
        hi = alpha
        while hi - best > cfg.stop_delta:
            mid = (best + hi) / 2
            eta, spec = _eta_at(grid, mat, kind, mid)
            tail_probes += 1
            if eta <= 1.0 + ETA_TOL:
                best, best_spec = mid, spec
            else:
                hi = mid
    if best is None:
        best = 0.0
    logger.info(f"alpha_{kind.value} for {grid.name}: {best:.6g} after {iterations} iterations")
    return best, best_spec, {"iterations": iterations, "step": step, "backoffs": backoffs,
                             "tail_probes": tail_probes, "trace": trace}


def _demand_buses(grid: Grid) -> int:
    return int(np.count_nonzero(grid.demand > 0))


def alpha_max_bruteforce(grid: Grid, mat: FlowMatrices, lower: float = 0.0, upper: Optional[float] = None,
                         tol: float = 1e-3, limit: int = DEFAULT_ALPHA_MAX_LIMIT,
                         workers: Optional[int] = None) -> float:
    """
    Exact alpha_max by bisection between a certified lower bound and
    alpha_hat, each probe decided by extreme-point enumeration.
    """
    d = _demand_buses(grid)
    if d > limit:
        raise BruteForceLimitError(
            f"{grid.name} has {d} demand buses, above the exact-search limit of {limit}; "
            f"use the controller lower bounds and alpha_hat instead")
    if upper is None:
        upper, _ = alpha_upper_bound(grid, mat)
    if not math.isfinite(upper):
        raise AlphaBoundError("alpha_hat is unbounded; exact search needs a finite upper bound")
    lo, hi = lower, upper
    if hi - lo <= tol:
        return lo

    def controllable(alpha: float) -> bool:
        return bool(verify_bruteforce(grid, mat, envelope_from_alpha(grid.demand, alpha), limit=limit,
                                      workers=workers).controllable)

    if controllable(hi):
        return hi
    while hi - lo > tol:
        mid = (lo + hi) / 2
        if controllable(mid):
            lo = mid
        else:
            hi = mid
        logger.debug(f"alpha_max bisection on {grid.name}: [{lo:.6g}, {hi:.6g}]")
    logger.info(f"alpha_max for {grid.name}: {lo:.6g}")
    return lo


def refute_alpha(grid: Grid, mat: FlowMatrices, alpha: float, max_points: int = 1000,
                 seed: int = 0) -> FeasibilityResult:
    """One-sided check: an unservable extreme demand at alpha shows alpha_max < alpha."""
    return find_uncontrollable_extreme(grid, mat, envelope_from_alpha(grid.demand, alpha), max_points, seed)


def compute_alpha_bounds(grid: Grid, mat: FlowMatrices, cfg: Optional[IterConfig] = None,
                         exact_max: bool = False, mirrored: bool = False,
                         limit: int = DEFAULT_ALPHA_MAX_LIMIT) -> AlphaBounds:
    cfg = cfg or IterConfig()
    alpha_hat, pg_star = alpha_upper_bound(grid, mat, mirrored=mirrored)
    alpha_star, _ = alpha_lower_bound_fixed_beta(grid, mat, pg_star)
    alpha_star = min(alpha_star, alpha_hat)
    alpha_beta, _, beta_meta = alpha_lower_bound_iterative(grid, mat, ControllerKind.BETA, cfg, alpha_hat,
                                                           certified=alpha_star)
    # A reliable beta controller is a gamma-beta controller with gamma = beta.
    alpha_gb, _, gb_meta = alpha_lower_bound_iterative(grid, mat, ControllerKind.GAMMA_BETA, cfg, alpha_hat,
                                                       certified=alpha_beta)
    alpha_max = None
    if exact_max:
        alpha_max = alpha_max_bruteforce(grid, mat, lower=alpha_gb, upper=alpha_hat, tol=cfg.stop_delta,
                                         limit=limit)
    meta = {
        "beta": {k: v for k, v in beta_meta.items() if k != "trace"},
        "gamma_beta": {k: v for k, v in gb_meta.items() if k != "trace"},
        "mirrored": mirrored,
    }
    bounds = AlphaBounds(alpha_hat=alpha_hat, alpha_star=alpha_star, alpha_beta=alpha_beta,
                         alpha_gamma_beta=alpha_gb, alpha_max=alpha_max, meta=meta)
    for problem in bounds.chain_violations():
        logger.warning(f"alpha bound chain violated on {grid.name}: {problem}")
    return bounds


def lambda_sweep(grid: Grid, mat: FlowMatrices, kind: ControllerKind, lambdas: Iterable[float],
                 cfg: Optional[IterConfig] = None) -> pd.DataFrame:
    """Iteration count and resulting bound per step size."""
    cfg = cfg or IterConfig()
    alpha_hat, _ = alpha_upper_bound(grid, mat)
    rows = []
    for step in lambdas:
        run_cfg = cfg.model_copy(update={"step": step})
        alpha, _, meta = alpha_lower_bound_iterative(grid, mat, kind, run_cfg, alpha_hat)
        rows.append({"lambda": step, "iterations": meta["iterations"], "alpha": alpha,
                     "backoffs": meta["backoffs"], "tail_probes": meta["tail_probes"]})
    return pd.DataFrame(rows, columns=["lambda", "iterations", "alpha", "backoffs", "tail_probes"])
