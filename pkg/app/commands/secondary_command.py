import click

from app.commands.common import (
    EXIT_INFEASIBLE,
    EXIT_OK,
    case_options,
    load_case_grid,
    require_bounds,
    run_command,
    with_config,
)
from app.core.config import DEFAULT_BRUTEFORCE_LIMIT
from app.schema.Controller import ControllerKind
from app.schema.Report import ReportDocument
from app.schema.RunConfig import RunConfig
from app.service.grid_service import get_matrices
from app.service.secondary_control_service import (
    envelope_from_bounds,
    find_uncontrollable_extreme,
    verify_bruteforce,
    verify_top_k,
    verify_with_controller,
)

METHODS = ("bruteforce", "beta", "gamma-beta", "top-k", "search")


@click.command("verify-secondary")
@case_options
@click.option("--method", type=click.Choice(METHODS), default="gamma-beta", show_default=True)
@click.option("--limit", type=int, default=DEFAULT_BRUTEFORCE_LIMIT, show_default=True,
              help="Largest varying-bus count for brute force.")
@click.option("--top-k", "top_k", type=int, default=10, show_default=True)
@click.option("--max-points", type=int, default=1000, show_default=True)
@click.option("--progress/--no-progress", default=False)
@with_config("verify-secondary", algorithm="verify-secondary")
def verify_secondary(config: RunConfig, method: str, limit: int, top_k: int, max_points: int, progress: bool):
    """Secondary controllability of the demand envelope."""

    def body():
        grid = load_case_grid(config)
        mat = get_matrices(grid)
        env = envelope_from_bounds(require_bounds(config, grid), grid.demand)
        if method == "bruteforce":
            result = verify_bruteforce(grid, mat, env, limit=limit, progress=progress)
        elif method == "top-k":
            result = verify_top_k(grid, mat, env, top_k)
        elif method == "search":
            result = find_uncontrollable_extreme(grid, mat, env, max_points=max_points, seed=config.seed)
        else:
            result = verify_with_controller(grid, mat, env, ControllerKind(method))
        meta = {"method": result.method, "points_checked": result.points_checked,
                "approximate": result.approximate, "total_shortfall": result.total_shortfall}
        if result.eta is not None:
            meta["eta"] = result.eta
        if result.witness_demand is not None:
            meta["witness_demand_mw"] = [float(x * grid.base_mva) for x in result.witness_demand]
        report = ReportDocument(case=grid.name, algorithm=f"verify-{method}", alpha=config.alpha,
                                feasible=result.controllable, verdict=result.verdict, meta=meta)
        return report, EXIT_OK if result.controllable else EXIT_INFEASIBLE

    run_command("verify-secondary", config, body)
