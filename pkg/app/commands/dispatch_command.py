import click
import numpy as np
import pandas as pd

from app.commands.common import (
    EXIT_INFEASIBLE,
    EXIT_OK,
    CommandError,
    case_options,
    dispatch_report,
    load_case_grid,
    require_bounds,
    run_command,
    with_config,
)
from app.schema.Report import ReportDocument
from app.schema.RunConfig import RunConfig
from app.service.case_io_service import emit_report
from app.service.dispatch_service import (
    ALGORITHMS,
    build_cost_model,
    robustness_certificate,
    run_algorithm,
    solve_opf,
    sweep_primary,
    with_baseline,
)
from app.service.grid_service import get_matrices
from app.service.primary_response_service import default_droop


def _exit_code(feasible: bool) -> int:
    return EXIT_OK if feasible else EXIT_INFEASIBLE


def _robust(config: RunConfig, name: str):
    grid = load_case_grid(config)
    mat = get_matrices(grid)
    bounds = require_bounds(config, grid)
    model = default_droop(grid, config.droop)
    cost = build_cost_model(grid, config.cost_segments)
    baseline = solve_opf(grid, mat, cost=cost)
    dispatch = run_algorithm(name, grid, mat, model, bounds, cost=cost, max_iters=config.max_iters,
                             update_rule=config.update_rule if name == "immune" else None,
                             discrete_step=config.discrete_step)
    dispatch = with_baseline(dispatch, baseline.cost if baseline.feasible else None)
    return dispatch_report(grid, config, dispatch), _exit_code(dispatch.feasible)


@click.command("opf")
@case_options
@with_config("opf", algorithm="opf")
def opf(config: RunConfig):
    """Minimum-cost DC dispatch without attack protection."""

    def body():
        grid = load_case_grid(config)
        dispatch = solve_opf(grid, get_matrices(grid), cost=build_cost_model(grid, config.cost_segments))
        return dispatch_report(grid, config, dispatch), _exit_code(dispatch.feasible)

    run_command("opf", config, body)


@click.command("safe")
@case_options
@with_config("safe", algorithm="safe")
def safe(config: RunConfig):
    """One-shot dispatch robust to the attack, keeping droop reserve."""
    run_command("safe", config, lambda: _robust(config, "safe"))


@click.command("conservative")
@case_options
@with_config("conservative", algorithm="conservative")
def conservative(config: RunConfig):
    """Dispatch with caps reduced by the dispatch-independent flow change bound."""
    run_command("conservative", config, lambda: _robust(config, "conservative"))


@click.command("immune")
@case_options
@with_config("immune", algorithm="immune")
def immune(config: RunConfig):
    """Iterative cap tightening until no line can be overloaded by the attack."""
    run_command("immune", config, lambda: _robust(config, "immune"))


def _float_list(ctx, param, value):
    if value is None:
        return None
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {value!r}")


@click.command("sweep")
@case_options
@click.option("--alphas", callback=_float_list, required=True, help="Comma-separated attack sizes.")
@click.option("--algorithms", default="safe,immune,immune-0.95,immune-0.9", show_default=True)
@with_config("sweep", algorithm="sweep")
def sweep(config: RunConfig, alphas, algorithms: str):
    """Cost and iteration table per attack size and algorithm (CSV)."""
    names = [a.strip() for a in algorithms.split(",") if a.strip()]

    def body():
        unknown = [a for a in names if a not in ALGORITHMS]
        if unknown:
            raise CommandError(f"unknown algorithms {unknown}; expected {ALGORITHMS}")
        grid = load_case_grid(config)
        table = sweep_primary(grid, get_matrices(grid), default_droop(grid, config.droop), alphas, names,
                              segments=config.cost_segments, max_iters=config.max_iters)
        report = ReportDocument(case=grid.name, algorithm="sweep", feasible=True,
                                meta={"opf_cost": table.attrs.get("opf_cost"), "rows": table.to_dict("records")})
        return report, EXIT_OK

    def render(report):
        if config.fmt == "json":
            return emit_report(report, "json")
        return pd.DataFrame(report.meta["rows"]).to_csv(index=False)

    run_command("sweep", config, body, render)


@click.command("certify")
@case_options
@click.option("--algorithm", "algorithm_name", type=click.Choice(ALGORITHMS), default="immune", show_default=True)
@click.option("--samples", type=int, default=1000, show_default=True)
@click.option("--corner-limit", type=int, default=12, show_default=True)
@with_config("certify", algorithm="certify")
def certify(config: RunConfig, algorithm_name: str, samples: int, corner_limit: int):
    """Replays random and extreme attacks against a robust dispatch."""

    def body():
        grid = load_case_grid(config)
        mat = get_matrices(grid)
        bounds = require_bounds(config, grid)
        model = default_droop(grid, config.droop)
        rule = config.update_rule if algorithm_name == "immune" else None
        dispatch = run_algorithm(algorithm_name, grid, mat, model, bounds,
                                 cost=build_cost_model(grid, config.cost_segments), max_iters=config.max_iters,
                                 update_rule=rule, discrete_step=config.discrete_step)
        if not dispatch.feasible:
            return dispatch_report(grid, config, dispatch), EXIT_INFEASIBLE
        result = robustness_certificate(dispatch, grid, mat, model, bounds, samples=samples, seed=config.seed,
                                        corner_limit=corner_limit)
        worst = result["worst_overload"]
        result["worst_overload_mw"] = float(worst * grid.base_mva) if np.isfinite(worst) else None
        report = dispatch_report(grid, config, dispatch, certificate=result)
        verdict = "robust" if result["violations"] == 0 else f"{result['violations']} violating attacks"
        return report.model_copy(update={"verdict": verdict}), EXIT_OK if result["violations"] == 0 else EXIT_INFEASIBLE

    run_command("certify", config, body)
