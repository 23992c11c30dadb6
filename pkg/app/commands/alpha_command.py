import math

import click
import pandas as pd

from app.commands.common import EXIT_OK, CommandError, case_options, load_case_grid, run_command, with_config
from app.core.config import DEFAULT_ALPHA_MAX_LIMIT
from app.schema.AlphaBounds import IterConfig
from app.schema.Controller import ControllerKind
from app.schema.Report import ReportDocument
from app.schema.RunConfig import RunConfig
from app.service.alpha_service import compute_alpha_bounds, lambda_sweep
from app.service.case_io_service import emit_report
from app.service.grid_service import get_matrices


def _render_bounds_table(report: ReportDocument) -> str:
    bounds = report.alpha_bounds

    def cell(key):
        value = bounds.get(key)
        if value is None:
            return "-"
        return "inf" if math.isinf(value) else f"{value:.4f}"

    header = f"{'case':<16}{'alpha*':>10}{'alpha_b':>10}{'alpha_gb':>10}{'alpha_max':>11}{'alpha_hat':>11}"
    row = (f"{report.case:<16}{cell('star'):>10}{cell('beta'):>10}{cell('gamma_beta'):>10}"
           f"{cell('max'):>11}{cell('hat'):>11}")
    lines = [header, row]
    if report.causes:
        lines.extend(f"warning: {c}" for c in report.causes)
    return "\n".join(lines) + "\n"


@click.command("alpha-bounds")
@case_options
@click.option("--exact-max", is_flag=True, default=False, help="Also bisect alpha_max by brute force.")
@click.option("--mirrored", is_flag=True, default=False, help="Also cap alpha_hat by the minimum-demand case.")
@click.option("--limit", type=int, default=DEFAULT_ALPHA_MAX_LIMIT, show_default=True)
@with_config("alpha-bounds", algorithm="alpha-bounds")
def alpha_bounds(config: RunConfig, exact_max: bool, mirrored: bool, limit: int):
    """Upper and lower bounds on the largest robust attack size."""

    def body():
        if config.has_attack:
            raise CommandError("alpha-bounds takes no --alpha or --bounds-file")
        grid = load_case_grid(config)
        cfg = IterConfig(step=config.step, stop_delta=config.stop_delta)
        bounds = compute_alpha_bounds(grid, get_matrices(grid), cfg, exact_max=exact_max, mirrored=mirrored,
                                      limit=limit)
        report = ReportDocument(
            case=grid.name, algorithm="alpha-bounds", feasible=True,
            alpha_bounds={"star": bounds.alpha_star, "beta": bounds.alpha_beta,
                          "gamma_beta": bounds.alpha_gamma_beta, "hat": bounds.alpha_hat, "max": bounds.alpha_max},
            causes=bounds.chain_violations(), meta=bounds.meta)
        return report, EXIT_OK

    def render(report):
        return emit_report(report, "json") if config.fmt == "json" else _render_bounds_table(report)

    run_command("alpha-bounds", config, body, render)


@click.command("lambda-sweep")
@case_options
@click.option("--lambdas", default="0.2,0.5,1.1,2.0", show_default=True)
@click.option("--kind", type=click.Choice([k.value for k in ControllerKind]), default="gamma-beta",
              show_default=True)
@with_config("lambda-sweep", algorithm="lambda-sweep")
def lambda_sweep_command(config: RunConfig, lambdas: str, kind: str):
    """Iterations of the iterative lower bound per step size (CSV)."""
    try:
        steps = [float(x) for x in lambdas.split(",") if x.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {lambdas!r}")

    def body():
        grid = load_case_grid(config)
        table = lambda_sweep(grid, get_matrices(grid), ControllerKind(kind), steps,
                             IterConfig(stop_delta=config.stop_delta))
        report = ReportDocument(case=grid.name, algorithm="lambda-sweep", feasible=True,
                                meta={"kind": kind, "rows": table.to_dict("records")})
        return report, EXIT_OK

    def render(report):
        if config.fmt == "json":
            return emit_report(report, "json")
        return pd.DataFrame(report.meta["rows"]).to_csv(index=False)

    run_command("lambda-sweep", config, body, render)
