import functools
import os
from pathlib import Path
from typing import Callable, Optional

import click
import numpy as np
from pydantic import ValidationError

from app.core.config import (
    DEFAULT_COST_SEGMENTS,
    DEFAULT_DISCRETE_STEP_PU,
    DEFAULT_IMMUNE_MAX_ITERS,
    get_settings,
)
from app.core.errors import GridGuardError
from app.core.logger import setup_logger
from app.schema.Dispatch import Dispatch, UpdateRule
from app.schema.Grid import Grid
from app.schema.PrimaryResponse import AttackBounds
from app.schema.RawCase import CapacityMode, CapacityRule
from app.schema.Report import DispatchEntry, FlowEntry, ReportDocument
from app.schema.RunConfig import RunConfig
from app.service import run_history_service
from app.service.case_io_service import emit_report, parse_attack_bounds, write_report
from app.service.grid_service import load_grid

logger = setup_logger("app_logger")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2


class CommandError(GridGuardError):
    pass


def _parse_droop(ctx, param, values) -> dict[int, float]:
    droop = {}
    for item in values:
        bus, sep, r = item.partition("=")
        try:
            droop[int(bus)] = float(r)
        except ValueError:
            raise click.BadParameter(f"expected BUS=R, got {item!r}")
        if not sep:
            raise click.BadParameter(f"expected BUS=R, got {item!r}")
    return droop


def case_options(func: Callable) -> Callable:
    """Options shared by every command that loads a case."""
    options = [
        click.option("--case", "case", required=True, help="Case file, alias (ieee14, ne39, ...) or builtin fixture."),
        click.option("--cap-rule", type=click.Choice([m.value for m in CapacityMode]), default="given",
                     show_default=True),
        click.option("--fraction-factor", type=float, default=1.2, show_default=True),
        click.option("--uniform-factor", type=float, default=1.1, show_default=True),
        click.option("--alpha", type=float, default=None, help="Attack size as a fraction of forecast demand."),
        click.option("--bounds-file", type=click.Path(exists=True, dir_okay=False), default=None),
        click.option("--cost-segments", type=int, default=DEFAULT_COST_SEGMENTS, show_default=True),
        click.option("--update-rule", type=click.Choice([r.value for r in UpdateRule]), default="exact",
                     show_default=True),
        click.option("--max-iters", type=int, default=DEFAULT_IMMUNE_MAX_ITERS, show_default=True),
        click.option("--discrete-step", type=float, default=DEFAULT_DISCRETE_STEP_PU, show_default=True),
        click.option("--lambda", "step", type=float, default=1.1, show_default=True),
        click.option("--stop-delta", type=float, default=1e-3, show_default=True),
        click.option("--output", type=click.Path(dir_okay=False), default=None),
        click.option("--format", "fmt", type=click.Choice(["text", "json"]), default="text", show_default=True),
        click.option("--parallel", type=int, default=None, help="Worker threads (default: all cores)."),
        click.option("--seed", type=int, default=0, show_default=True),
        click.option("--debug-lp", is_flag=True, default=False, help="Dump every LP in CPLEX LP format."),
        click.option("--record", is_flag=True, default=False, help="Record the run in the run ledger."),
        click.option("--droop", multiple=True, callback=_parse_droop, metavar="BUS=R",
                     help="Droop constant R for a bus (repeatable)."),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def build_config(**kwargs) -> RunConfig:
    try:
        return RunConfig(**kwargs)
    except ValidationError as e:
        err = e.errors()[0]
        raise CommandError(str(err.get("msg", e)).removeprefix("Value error, ")) from e


def apply_runtime(config: RunConfig) -> None:
    """Pushes per-run options into the environment-backed settings."""
    changed = False
    if config.parallel:
        os.environ["GRIDGUARD_PARALLEL"] = str(config.parallel)
        changed = True
    if config.debug_lp and not os.getenv("GRIDGUARD_LP_DUMP_DIR"):
        os.environ["GRIDGUARD_LP_DUMP_DIR"] = "lp_dump"
        changed = True
    if changed:
        get_settings.cache_clear()


def load_case_grid(config: RunConfig) -> Grid:
    rule = CapacityRule(mode=config.cap_rule, fraction_factor=config.fraction_factor,
                        uniform_factor=config.uniform_factor)
    return load_grid(config.case, rule)


def attack_bounds(config: RunConfig, grid: Grid) -> Optional[AttackBounds]:
    if config.alpha is not None:
        return AttackBounds.from_alpha(grid.demand, config.alpha)
    if config.bounds_file is not None:
        text = Path(config.bounds_file).read_text(encoding="utf-8")
        return parse_attack_bounds(text, grid.bus_ids, grid.demand, grid.base_mva)
    return None


def require_bounds(config: RunConfig, grid: Grid) -> AttackBounds:
    bounds = attack_bounds(config, grid)
    if bounds is None:
        raise CommandError("this command needs --alpha or --bounds-file")
    return bounds


def _mw(value: float, base: float) -> Optional[float]:
    return None if not np.isfinite(value) else float(value * base)


def dispatch_report(grid: Grid, config: RunConfig, dispatch: Dispatch, **meta) -> ReportDocument:
    base = grid.base_mva
    entries, flows = [], []
    if dispatch.feasible:
        for i, bus in enumerate(grid.bus_ids):
            if grid.pg_max[i] > 0 or dispatch.p_g[i] != 0:
                entries.append(DispatchEntry(bus=bus, p_mw=dispatch.p_g[i] * base, p_min_mw=grid.pg_min[i] * base,
                                             p_max_mw=grid.pg_max[i] * base))
        for k in range(grid.m):
            flows.append(FlowEntry(line=k + 1, from_bus=grid.bus_ids[grid.line_from[k]],
                                   to_bus=grid.bus_ids[grid.line_to[k]], flow_mw=dispatch.flows[k] * base,
                                   cap_mw=_mw(grid.line_caps[k], base)))
    kept = {k: v for k, v in dispatch.meta.items() if k in ("lp_cost", "segments", "cost_increase_pct")}
    return ReportDocument(case=grid.name, algorithm=dispatch.algorithm, alpha=config.alpha,
                          cost_dollars_per_hr=dispatch.cost, iterations=dispatch.iterations,
                          feasible=dispatch.feasible, dispatch=entries, flows=flows, causes=list(dispatch.causes),
                          meta={**kept, **meta})


def run_command(command: str, config: RunConfig, body: Callable[[], tuple[ReportDocument, int]],
                render: Optional[Callable[[ReportDocument], str]] = None) -> None:
    """
    Runs body, writes its report and exits with its code. Domain errors
    exit with 1 and a message on stderr.
    """
    run_id = None
    try:
        apply_runtime(config)
        if config.record:
            run_id = run_history_service.start_run(command, config.case, config.algorithm, config.alpha)
        logger.info(f"Running {command} on {config.case}")
        report, code = body()
        text = render(report) if render else emit_report(report, config.fmt)
        if config.output:
            write_report(text, config.output)
        else:
            click.echo(text, nl=False)
        if run_id:
            status = {EXIT_OK: run_history_service.STATUS_COMPLETED}.get(code, run_history_service.STATUS_INFEASIBLE)
            run_history_service.finish_run(run_id, status, code, report=emit_report(report, "json"))
    except GridGuardError as e:
        logger.error(f"{command} failed: {e}", exc_info=True)
        _fail(run_id, str(e))
        click.echo(f"error: {e}", err=True)
        raise SystemExit(EXIT_ERROR)
    except Exception as e:
        logger.error(f"Unexpected error in {command}: {e}", exc_info=True)
        _fail(run_id, f"internal error: {e}")
        click.echo(f"internal error: {e}", err=True)
        raise SystemExit(EXIT_ERROR)
    raise SystemExit(code)


def _fail(run_id: Optional[str], message: str) -> None:
    if not run_id:
        return
    try:
        run_history_service.finish_run(run_id, run_history_service.STATUS_FAILED, EXIT_ERROR, log_data=message)
    except GridGuardError:
        logger.warning(f"Could not mark run {run_id} as failed")


def with_config(command: str, algorithm: Optional[str] = None):
    """Builds a RunConfig from the shared options and passes it on."""

    def decorator(func: Callable) -> Callable:
        @functools.wraps(func)
        def wrapper(**kwargs):
            extra = {k: kwargs.pop(k) for k in list(kwargs) if k not in RunConfig.model_fields}
            if algorithm is not None:
                kwargs.setdefault("algorithm", algorithm)
            try:
                config = build_config(**kwargs)
            except CommandError as e:
                click.echo(f"error: {e}", err=True)
                raise SystemExit(EXIT_ERROR)
            return func(config, **extra)

        return wrapper

    return decorator
