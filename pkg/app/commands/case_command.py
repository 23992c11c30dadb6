import click

from app.commands.common import EXIT_OK, case_options, load_case_grid, run_command, with_config
from app.schema.Report import FlowEntry, ReportDocument
from app.schema.RunConfig import RunConfig
from app.service.case_io_service import parse_case, resolve_case, serialize_case
from app.service.grid_service import compute_base_flows, get_matrices


@click.command("flow")
@case_options
@with_config("flow", algorithm="flow")
def flow(config: RunConfig):
    """Pre-attack DC line flows of a case."""

    def body():
        grid = load_case_grid(config)
        flows_mw = compute_base_flows(grid, get_matrices(grid))
        entries = [
            FlowEntry(line=k + 1, from_bus=grid.bus_ids[grid.line_from[k]], to_bus=grid.bus_ids[grid.line_to[k]],
                      flow_mw=float(flows_mw[k]),
                      cap_mw=float(grid.line_caps[k] * grid.base_mva) if grid.line_caps[k] < float("inf") else None)
            for k in range(grid.m)
        ]
        report = ReportDocument(case=grid.name, algorithm="flow", feasible=True, flows=entries)
        return report, EXIT_OK

    run_command("flow", config, body)


@click.command("parse")
@click.option("--case", "case", required=True, help="Case file, alias or builtin fixture.")
@click.option("--output", type=click.Path(dir_okay=False), default=None)
def parse(case: str, output):
    """Prints the case as a canonical native document."""
    config = RunConfig(case=case, output=output, algorithm="parse")

    def render(report):
        return report.meta["document"]

    def body():
        name, text = resolve_case(case)
        raw = parse_case(text, name=name)
        report = ReportDocument(case=raw.name, algorithm="parse", feasible=True,
                                meta={"document": serialize_case(raw)})
        return report, EXIT_OK

    run_command("parse", config, body, render)
