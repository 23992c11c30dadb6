from typing import Optional

import click

from app.commands.common import EXIT_ERROR, EXIT_OK
from app.core.errors import GridGuardError
from app.core.logger import setup_logger
from app.service import run_history_service

logger = setup_logger("app_logger")


@click.command("history")
@click.option("--run-id", default=None, help="Print the stored report of one run.")
@click.option("--limit", type=int, default=20, show_default=True)
def history(run_id: Optional[str], limit: int):
    """Lists recorded runs, or prints one run's report."""
    try:
        if run_id:
            click.echo(run_history_service.get_report(run_id), nl=False)
        else:
            runs = run_history_service.list_runs(limit)
            click.echo(runs.to_string(index=False) if not runs.empty else "no recorded runs")
    except GridGuardError as e:
        logger.error(f"history failed: {e}")
        click.echo(f"error: {e}", err=True)
        raise SystemExit(EXIT_ERROR)
    raise SystemExit(EXIT_OK)
