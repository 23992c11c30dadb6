from typing import Optional

import click

from app.commands.alpha_command import alpha_bounds, lambda_sweep_command
from app.commands.case_command import flow, parse
from app.commands.dispatch_command import certify, conservative, immune, opf, safe, sweep
from app.commands.history_command import history
from app.commands.secondary_command import verify_secondary
from app.core.logger import VALID_LEVELS, VALID_MODES, get_current_log_level, update_log_level


@click.group()
@click.option("--log-level", type=click.Choice(VALID_LEVELS, case_sensitive=False), default=None,
              help="Log level for this run only.")
@click.option("--log-mode", type=click.Choice(VALID_MODES), default=None)
def cli(log_level: Optional[str], log_mode: Optional[str]):
    """Attack-robust dispatch and secondary controllability for DC power grids."""
    if log_level or log_mode:
        update_log_level(log_level or get_current_log_level()["log_level"], log_mode, persist=False)


@cli.command("log-level")
@click.argument("level", required=False)
@click.option("--mode", type=click.Choice(VALID_MODES), default=None)
def log_level_command(level: Optional[str], mode: Optional[str]):
    """Shows or persistently changes the log level."""
    if level is None:
        current = get_current_log_level()
    else:
        try:
            current = update_log_level(level, mode)
        except ValueError as e:
            raise click.BadParameter(str(e))
    for key, value in current.items():
        click.echo(f"{key}: {value}")


for command in (opf, safe, conservative, immune, sweep, certify, verify_secondary, alpha_bounds,
                lambda_sweep_command, flow, parse, history):
    cli.add_command(command)


if __name__ == "__main__":
    cli()
