import sys
import logging

import click

from library.config import (TOOLKIT_NAME, TOOLKIT_VERSION, EXIT_OK, EXIT_USAGE, configure_logging)
from library.errors import EpochVoteError
from command.synth_command import synth
from command.analyze_command import analyze
from command.theory_command import theory
from command.plot_command import plot

logger = logging.getLogger(__name__)


class ToolkitGroup(click.Group):
    """Top-level group that maps failures to the toolkit's exit codes"""
    def main(self, args=None, prog_name=None, **extra):
        extra.pop("standalone_mode", None)
        try:
            result = super().main(args, prog_name, standalone_mode=False, **extra)
        except click.exceptions.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(EXIT_USAGE)
        except click.ClickException as e:
            e.show()
            sys.exit(EXIT_USAGE)
        except EpochVoteError as e:
            logger.debug("Command failed", exc_info=True)
            click.echo(f"Error: {e}", err=True)
            sys.exit(e.exit_code)
        sys.exit(result if isinstance(result, int) else EXIT_OK)


@click.group(cls=ToolkitGroup)
@click.version_option(TOOLKIT_VERSION, prog_name=TOOLKIT_NAME)
@click.option("-v", "--verbose", is_flag=True, help="Debug logging on stderr")
def cli(verbose):
    """Ensemble prediction logs, agreement-based aggregation and the regression simulator."""
    configure_logging(verbose)


cli.add_command(synth)
cli.add_command(analyze)
cli.add_command(theory)
cli.add_command(plot)


def main():
    cli(prog_name=TOOLKIT_NAME)


if __name__ == "__main__":
    main()
