"""CLI entrypoint."""

from __future__ import annotations

import logging
import sys

from importlib import import_module
from typing import TYPE_CHECKING

from levit_mc.arg_parser import USAGE_EXIT, parse
from levit_mc.errors import LevitMcError, UsageError
from levit_mc.utils import Colors, configure_logging, echo


if TYPE_CHECKING:
    from collections.abc import Sequence
    from typing import Any


LOGGER = logging.getLogger(__name__)

RUNTIME_EXIT = 2


class Cli:
    """The Cli class."""

    def __init__(self) -> None:
        """Initialize the CLI and parse CLI args."""
        self.args: dict[str, Any]

    def parse_args(self, argv: Sequence[str] | None = None) -> None:
        """Parse the command line arguments.

        Args:
            argv: Arguments without the program name.
        """
        self.args = vars(parse(argv))

    def _run_subcommand(self, subcommand: str) -> None:
        """Run the subcommand.

        Args:
            subcommand: The subcommand to run.
        """
        subcommand_module = f"levit_mc.subcommands.{subcommand}"
        subcommand_cls_name = f"{subcommand}".capitalize()
        subcommand_cls = getattr(import_module(subcommand_module), subcommand_cls_name)
        subcommand_cls(**self.args).run()

    def run(self) -> int:
        """Dispatch work to correct subcommand class.

        Returns:
            The exit code: 0 on success, 1 on a usage error, 2 on a runtime error.
        """
        subcommand = self.args.pop("subcommand")
        configure_logging(self.args.pop("verbose", 0))
        try:
            self._run_subcommand(subcommand)
        except UsageError as exc:
            echo(f"Error: {exc}", Colors.RED)
            return USAGE_EXIT
        except (LevitMcError, OSError) as exc:
            LOGGER.debug("%s failed", subcommand, exc_info=True)
            echo(f"Error: {exc}", Colors.RED)
            return RUNTIME_EXIT
        return 0


def run(argv: Sequence[str] | None = None) -> int:
    """Parse arguments and run a subcommand.

    Args:
        argv: Arguments without the program name; `sys.argv[1:]` when None.

    Returns:
        The exit code.
    """
    cli = Cli()
    try:
        cli.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else USAGE_EXIT
    return cli.run()


def main() -> None:
    """Entry point for the lmc CLI."""
    sys.exit(run())


if __name__ == "__main__":
    main()
