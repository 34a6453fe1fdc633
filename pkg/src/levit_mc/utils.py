"""Console helpers shared by the subcommands."""

from __future__ import annotations

import logging
import os
import sys

from typing import TYPE_CHECKING, TextIO

from levit_mc.errors import IoError


if TYPE_CHECKING:
    from pathlib import Path


LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class Colors:
    """ANSI color codes.

    Attributes:
        RED: Red color.
        GREEN: Green color.
        YELLOW: Yellow color.
        CYAN: Cyan color.
        BOLD: Bold text.
        END: Reset color.
    """

    RED = "\033[0;31m"
    GREEN = "\033[0;32m"
    YELLOW = "\033[1;33m"
    CYAN = "\033[0;36m"
    BOLD = "\033[1m"
    END = "\033[0m"


def color_enabled() -> bool:
    """Whether console output may carry ANSI codes.

    Returns:
        False when `NO_COLOR` is set.
    """
    return "NO_COLOR" not in os.environ


def paint(text: str, color: str) -> str:
    """Wrap text in a color unless colors are disabled.

    Args:
        text: The text.
        color: One of the `Colors` codes.

    Returns:
        The text, colored or unchanged.
    """
    return f"{color}{text}{Colors.END}" if color_enabled() else text


def echo(message: str, color: str | None = None, stream: TextIO | None = None) -> None:
    """Print a human-readable line, to stderr by default.

    Args:
        message: The line.
        color: Optional color.
        stream: Destination stream.
    """
    text = paint(message, color) if color else message
    print(text, file=stream or sys.stderr)  # noqa: T201


def configure_logging(verbosity: int) -> None:
    """Set up the root logger once per process.

    Args:
        verbosity: 0 for warnings, 1 for info, 2 or more for debug.
    """
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity > 1:
        level = logging.DEBUG
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def default_workers() -> int:
    """Threads to use when `--workers` is not given.

    Returns:
        The number of usable cores.
    """
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return max(1, os.cpu_count() or 1)


def write_output(text: str, path: Path | None) -> None:
    """Write machine-readable output to a file, or to stdout.

    Args:
        text: The document.
        path: Destination file; stdout when None.

    Raises:
        IoError: If the file cannot be written.
    """
    if path is None:
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        err = f"cannot write {path}: {exc.strerror or exc}"
        raise IoError(err) from exc
