"""Build version text for `lmc --version`: package versions, then the interpreter."""

from __future__ import annotations

import importlib.metadata
import platform

from typing import TYPE_CHECKING


if TYPE_CHECKING:
    from collections.abc import Iterable


PKGS = [
    "levit-mc",
    "numpy",
    "pillow",
    "pyyaml",
]
COLUMN = 20


def package_version(pkg: str) -> str:
    """Installed version of a distribution.

    Args:
        pkg: Distribution name.

    Returns:
        The version, or "not installed".
    """
    try:
        return importlib.metadata.version(pkg)
    except importlib.metadata.PackageNotFoundError:
        return "not installed"


def version_builder(pkgs: Iterable[str] | None = None) -> str:
    """Build a string of formatted versions.

    Args:
        pkgs: Distributions to list; `PKGS` when None.

    Returns:
        One `name version` line per distribution, then the runtime.
    """
    lines = [f"{pkg: <{COLUMN}} {package_version(pkg)}" for pkg in sorted(pkgs or PKGS)]
    runtime = f"{platform.python_implementation()} {platform.python_version()}"
    lines.append(f"{'python': <{COLUMN}} {runtime} ({platform.machine() or 'unknown'})")
    return "\n".join(lines)
