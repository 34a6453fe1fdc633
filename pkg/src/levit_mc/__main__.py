"""A runpy entry point for levit-mc.

This makes it possible to invoke CLI
via :command:`python3 -m levit_mc`.
"""

from __future__ import annotations

from .cli import main


if __name__ == "__main__":
    main()
