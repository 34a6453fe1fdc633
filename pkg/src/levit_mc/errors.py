"""Exception hierarchy shared by every levit-mc module."""

from __future__ import annotations


class LevitMcError(Exception):
    """Base class for all errors raised by levit-mc."""


class InvalidInput(LevitMcError):  # noqa: N818
    """An argument violates an operation precondition."""


class CorruptGrid(LevitMcError):  # noqa: N818
    """An RGB grid carries padding metadata inconsistent with its pixels."""


class DecodeError(LevitMcError):
    """A PNG stream could not be decoded."""


class UnsupportedFormat(LevitMcError):  # noqa: N818
    """A PNG decoded fine but is not 8-bit RGB."""


class ShapeError(LevitMcError):
    """Tensor extents do not agree."""


class NumericError(LevitMcError):
    """A NaN or infinity surfaced during computation."""


class ConfigError(LevitMcError):
    """A configuration value or model combination is invalid."""


class IoError(LevitMcError):
    """A file or directory could not be read or written."""


class EmptyDataset(LevitMcError):  # noqa: N818
    """No samples were found where some were required."""


class StratifyError(LevitMcError):
    """A class has too few samples to be split."""


class FormatError(LevitMcError):
    """A checkpoint has a bad magic number or unknown version."""


class CorruptCheckpoint(LevitMcError):  # noqa: N818
    """A checkpoint is truncated or fails its checksum."""


class UsageError(ConfigError):
    """A command line or configuration key is not recognized."""
