"""Render executable bytes as RGB image grids and normalized image tensors.

Bytes are packed three at a time into (r, g, b) pixels laid out row-major on a
near-square grid. The zero bytes appended to complete the last pixel and the last
row are counted in `pad_bytes`, which makes the packing exactly invertible. The
padding count lives in the dataset manifest so the emitted PNGs stay standard.
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
import zlib

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np

from PIL import Image

from levit_mc.errors import CorruptGrid, DecodeError, InvalidInput, IoError, UnsupportedFormat
from levit_mc.tensor import Tensor


if TYPE_CHECKING:
    from numpy.typing import NDArray


LOGGER = logging.getLogger(__name__)

CHANNELS = 3
IMAGE_SIZE = 224
NUM_CLASSES = 26
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
PNG_RGB_COLOR_TYPE = 2
PNG_BIT_DEPTH = 8
# signature, IHDR length and tag, width, height, bit depth, color type
_IHDR = struct.Struct(">8sI4sIIBB")


@dataclass(frozen=True)
class ByteSample:
    """Raw bytes of one executable.

    Attributes:
        data: The file content, at least one byte.
        source_id: Opaque identifier, usually the file stem.
        label: Optional class index in [0, 26).
    """

    data: bytes
    source_id: str
    label: int | None = None

    def __post_init__(self) -> None:
        """Validate the sample.

        Raises:
            InvalidInput: If the content is empty or the label out of range.
        """
        if len(self.data) < 1:
            err = f"sample {self.source_id!r} has no bytes"
            raise InvalidInput(err)
        if self.label is not None and not 0 <= self.label < NUM_CLASSES:
            err = f"sample {self.source_id!r}: label {self.label} outside [0, {NUM_CLASSES})"
            raise InvalidInput(err)

    @classmethod
    def from_path(cls, path: Path, label: int | None = None) -> ByteSample:
        """Read a sample from disk.

        Args:
            path: The executable.
            label: Optional class index.

        Returns:
            The sample, identified by the file stem.
        """
        return cls(data=load_bytes(path), source_id=path.stem, label=label)


@dataclass(frozen=True, eq=False)
class RgbImageGrid:
    """A row-major grid of RGB byte triples.

    Attributes:
        height: Rows.
        width: Columns.
        pixels: Array of shape (height, width, 3), dtype uint8.
        pad_bytes: Zero bytes appended while packing.
    """

    height: int
    width: int
    pixels: NDArray[np.uint8]
    pad_bytes: int = 0

    def __post_init__(self) -> None:
        """Validate the grid.

        Raises:
            CorruptGrid: If the pixel array or the padding count is inconsistent.
        """
        if self.height < 1 or self.width < 1:
            err = f"grid must be non-empty, got {self.height}x{self.width}"
            raise CorruptGrid(err)
        expected = (self.height, self.width, CHANNELS)
        if self.pixels.shape != expected or self.pixels.dtype != np.uint8:
            err = (
                f"pixels must be uint8 of shape {expected}, "
                f"got {self.pixels.dtype} {self.pixels.shape}"
            )
            raise CorruptGrid(err)
        if not 0 <= self.pad_bytes < CHANNELS * self.width + CHANNELS:
            err = f"pad_bytes {self.pad_bytes} outside [0, {CHANNELS * self.width + CHANNELS})"
            raise CorruptGrid(err)

    @property
    def total_bytes(self) -> int:
        """Length of the flattened triple stream."""
        return self.height * self.width * CHANNELS

    def __eq__(self, other: object) -> bool:
        """Compare extents, padding and pixel values.

        Args:
            other: Another grid.

        Returns:
            Whether the grids are identical.
        """
        if not isinstance(other, RgbImageGrid):
            return NotImplemented
        return (
            (self.height, self.width, self.pad_bytes)
            == (other.height, other.width, other.pad_bytes)
            and bool(np.array_equal(self.pixels, other.pixels))
        )


@dataclass(frozen=True)
class ManifestRecord:
    """One manifest line.

    Attributes:
        id: Sample identifier, unique within a manifest.
        path: PNG location, relative to the manifest directory when possible.
        label: Class index, None for unlabeled inputs.
        pad_bytes: Padding count needed to recover the original bytes.
        orig_len: Length of the original byte stream.
        split: "train", "val" or None before splitting.
    """

    id: str
    path: str
    label: int | None
    pad_bytes: int
    orig_len: int
    split: str | None = None

    def to_json(self) -> str:
        """Serialize to one JSON line, omitting an unset split.

        Returns:
            The JSON object text.
        """
        data = asdict(self)
        if self.split is None:
            del data["split"]
        return json.dumps(data, sort_keys=False)

    @classmethod
    def from_json(cls, line: str) -> ManifestRecord:
        """Parse a JSON line.

        Args:
            line: The JSON object text.

        Returns:
            The record.

        Raises:
            InvalidInput: If the line is not a valid record.
        """
        try:
            data: dict[str, Any] = json.loads(line)
            return cls(
                id=str(data["id"]),
                path=str(data["path"]),
                label=None if data.get("label") is None else int(data["label"]),
                pad_bytes=int(data["pad_bytes"]),
                orig_len=int(data["orig_len"]),
                split=data.get("split"),
            )
        except (ValueError, KeyError, TypeError) as exc:
            err = f"invalid manifest line: {line.strip()[:80]!r}"
            raise InvalidInput(err) from exc


def load_bytes(path: Path) -> bytes:
    """Read a whole file.

    Args:
        path: The file.

    Returns:
        Its content.

    Raises:
        IoError: If the file cannot be read.
    """
    try:
        return path.read_bytes()
    except OSError as exc:
        err = f"cannot read {path}: {exc.strerror or exc}"
        raise IoError(err) from exc


def grid_shape(length: int) -> tuple[int, int]:
    """Near-square layout for a byte stream.

    Args:
        length: Number of bytes.

    Returns:
        The (height, width) of the grid.
    """
    pixels = -(-length // CHANNELS)
    width = math.isqrt(pixels - 1) + 1
    return -(-pixels // width), width


def bytes_to_grid(sample: ByteSample | bytes) -> RgbImageGrid:
    """Pack bytes into an RGB grid.

    Args:
        sample: A sample or its raw bytes.

    Returns:
        The grid, zero padded at the end.

    Raises:
        InvalidInput: If there are no bytes.
    """
    data = sample.data if isinstance(sample, ByteSample) else bytes(sample)
    if not data:
        err = "cannot render an empty byte sequence"
        raise InvalidInput(err)
    height, width = grid_shape(len(data))
    total = height * width * CHANNELS
    flat = np.zeros(total, dtype=np.uint8)
    flat[: len(data)] = np.frombuffer(data, dtype=np.uint8)
    return RgbImageGrid(
        height=height,
        width=width,
        pixels=flat.reshape(height, width, CHANNELS),
        pad_bytes=total - len(data),
    )


def grid_to_bytes(grid: RgbImageGrid) -> bytes:
    """Recover the original bytes from a grid.

    Args:
        grid: A grid produced by `bytes_to_grid` or decoded with its padding count.

    Returns:
        The flattened triple stream minus the padding.

    Raises:
        CorruptGrid: If the padding would remove every byte.
    """
    if grid.pad_bytes >= grid.total_bytes:
        err = f"pad_bytes {grid.pad_bytes} >= total byte count {grid.total_bytes}"
        raise CorruptGrid(err)
    return grid.pixels.reshape(-1)[: grid.total_bytes - grid.pad_bytes].tobytes()


def _resize_axis(values: NDArray[np.float64], axis: int, size: int) -> NDArray[np.float64]:
    """Linear interpolation along one axis with half-pixel centers."""
    src = values.shape[axis]
    coords = np.clip((np.arange(size) + 0.5) * (src / size) - 0.5, 0.0, src - 1)
    low = np.floor(coords).astype(np.int64)
    high = np.minimum(low + 1, src - 1)
    frac = coords - low
    shape = [1] * values.ndim
    shape[axis] = size
    frac = frac.reshape(shape)
    return np.take(values, low, axis=axis) * (1.0 - frac) + np.take(values, high, axis=axis) * frac


def grid_to_tensor(grid: RgbImageGrid, size: int = IMAGE_SIZE) -> Tensor:
    """Resize a grid bilinearly and scale it to [0, 1].

    Args:
        grid: The grid.
        size: Side of the square output.

    Returns:
        A (3, size, size) float32 tensor, channel 0 holding red.

    Raises:
        InvalidInput: If the size is not positive.
    """
    if size < 1:
        err = f"tensor size must be positive, got {size}"
        raise InvalidInput(err)
    planes = grid.pixels.transpose(2, 0, 1).astype(np.float64)
    resized = _resize_axis(_resize_axis(planes, 1, size), 2, size)
    return Tensor(np.clip(resized / 255.0, 0.0, 1.0), dtype=np.float32)


def encode_png(grid: RgbImageGrid) -> bytes:
    """Encode the grid pixels as an 8-bit RGB PNG.

    Args:
        grid: The grid; its padding count is not stored.

    Returns:
        The PNG file content.
    """
    buffer = io.BytesIO()
    Image.fromarray(grid.pixels).save(buffer, format="PNG")
    return buffer.getvalue()


def decode_png(data: bytes, pad_bytes: int = 0) -> RgbImageGrid:
    """Decode an 8-bit RGB PNG into a grid.

    Args:
        data: The PNG file content.
        pad_bytes: Padding count from the manifest.

    Returns:
        The grid.

    Raises:
        DecodeError: If the stream is not a complete PNG.
        UnsupportedFormat: If the PNG is not 8-bit RGB.
    """
    if len(data) < _IHDR.size or not data.startswith(PNG_SIGNATURE):
        err = "not a PNG stream"
        raise DecodeError(err)
    _, _, tag, _, _, bit_depth, color_type = _IHDR.unpack_from(data)
    if tag != b"IHDR":
        err = "PNG stream does not start with an IHDR chunk"
        raise DecodeError(err)
    if bit_depth != PNG_BIT_DEPTH or color_type != PNG_RGB_COLOR_TYPE:
        err = (
            "only 8-bit RGB PNGs are supported, "
            f"got bit depth {bit_depth}, color type {color_type}"
        )
        raise UnsupportedFormat(err)
    try:
        with Image.open(io.BytesIO(data)) as image:
            image.load()
            pixels = np.asarray(image, dtype=np.uint8).copy()
    except (OSError, SyntaxError, ValueError, zlib.error) as exc:
        err = f"cannot decode PNG: {exc}"
        raise DecodeError(err) from exc
    height, width = pixels.shape[:2]
    return RgbImageGrid(height=height, width=width, pixels=pixels, pad_bytes=pad_bytes)


def read_png(path: Path, pad_bytes: int = 0) -> RgbImageGrid:
    """Decode a PNG file.

    Args:
        path: The PNG file.
        pad_bytes: Padding count from the manifest.

    Returns:
        The grid.
    """
    return decode_png(load_bytes(path), pad_bytes)


def write_png(grid: RgbImageGrid, path: Path) -> None:
    """Encode a grid to a PNG file, creating parent directories.

    Args:
        grid: The grid.
        path: Destination file.

    Raises:
        IoError: If the file cannot be written.
    """
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_png(grid))
    except OSError as exc:
        err = f"cannot write {path}: {exc.strerror or exc}"
        raise IoError(err) from exc


def byte_histogram(data: bytes) -> NDArray[np.float64]:
    """Normalized 256-bin byte histogram.

    Args:
        data: A byte stream.

    Returns:
        Byte frequencies summing to one (all zero for empty input).
    """
    counts = np.bincount(np.frombuffer(data, dtype=np.uint8), minlength=256).astype(np.float64)
    total = counts.sum()
    return counts / total if total else counts


def render_file(
    path: Path,
    out_dir: Path,
    *,
    label: int | None = None,
    base: Path | None = None,
) -> ManifestRecord:
    """Render one executable to `out_dir/<stem>.png`.

    Args:
        path: The executable.
        out_dir: Destination directory.
        label: Optional class index to record.
        base: Directory the record path is made relative to; absolute when unset.

    Returns:
        The manifest record for the image.
    """
    sample = ByteSample.from_path(path, label)
    grid = bytes_to_grid(sample)
    target = out_dir / f"{sample.source_id}.png"
    write_png(grid, target)
    LOGGER.debug("rendered %s as %dx%d (pad %d)", path, grid.height, grid.width, grid.pad_bytes)
    location = target.relative_to(base) if base is not None else target.resolve()
    return ManifestRecord(
        id=sample.source_id,
        path=location.as_posix(),
        label=label,
        pad_bytes=grid.pad_bytes,
        orig_len=len(sample.data),
    )
