"""The LMCK checkpoint file format.

Layout, little-endian throughout::

    "LMCK" | u16 version | u16 section count
    per section: 4-byte tag | u32 payload length | payload | u32 CRC-32 of payload

Sections:

    META  UTF-8 JSON: architecture tag, config echo, epoch, metric history, training state
    TENS  tensor table of the parameters
    BUFS  tensor table of the non-trainable buffers
    OPTM  u64 optimizer step, then a tensor table of "first/<name>" and "second/<name>" moments

A tensor table is a u32 count followed, per tensor, by a u16 name length, the
UTF-8 name, a u8 rank, one u32 per extent and the float32 values in row-major
order. Unknown section tags are skipped.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
import zlib

from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np

from levit_mc.errors import CorruptCheckpoint, FormatError, IoError
from levit_mc.models import ModelGraph
from levit_mc.tensor import Tensor


if TYPE_CHECKING:
    from collections.abc import Mapping

    from numpy.typing import NDArray


LOGGER = logging.getLogger(__name__)

MAGIC = b"LMCK"
VERSION = 1
FLOAT_DTYPE = np.dtype("<f4")

_HEADER = struct.Struct("<4sHH")
_SECTION = struct.Struct("<4sI")
_CRC = struct.Struct("<I")
_COUNT = struct.Struct("<I")
_NAME = struct.Struct("<H")
_RANK = struct.Struct("<B")
_EXTENT = struct.Struct("<I")
_STEP = struct.Struct("<Q")

TAG_META = b"META"
TAG_PARAMS = b"TENS"
TAG_BUFFERS = b"BUFS"
TAG_OPTIMIZER = b"OPTM"


@dataclass
class OptimizerSnapshot:
    """Serialized optimizer state.

    Attributes:
        step: Updates applied so far.
        first: First-moment arrays by parameter name.
        second: Second-moment arrays by parameter name.
    """

    step: int
    first: dict[str, NDArray[np.float32]]
    second: dict[str, NDArray[np.float32]]


@dataclass
class Checkpoint:
    """Everything needed to rebuild a model and continue training it.

    Attributes:
        arch: Architecture tag.
        config: Config echo of the model.
        params: Parameter arrays in model order.
        buffers: Buffer arrays in model order.
        epoch: Epochs completed.
        history: Metric log rows.
        train_state: Scheduler and bookkeeping state as plain data.
        optimizer: Optimizer state, if saved.
        version: Format version the checkpoint was read from or will be written as.
    """

    arch: str
    config: dict[str, Any]
    params: dict[str, NDArray[np.float32]]
    buffers: dict[str, NDArray[np.float32]] = field(default_factory=dict)
    epoch: int = 0
    history: list[dict[str, Any]] = field(default_factory=list)
    train_state: dict[str, Any] = field(default_factory=dict)
    optimizer: OptimizerSnapshot | None = None
    version: int = VERSION


def checkpoint_from_model(
    model: ModelGraph,
    *,
    epoch: int = 0,
    history: list[dict[str, Any]] | None = None,
    train_state: dict[str, Any] | None = None,
    optimizer: OptimizerSnapshot | None = None,
) -> Checkpoint:
    """Snapshot a model.

    Args:
        model: The model; its arrays are copied.
        epoch: Epochs completed.
        history: Metric log rows.
        train_state: Scheduler state.
        optimizer: Optimizer state.

    Returns:
        The checkpoint.
    """
    return Checkpoint(
        arch=model.arch,
        config=json.loads(json.dumps(model.config)),
        params={name: tensor.data.astype(np.float32) for name, tensor in model.params.items()},
        buffers={name: array.astype(np.float32) for name, array in model.buffers.items()},
        epoch=epoch,
        history=list(history or []),
        train_state=dict(train_state or {}),
        optimizer=optimizer,
    )


def model_from_checkpoint(checkpoint: Checkpoint) -> ModelGraph:
    """Rebuild a trainable model from a checkpoint.

    Args:
        checkpoint: The checkpoint.

    Returns:
        The model; its arrays are copies.
    """
    return ModelGraph(
        arch=checkpoint.arch,
        config=json.loads(json.dumps(checkpoint.config)),
        params={
            name: Tensor(array.copy(), requires_grad=True, dtype=np.float32)
            for name, array in checkpoint.params.items()
        },
        buffers={name: array.astype(np.float32) for name, array in checkpoint.buffers.items()},
    )


def _encode_table(arrays: Mapping[str, NDArray[np.floating]]) -> bytes:
    parts = [_COUNT.pack(len(arrays))]
    for name, array in arrays.items():
        encoded = name.encode("utf-8")
        parts.append(_NAME.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_RANK.pack(array.ndim))
        parts.extend(_EXTENT.pack(extent) for extent in array.shape)
        parts.append(np.ascontiguousarray(array, dtype=FLOAT_DTYPE).tobytes())
    return b"".join(parts)


class _Reader:
    """Cursor over a section payload; running past the end means corruption."""

    def __init__(self, payload: bytes, tag: bytes) -> None:
        self.payload = payload
        self.tag = tag.decode("ascii", "replace")
        self.offset = 0

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            err = f"section {self.tag} ends early at byte {len(self.payload)}"
            raise CorruptCheckpoint(err)
        chunk = self.payload[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: struct.Struct) -> tuple[Any, ...]:
        return fmt.unpack(self.take(fmt.size))

    def done(self) -> None:
        if self.offset != len(self.payload):
            err = f"section {self.tag} has {len(self.payload) - self.offset} trailing bytes"
            raise CorruptCheckpoint(err)


def _decode_table(reader: _Reader) -> dict[str, NDArray[np.float32]]:
    (count,) = reader.unpack(_COUNT)
    arrays: dict[str, NDArray[np.float32]] = {}
    for _ in range(count):
        (length,) = reader.unpack(_NAME)
        try:
            name = reader.take(length).decode("utf-8")
        except UnicodeDecodeError as exc:
            err = f"section {reader.tag}: tensor name is not UTF-8"
            raise CorruptCheckpoint(err) from exc
        (rank,) = reader.unpack(_RANK)
        shape = tuple(reader.unpack(_EXTENT)[0] for _ in range(rank))
        size = int(np.prod(shape, dtype=np.int64))
        data = reader.take(size * FLOAT_DTYPE.itemsize)
        arrays[name] = np.frombuffer(data, dtype=FLOAT_DTYPE).astype(np.float32).reshape(shape)
    return arrays


def _moments(
    table: Mapping[str, NDArray[np.float32]],
    prefix: str,
) -> dict[str, NDArray[np.float32]]:
    return {name.removeprefix(prefix): a for name, a in table.items() if name.startswith(prefix)}


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    """Serialize a checkpoint.

    Args:
        checkpoint: The checkpoint.

    Returns:
        The file content.
    """
    meta = {
        "arch": checkpoint.arch,
        "config": checkpoint.config,
        "epoch": checkpoint.epoch,
        "history": checkpoint.history,
        "train_state": checkpoint.train_state,
    }
    sections = [
        (TAG_META, json.dumps(meta, sort_keys=True).encode("utf-8")),
        (TAG_PARAMS, _encode_table(checkpoint.params)),
        (TAG_BUFFERS, _encode_table(checkpoint.buffers)),
    ]
    if checkpoint.optimizer is not None:
        moments = {f"first/{name}": array for name, array in checkpoint.optimizer.first.items()}
        optimizer = checkpoint.optimizer
        moments.update({f"second/{name}": array for name, array in optimizer.second.items()})
        sections.append((TAG_OPTIMIZER, _STEP.pack(optimizer.step) + _encode_table(moments)))
    parts = [_HEADER.pack(MAGIC, VERSION, len(sections))]
    for tag, payload in sections:
        parts.extend((_SECTION.pack(tag, len(payload)), payload, _CRC.pack(zlib.crc32(payload))))
    return b"".join(parts)


def _split_sections(data: bytes) -> dict[bytes, bytes]:
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        err = "not an LMCK checkpoint (bad magic)"
        raise FormatError(err)
    if len(data) < _HEADER.size:
        err = "checkpoint header is truncated"
        raise CorruptCheckpoint(err)
    _, version, count = _HEADER.unpack_from(data)
    if version != VERSION:
        err = f"unsupported LMCK version {version}, this build reads version {VERSION}"
        raise FormatError(err)
    offset = _HEADER.size
    sections: dict[bytes, bytes] = {}
    for index in range(count):
        if offset + _SECTION.size > len(data):
            err = f"checkpoint truncated in the header of section {index}"
            raise CorruptCheckpoint(err)
        tag, length = _SECTION.unpack_from(data, offset)
        offset += _SECTION.size
        end = offset + length
        if end + _CRC.size > len(data):
            err = f"checkpoint truncated in section {tag!r}"
            raise CorruptCheckpoint(err)
        payload = data[offset:end]
        (crc,) = _CRC.unpack_from(data, end)
        if zlib.crc32(payload) != crc:
            err = f"checksum mismatch in section {tag!r}"
            raise CorruptCheckpoint(err)
        sections[tag] = payload
        offset = end + _CRC.size
    if offset != len(data):
        err = f"{len(data) - offset} unexpected bytes after the last section"
        raise CorruptCheckpoint(err)
    return sections


def decode_checkpoint(data: bytes) -> Checkpoint:
    """Parse a checkpoint.

    Args:
        data: The file content.

    Returns:
        The checkpoint.

    Raises:
        FormatError: If the magic or version is wrong.
        CorruptCheckpoint: If the content is truncated, fails a checksum or lacks a section.
    """
    sections = _split_sections(data)
    for tag in (TAG_META, TAG_PARAMS, TAG_BUFFERS):
        if tag not in sections:
            err = f"checkpoint has no {tag.decode()} section"
            raise CorruptCheckpoint(err)
    for tag in sections.keys() - {TAG_META, TAG_PARAMS, TAG_BUFFERS, TAG_OPTIMIZER}:
        LOGGER.debug("skipping unknown checkpoint section %r", tag)
    try:
        meta = json.loads(sections[TAG_META].decode("utf-8"))
        arch, config = str(meta["arch"]), dict(meta["config"])
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        err = "checkpoint META section is not valid JSON metadata"
        raise CorruptCheckpoint(err) from exc
    tables = {}
    for tag in (TAG_PARAMS, TAG_BUFFERS):
        reader = _Reader(sections[tag], tag)
        tables[tag] = _decode_table(reader)
        reader.done()
    optimizer = None
    if TAG_OPTIMIZER in sections:
        reader = _Reader(sections[TAG_OPTIMIZER], TAG_OPTIMIZER)
        (step,) = reader.unpack(_STEP)
        moments = _decode_table(reader)
        reader.done()
        optimizer = OptimizerSnapshot(
            step=int(step),
            first=_moments(moments, "first/"),
            second=_moments(moments, "second/"),
        )
    return Checkpoint(
        arch=arch,
        config=config,
        params=tables[TAG_PARAMS],
        buffers=tables[TAG_BUFFERS],
        epoch=int(meta.get("epoch", 0)),
        history=list(meta.get("history", [])),
        train_state=dict(meta.get("train_state", {})),
        optimizer=optimizer,
    )


def save_checkpoint(checkpoint: Checkpoint, path: Path) -> None:
    """Write a checkpoint atomically.

    Args:
        checkpoint: The checkpoint.
        path: Destination file.

    Raises:
        IoError: If the file cannot be written.
    """
    data = encode_checkpoint(checkpoint)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    except OSError as exc:
        err = f"cannot write checkpoint {path}: {exc.strerror or exc}"
        raise IoError(err) from exc
    try:
        with os.fdopen(fd, "wb") as stream:
            stream.write(data)
        Path(tmp).replace(path)
    except OSError as exc:
        Path(tmp).unlink(missing_ok=True)
        err = f"cannot write checkpoint {path}: {exc.strerror or exc}"
        raise IoError(err) from exc
    LOGGER.debug("saved %s checkpoint (%d bytes) to %s", checkpoint.arch, len(data), path)


def load_checkpoint(path: Path) -> Checkpoint:
    """Read a checkpoint file.

    Args:
        path: The file.

    Returns:
        The checkpoint.

    Raises:
        IoError: If the file cannot be read.
    """
    try:
        data = path.read_bytes()
    except OSError as exc:
        err = f"cannot read checkpoint {path}: {exc.strerror or exc}"
        raise IoError(err) from exc
    return decode_checkpoint(data)
