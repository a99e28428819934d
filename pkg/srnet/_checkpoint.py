"""
Binary checkpoint codec. Little-endian throughout:

    magic     4 bytes  b"SRNC"
    version   u32
    count     u32
    count records of:
        name_len  u32
        name      name_len bytes, UTF-8
        ndim      u32
        dims      ndim * u32
        values    prod(dims) * f64

====================================
Copyright srnet-lite authors, 2024-present
====================================
"""

from __future__ import annotations

import contextlib
import io
import logging
import os
import struct
from typing import BinaryIO, Dict, Union

import numpy as np

try:
    from . import constants
    from .utils import CheckpointError
except ImportError:
    import constants
    from utils import CheckpointError

logger = logging.getLogger(__name__)

_U32 = struct.Struct("<I")
_F64 = np.dtype("<f8")

PathLike = Union[str, "os.PathLike[str]"]


def _write_u32(stream: BinaryIO, value: int):
    stream.write(_U32.pack(value))


def _read_exactly(stream: BinaryIO, length: int, what: str, path: str) -> bytes:
    data = stream.read(length)
    if len(data) != length:
        raise CheckpointError(f"Truncated while reading {what} ({len(data)} of {length} bytes)", path)
    return data


def _read_u32(stream: BinaryIO, what: str, path: str) -> int:
    return _U32.unpack(_read_exactly(stream, _U32.size, what, path))[0]


def encode_state(state: Dict[str, np.ndarray]) -> bytes:
    """Encodes named arrays in insertion order."""

    stream = io.BytesIO()
    stream.write(constants.CHECKPOINT_MAGIC)
    _write_u32(stream, constants.CHECKPOINT_VERSION)
    _write_u32(stream, len(state))
    for name, value in state.items():
        encoded_name = name.encode("utf-8")
        _write_u32(stream, len(encoded_name))
        stream.write(encoded_name)
        _write_u32(stream, value.ndim)
        for dim in value.shape:
            _write_u32(stream, dim)
        stream.write(np.ascontiguousarray(value, dtype=_F64).tobytes())
    return stream.getvalue()


def decode_state(data: bytes, path: str = "<bytes>") -> Dict[str, np.ndarray]:
    """
    The inverse of :func:`encode_state`.

    :raises CheckpointError: On a bad magic, an unknown version, truncation,
        duplicate names or trailing bytes.
    """

    stream = io.BytesIO(data)
    magic = stream.read(len(constants.CHECKPOINT_MAGIC))
    if magic != constants.CHECKPOINT_MAGIC:
        raise CheckpointError(f"Not a checkpoint (magic {magic!r})", path)
    version = _read_u32(stream, "version", path)
    if version != constants.CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}", path)

    state: Dict[str, np.ndarray] = {}
    for index in range(_read_u32(stream, "record count", path)):
        name_len = _read_u32(stream, f"record {index} name length", path)
        try:
            name = _read_exactly(stream, name_len, f"record {index} name", path).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"Record {index} name is not UTF-8", path) from None
        if name in state:
            raise CheckpointError(f"Duplicate record {name!r}", path)

        ndim = _read_u32(stream, f"{name} rank", path)
        shape = tuple(_read_u32(stream, f"{name} shape", path) for _ in range(ndim))
        count = int(np.prod(shape, dtype=np.int64))
        raw = _read_exactly(stream, count * _F64.itemsize, f"{name} values", path)
        state[name] = np.frombuffer(raw, dtype=_F64).astype(np.float64).reshape(shape)

    if stream.read(1):
        raise CheckpointError("Trailing bytes after the last record", path)
    return state


def save_checkpoint(path: PathLike, state: Dict[str, np.ndarray]):
    """
    Writes ``state`` to ``path`` through a temporary file and a rename.

    :raises CheckpointError: On I/O failure.
    """

    path = os.fspath(path)
    temp_path = f"{path}.tmp"
    try:
        with open(temp_path, "wb") as file:
            file.write(encode_state(state))
        os.replace(temp_path, path)
    except OSError as e:
        raise CheckpointError(f"Cannot write checkpoint: {e.strerror or e}", path) from e
    finally:
        # Only left behind when the write or the rename failed
        with contextlib.suppress(OSError):
            os.remove(temp_path)
    logger.info("Wrote checkpoint %s (%d records)", path, len(state))


def load_checkpoint(path: PathLike) -> Dict[str, np.ndarray]:
    """
    :raises CheckpointError: On I/O failure or a malformed file.
    """

    path = os.fspath(path)
    try:
        with open(path, "rb") as file:
            data = file.read()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint: {e.strerror or e}", path) from e
    state = decode_state(data, path)
    logger.debug("Read checkpoint %s (%d records)", path, len(state))
    return state
