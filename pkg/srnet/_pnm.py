"""
Binary portable anymap codec: P5 (graymap) for masks and saliency maps, P6
(pixmap) for images. Only ``maxval == 255`` is accepted.

Arrays handed in and out are float64 in [0, 1] with shape ``(c, h, w)``.

====================================
Copyright srnet-lite authors, 2024-present
====================================
"""

from __future__ import annotations

import os
from typing import Tuple, Union

import numpy as np

try:
    from .utils import DatasetError, PNMError
except ImportError:
    from utils import DatasetError, PNMError

MAGIC_TO_CHANNELS = {b"P5": 1, b"P6": 3}
CHANNELS_TO_MAGIC = {channels: magic for magic, channels in MAGIC_TO_CHANNELS.items()}
MAXVAL = 255
_WHITESPACE = b" \t\r\n\x0b\x0c"


def _next_token(data: bytes, offset: int) -> Tuple[bytes, int]:
    """Reads one header token, skipping whitespace and ``#`` comments."""

    while offset < len(data):
        if data[offset : offset + 1] == b"#":
            end = data.find(b"\n", offset)
            offset = len(data) if end == -1 else end + 1
        elif data[offset] in _WHITESPACE:
            offset += 1
        else:
            break

    start = offset
    while offset < len(data) and data[offset] not in _WHITESPACE and data[offset : offset + 1] != b"#":
        offset += 1
    if start == offset:
        raise PNMError("Header ended early", start)
    return data[start:offset], offset


def _header_int(data: bytes, offset: int, what: str) -> Tuple[int, int]:
    token, end = _next_token(data, offset)
    if not token.isdigit():
        raise PNMError(f"Expected {what}, found {token[:16]!r}", end - len(token))
    return int(token), end


def quantize(values: np.ndarray) -> np.ndarray:
    """``round(255 * v)`` with halves rounded down, clipped to 0..255."""
    return np.clip(np.ceil(np.asarray(values, dtype=np.float64) * MAXVAL - 0.5), 0, MAXVAL).astype(np.uint8)


def decode_pnm(data: bytes) -> np.ndarray:
    """
    Parses a P5 or P6 file.

    :param data: The raw file contents.
    :type data: bytes
    :return: The image as float64 in [0, 1], shape ``(c, h, w)``.
    :rtype: numpy.ndarray

    :raises PNMError: On a malformed header, a maxval other than 255, or a
        truncated payload. The error carries the byte offset.
    """

    magic = data[:2]
    if magic not in MAGIC_TO_CHANNELS:
        raise PNMError(f"Unsupported magic {magic!r}, expected P5 or P6", 0)
    channels = MAGIC_TO_CHANNELS[magic]

    width, offset = _header_int(data, 2, "width")
    height, offset = _header_int(data, offset, "height")
    maxval, offset = _header_int(data, offset, "maxval")
    if width < 1 or height < 1:
        raise PNMError(f"Empty image {width}x{height}", offset)
    if maxval != MAXVAL:
        raise PNMError(f"maxval must be {MAXVAL}, not {maxval}", offset)
    if offset >= len(data) or data[offset] not in _WHITESPACE:
        raise PNMError("Expected a single whitespace byte after maxval", offset)
    offset += 1

    expected = width * height * channels
    payload = data[offset : offset + expected]
    if len(payload) != expected:
        raise PNMError(f"Truncated payload: {len(payload)} of {expected} bytes", offset + len(payload))

    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return pixels.transpose(2, 0, 1).astype(np.float64) / MAXVAL


def encode_pnm(values: np.ndarray) -> bytes:
    """
    The inverse of :func:`decode_pnm`. One channel encodes as P5, three as P6.

    :raises ValueError: On any other channel count.
    """

    values = np.asarray(values)
    if values.ndim == 2:
        values = values[None]
    if values.ndim != 3 or values.shape[0] not in CHANNELS_TO_MAGIC:
        raise ValueError(f"Expected a (1, h, w) or (3, h, w) array, not {values.shape}")

    channels, height, width = values.shape
    header = b"%s\n%d %d\n%d\n" % (CHANNELS_TO_MAGIC[channels], width, height, MAXVAL)
    return header + quantize(values).transpose(1, 2, 0).tobytes()


def read_pnm(path: Union[str, os.PathLike]) -> np.ndarray:
    """
    :raises DatasetError: If the file cannot be read.
    :raises PNMError: If it is malformed.
    """

    try:
        with open(path, "rb") as file:
            data = file.read()
    except OSError as e:
        raise DatasetError(f"Cannot read image: {e.strerror or e}", os.fspath(path)) from e
    try:
        return decode_pnm(data)
    except PNMError as e:
        raise PNMError(f"{os.fspath(path)}: {e.message}", e.offset) from None


def write_pnm(path: Union[str, os.PathLike], values: np.ndarray):
    """
    :raises DatasetError: If the file cannot be written.
    """

    data = encode_pnm(values)
    try:
        with open(path, "wb") as file:
            file.write(data)
    except OSError as e:
        raise DatasetError(f"Cannot write image: {e.strerror or e}", os.fspath(path)) from e
