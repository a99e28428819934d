"""
This module contains the exception hierarchy and a few helpers shared by
the rest of the package.

Generally, functions starting with an underscore (_) will be
under-the-hood, while the rest are user functions

====================================
Copyright srnet-lite authors, 2024-present
====================================
"""

from __future__ import annotations

from typing import Iterable, Optional, Sequence, Tuple, Union


# Custom exceptions
class SRNetException(Exception):
    pass


class ShapeError(SRNetException, ValueError):
    pass


class ConvSpecError(SRNetException, ValueError):
    pass


class AdjointNotFound(SRNetException):
    pass


class GraphError(SRNetException):
    pass


class CheckpointError(SRNetException):
    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path is not None else message)


class PNMError(SRNetException, ValueError):
    def __init__(self, message: str, offset: int):
        self.message = message
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class ConfigError(SRNetException, ValueError):
    pass


class DatasetError(SRNetException):
    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path is not None else message)


def parse_int_list(value: Union[str, Sequence[int]], name: str) -> Tuple[int, ...]:
    """
    Parses a comma separated list of integers, such as ``"64, 48, 32"``.

    :param value: Either the raw string or an already parsed sequence.
    :type value: Union[str, Sequence[int]]
    :param name: The name of the setting, used in error messages.
    :type name: str
    :return: A tuple of integers.
    :rtype: tuple[int, ...]

    :raises ConfigError: If an item is not an integer.
    """

    if not isinstance(value, str):
        return tuple(int(item) for item in value)

    items = [item.strip() for item in value.split(",") if item.strip()]
    try:
        return tuple(int(item) for item in items)
    except ValueError:
        raise ConfigError(f"{name} must be a comma separated list of integers, not {value!r}") from None


def format_int_list(values: Iterable[int]) -> str:
    """The inverse of :func:`parse_int_list`."""
    return ",".join(str(value) for value in values)


def relative_error(analytic: float, numeric: float) -> float:
    """|a - f| / max(|a|, |f|, 1e-8)"""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
