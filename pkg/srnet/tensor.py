"""
This module contains the dense 4-D :class:`Tensor` that every other module
computes with, along with its shape algebra and elementwise arithmetic.

Data is always float64 in row-major ``(n, c, h, w)`` order.

====================================
Copyright srnet-lite authors, 2024-present
====================================
"""

from __future__ import annotations

from typing import Iterable, NamedTuple, Sequence, Union

import numpy as np

try:
    from .utils import ShapeError
except ImportError:
    from utils import ShapeError

_ELEMENTWISE_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


class Shape(NamedTuple):
    """Batch, channels, height, width. All four are at least one."""

    n: int
    c: int
    h: int
    w: int

    @classmethod
    def of(cls, dims: Iterable[int]) -> Shape:
        """
        Validates and builds a shape from any four integers.

        :raises ShapeError: If there are not exactly four dimensions, or
            one of them is below one.
        """

        dims = tuple(int(dim) for dim in dims)
        if len(dims) != 4:
            raise ShapeError(f"Expected a 4-D shape (n, c, h, w), not {dims}")
        if any(dim < 1 for dim in dims):
            raise ShapeError(f"All dimensions must be >= 1, not {dims}")
        return cls(*dims)

    @property
    def size(self) -> int:
        return self.n * self.c * self.h * self.w

    @property
    def spatial(self) -> tuple[int, int]:
        return self.h, self.w

    def with_channels(self, c: int) -> Shape:
        return Shape.of((self.n, c, self.h, self.w))

    def __str__(self):
        return f"{self.n}x{self.c}x{self.h}x{self.w}"


class Tensor:
    """
    An immutable (from the caller's perspective) dense 4-D array.

    Prefer :func:`tensor_new` over the constructor; the constructor trusts
    that ``data`` is already a 4-D float64 array.

    :param data: A 4-D numpy array.
    :type data: numpy.ndarray
    :param requires_grad: Whether the tensor is a trainable leaf.
    :type requires_grad: bool, optional

    :ivar Shape shape: The validated shape.
    :ivar numpy.ndarray data: The underlying array. Operations never write to it.
    """

    __slots__ = ("data", "shape", "requires_grad")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.shape = Shape.of(data.shape)
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad

    def __repr__(self):
        return f"<Tensor {self.shape}{' requires_grad' if self.requires_grad else ''}>"

    def __len__(self):
        return self.shape.n

    def flat(self) -> np.ndarray:
        """A copy of the data in flat (n, c, h, w) row-major order."""
        return self.data.reshape(-1).copy()

    def numpy(self) -> np.ndarray:
        """A writable copy of the data."""
        return self.data.copy()

    def all_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def channel_slice(self, start: int, stop: int) -> Tensor:
        if not 0 <= start < stop <= self.shape.c:
            raise ShapeError(f"Channel slice [{start}:{stop}] is out of range for {self.shape.c} channels")
        return Tensor(self.data[:, start:stop])

    # Golden-test text format

    def dumps(self) -> str:
        """
        Dumps the tensor as text: a header line ``n c h w``, then one real per line
        in flat order, using the shortest round-trip decimal representation.

        :return: The text dump, ending in a newline.
        :rtype: str
        """

        lines = [" ".join(str(dim) for dim in self.shape)]
        lines.extend(repr(float(value)) for value in self.data.reshape(-1))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> Tensor:
        """
        The inverse of :meth:`dumps`.

        :raises ShapeError: If the header is malformed or the value count is wrong.
        """

        lines = [line.strip() for line in text.splitlines() if line.strip()]
        if not lines:
            raise ShapeError("Empty tensor dump")
        try:
            shape = Shape.of(int(dim) for dim in lines[0].split())
            values = [float(line) for line in lines[1:]]
        except ValueError:
            raise ShapeError(f"Malformed tensor dump header {lines[0]!r}") from None
        return tensor_new(shape, values)


def tensor_new(
    shape: Union[Shape, Sequence[int]],
    fill: Union[float, Sequence[float], np.ndarray] = 0.0,
    requires_grad: bool = False,
) -> Tensor:
    """
    Creates a tensor with exactly the given contents.

    :param shape: The ``(n, c, h, w)`` shape.
    :type shape: Union[Shape, Sequence[int]]
    :param fill: Either a scalar to fill with, or a flat (or already shaped)
        array of length ``n * c * h * w``.
    :type fill: Union[float, Sequence[float], numpy.ndarray], optional
    :param requires_grad: Whether the tensor is a trainable leaf. Default is False.
    :type requires_grad: bool, optional
    :return: The new tensor.
    :rtype: Tensor

    :raises ShapeError: If the fill array has the wrong length or the shape is invalid.
    """

    shape = Shape.of(shape)
    if np.isscalar(fill):
        return Tensor(np.full(shape, float(fill), dtype=np.float64), requires_grad)

    values = np.asarray(fill, dtype=np.float64).reshape(-1)
    if values.size != shape.size:
        raise ShapeError(f"Fill has {values.size} values but shape {shape} needs {shape.size}")
    return Tensor(values.reshape(shape).copy(), requires_grad)


def zeros(shape: Union[Shape, Sequence[int]]) -> Tensor:
    return tensor_new(shape, 0.0)


def ones(shape: Union[Shape, Sequence[int]]) -> Tensor:
    return tensor_new(shape, 1.0)


def random_normal(shape: Union[Shape, Sequence[int]], seed: int, scale: float = 1.0) -> Tensor:
    """A tensor of N(0, scale^2) samples drawn from ``numpy.random.default_rng(seed)``."""
    shape = Shape.of(shape)
    return Tensor(np.random.default_rng(seed).normal(0.0, scale, size=shape))


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    """
    Pointwise ``add``, ``sub`` or ``mul`` of two tensors of identical shape.
    There is no broadcasting.

    :param a: Left operand.
    :type a: Tensor
    :param b: Right operand.
    :type b: Tensor
    :param op: One of ``"add"``, ``"sub"``, ``"mul"``.
    :type op: str
    :return: The pointwise result.
    :rtype: Tensor

    :raises ShapeError: If the shapes differ.
    :raises ValueError: If ``op`` is unknown.
    """

    try:
        func = _ELEMENTWISE_OPS[op]
    except KeyError:
        raise ValueError(f"Unknown elementwise op {op!r}, expected one of {sorted(_ELEMENTWISE_OPS)}") from None
    if a.shape != b.shape:
        raise ShapeError(f"Elementwise {op} needs identical shapes, got {a.shape} and {b.shape}")
    return Tensor(func(a.data, b.data))


def stack_batch(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenates tensors along the batch dimension."""
    if not tensors:
        raise ShapeError("Cannot stack an empty list of tensors")
    first = tensors[0].shape
    for tensor in tensors[1:]:
        if tensor.shape[1:] != first[1:]:
            raise ShapeError(f"Cannot stack {tensor.shape} onto {first}")
    return Tensor(np.concatenate([tensor.data for tensor in tensors], axis=0))
