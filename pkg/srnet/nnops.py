"""
This module contains the operator vocabulary of the network: the unified
convolution (standard, grouped, depth-wise, dilated), channel shuffle,
bilinear upsampling, channel concatenation and slicing, ReLU, batch
normalization and the two-class softmax.

Every op comes in two layers. A ``*_array`` function works on plain numpy
arrays, and a node-level function records the op on a
:class:`~srnet.autograd.Tape` so it can be differentiated.

====================================
Copyright srnet-lite authors, 2024-present
====================================
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from . import constants
    from .autograd import Node, register_adjoint, register_op
    from .tensor import Shape
    from .utils import ConvSpecError, ShapeError
except ImportError:
    import constants
    from autograd import Node, register_adjoint, register_op
    from tensor import Shape
    from utils import ConvSpecError, ShapeError


@dataclass(frozen=True)
class ConvSpec:
    """
    The full parameterization of one convolution layer.

    Padding is symmetric zero padding on both spatial axes.

    :raises ConvSpecError: If channels are not divisible by ``groups``, or
        stride/dilation/kernel are below one.
    """

    in_channels: int
    out_channels: int
    kernel: Tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        if isinstance(self.kernel, int):
            object.__setattr__(self, "kernel", (self.kernel, self.kernel))
        else:
            object.__setattr__(self, "kernel", tuple(self.kernel))

        if min(self.in_channels, self.out_channels, self.groups) < 1:
            raise ConvSpecError(f"Channels and groups must be >= 1 in {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConvSpecError(
                f"in_channels ({self.in_channels}) and out_channels ({self.out_channels}) "
                f"must both be divisible by groups ({self.groups})"
            )
        if self.stride < 1 or self.dilation < 1 or min(self.kernel) < 1:
            raise ConvSpecError(f"stride, dilation and kernel must be >= 1 in {self}")
        if self.padding < 0:
            raise ConvSpecError(f"padding must be >= 0, not {self.padding}")

    @classmethod
    def depthwise(cls, channels: int, dilation: int = 1, kernel: int = 3) -> ConvSpec:
        """A stride-1 depth-wise conv, padded so resolution is preserved."""
        return cls(channels, channels, (kernel, kernel), 1, dilation * (kernel // 2), dilation, channels)

    @classmethod
    def pointwise(cls, in_channels: int, out_channels: int, groups: int = 1, has_bias: bool = False) -> ConvSpec:
        return cls(in_channels, out_channels, (1, 1), 1, 0, 1, groups, has_bias)

    @property
    def kind(self) -> str:
        if self.groups == 1:
            return "standard"
        if self.groups == self.in_channels == self.out_channels:
            return "depthwise"
        return "group"

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups) + self.kernel

    def output_hw(self, h: int, w: int) -> Tuple[int, int]:
        """
        ``floor((H + 2*pad - dilation*(k - 1) - 1) / stride) + 1`` on both axes.

        :raises ConvSpecError: If the output would be empty.
        """

        kh, kw = self.kernel
        out_h = (h + 2 * self.padding - self.dilation * (kh - 1) - 1) // self.stride + 1
        out_w = (w + 2 * self.padding - self.dilation * (kw - 1) - 1) // self.stride + 1
        if out_h < 1 or out_w < 1:
            raise ConvSpecError(f"Input {h}x{w} gives a non-positive output size {out_h}x{out_w} for {self}")
        return out_h, out_w

    def output_shape(self, in_shape: Shape) -> Shape:
        if in_shape.c != self.in_channels:
            raise ShapeError(f"Conv expects {self.in_channels} input channels, got {in_shape.c}")
        return Shape.of((in_shape.n, self.out_channels) + self.output_hw(in_shape.h, in_shape.w))

    def describe(self) -> str:
        kh, kw = self.kernel
        return (
            f"{self.in_channels}->{self.out_channels} k{kh}x{kw} s{self.stride} p{self.padding} "
            f"d{self.dilation} g{self.groups}{' bias' if self.has_bias else ''}"
        )


# Convolution


def _windows(xp: np.ndarray, spec: ConvSpec, out_hw: Tuple[int, int]) -> np.ndarray:
    """(n, c, out_h, out_w, kh, kw) strided view of the padded input."""

    kh, kw = spec.kernel
    d, s = spec.dilation, spec.stride
    view = sliding_window_view(xp, (d * (kh - 1) + 1, d * (kw - 1) + 1), axis=(2, 3))
    return view[:, :, ::s, ::s, ::d, ::d][:, :, : out_hw[0], : out_hw[1]]


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d_array(x: np.ndarray, spec: ConvSpec, weight: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Grouped, dilated, strided 2-D convolution on plain arrays.

    :raises ShapeError: If the input channels or weight shape do not match ``spec``.
    :raises ConvSpecError: If the output size is not positive.
    """

    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"Conv expects {spec.in_channels} input channels, got {c}")
    if tuple(weight.shape) != spec.weight_shape:
        raise ShapeError(f"Weight shape {tuple(weight.shape)} does not match {spec.weight_shape}")

    out_hw = spec.output_hw(h, w)
    g = spec.groups
    kh, kw = spec.kernel
    cols = _windows(_pad(x, spec.padding), spec, out_hw).reshape(n, g, c // g, *out_hw, kh, kw)
    weight_g = weight.reshape(g, spec.out_channels // g, c // g, kh, kw)

    out = np.einsum("ngcyxij,gocij->ngoyx", cols, weight_g, optimize=True).reshape(n, spec.out_channels, *out_hw)
    if bias is not None:
        out = out + bias.reshape(1, spec.out_channels, 1, 1)
    return out


@register_op("conv2d")
def _conv2d_forward(x, weight, *bias, spec: ConvSpec):
    out = conv2d_array(x, spec, weight, bias[0] if bias else None)
    return out, {"x": x, "weight": weight}


@register_adjoint("conv2d")
def _conv2d_adjoint(grad, saved, needs, spec: ConvSpec):
    x, weight = saved["x"], saved["weight"]
    n, c, h, w = x.shape
    g, d, s, p = spec.groups, spec.dilation, spec.stride, spec.padding
    kh, kw = spec.kernel
    out_h, out_w = grad.shape[2:]
    grad_g = grad.reshape(n, g, spec.out_channels // g, out_h, out_w)

    grad_x = grad_weight = None
    if needs[1]:
        xp = _pad(x, p)
        cols = _windows(xp, spec, (out_h, out_w)).reshape(n, g, c // g, out_h, out_w, kh, kw)
        grad_weight = np.einsum("ngoyx,ngcyxij->gocij", grad_g, cols, optimize=True).reshape(spec.weight_shape)

    if needs[0]:
        weight_g = weight.reshape(g, spec.out_channels // g, c // g, kh, kw)
        grad_cols = np.einsum("ngoyx,gocij->ngcyxij", grad_g, weight_g, optimize=True).reshape(
            n, c, out_h, out_w, kh, kw
        )
        grad_xp = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for i in range(kh):
            for j in range(kw):
                grad_xp[
                    :, :, i * d : i * d + s * (out_h - 1) + 1 : s, j * d : j * d + s * (out_w - 1) + 1 : s
                ] += grad_cols[..., i, j]
        grad_x = grad_xp[:, :, p : p + h, p : p + w]

    grads = [grad_x, grad_weight]
    if len(needs) == 3:
        grads.append(grad.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1) if needs[2] else None)
    return tuple(grads)


def conv2d(x: Node, spec: ConvSpec, weight: Node, bias: Optional[Node] = None) -> Node:
    """
    Records a convolution.

    :param x: Input, with ``spec.in_channels`` channels.
    :type x: Node
    :param spec: The layer parameters.
    :type spec: ConvSpec
    :param weight: Weights of shape ``(out_channels, in_channels / groups, kh, kw)``.
    :type weight: Node
    :param bias: Bias of shape ``(1, out_channels, 1, 1)``.
    :type bias: Node, optional
    :return: Output node of shape ``(n, out_channels, out_h, out_w)``.
    :rtype: Node

    :raises ShapeError: On a channel or weight shape mismatch.
    :raises ConvSpecError: On a non-positive output size.
    """

    inputs = [x, weight] if bias is None else [x, weight, bias]
    return x.tape.apply("conv2d", inputs, spec=spec)


# Channel shuffle


def channel_shuffle_array(x: np.ndarray, groups: int) -> np.ndarray:
    """
    Moves input channel ``k`` to output index ``(k mod groups) * (C / groups) + k // groups``.

    :raises ShapeError: If ``C`` is not divisible by ``groups``.
    """

    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ShapeError(f"Channel count {c} is not divisible by {groups} shuffle groups")
    return x.reshape(n, c // groups, groups, h, w).transpose(0, 2, 1, 3, 4).reshape(n, c, h, w)


@register_op("channel_shuffle")
def _channel_shuffle_forward(x, groups: int):
    return channel_shuffle_array(x, groups), {}


@register_adjoint("channel_shuffle")
def _channel_shuffle_adjoint(grad, saved, needs, groups: int):
    return (channel_shuffle_array(grad, grad.shape[1] // groups),)


def channel_shuffle(x: Node, groups: int) -> Node:
    """
    Records a channel shuffle. See :func:`channel_shuffle_array` for the permutation.

    :raises ShapeError: If the channel count is not divisible by ``groups``.
    """

    if groups < 1 or x.shape.c % groups:
        raise ShapeError(f"Channel count {x.shape.c} is not divisible by {groups} shuffle groups")
    return x.tape.apply("channel_shuffle", [x], groups=groups)


# Bilinear upsampling


def _interpolation_matrix(size: int, factor: int) -> np.ndarray:
    """(factor * size, size) matrix for align-corners=false linear interpolation."""

    out = np.zeros((size * factor, size))
    for target in range(size * factor):
        source = min(max((target + 0.5) / factor - 0.5, 0.0), size - 1)
        low = int(np.floor(source))
        high = min(low + 1, size - 1)
        weight = source - low
        out[target, low] += 1.0 - weight
        out[target, high] += weight
    return out


def bilinear_upsample_array(x: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1:
        raise ValueError(f"Upsampling factor must be >= 1, not {factor}")
    if factor == 1:
        return x.copy()
    rows = _interpolation_matrix(x.shape[2], factor)
    cols = _interpolation_matrix(x.shape[3], factor)
    return np.einsum("ih,nchw,jw->ncij", rows, x, cols, optimize=True)


@register_op("bilinear_upsample")
def _bilinear_upsample_forward(x, factor: int):
    return bilinear_upsample_array(x, factor), {"hw": x.shape[2:]}


@register_adjoint("bilinear_upsample")
def _bilinear_upsample_adjoint(grad, saved, needs, factor: int):
    if factor == 1:
        return (grad,)
    rows = _interpolation_matrix(saved["hw"][0], factor)
    cols = _interpolation_matrix(saved["hw"][1], factor)
    return (np.einsum("ih,ncij,jw->nchw", rows, grad, cols, optimize=True),)


def bilinear_upsample(x: Node, factor: int) -> Node:
    """
    Upsamples by an integer factor, sampling source coordinate
    ``s = (t + 0.5) / factor - 0.5`` clamped to the input (align-corners=false).

    :raises ValueError: If ``factor`` is below one.
    """

    if factor < 1:
        raise ValueError(f"Upsampling factor must be >= 1, not {factor}")
    return x.tape.apply("bilinear_upsample", [x], factor=int(factor))


# Concatenation and slicing


@register_op("concat_channels")
def _concat_forward(a, b):
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"Cannot concatenate {a.shape} and {b.shape}: n, h, w must match")
    return np.concatenate([a, b], axis=1), {"split": a.shape[1]}


@register_adjoint("concat_channels")
def _concat_adjoint(grad, saved, needs):
    return grad[:, : saved["split"]], grad[:, saved["split"] :]


def concat_channels(a: Node, b: Node) -> Node:
    """
    Stacks channels, ``a`` first.

    :raises ShapeError: If batch or spatial sizes differ.
    """

    return a.tape.apply("concat_channels", [a, b])


@register_op("slice_channels")
def _slice_forward(x, start: int, stop: int):
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"Channel slice [{start}:{stop}] is out of range for {x.shape[1]} channels")
    return x[:, start:stop].copy(), {"channels": x.shape[1]}


@register_adjoint("slice_channels")
def _slice_adjoint(grad, saved, needs, start: int, stop: int):
    n, _, h, w = grad.shape
    out = np.zeros((n, saved["channels"], h, w))
    out[:, start:stop] = grad
    return (out,)


def slice_channels(x: Node, start: int, stop: int) -> Node:
    return x.tape.apply("slice_channels", [x], start=start, stop=stop)


# ReLU


@register_op("relu", kink=True)
def _relu_forward(x):
    return np.maximum(x, 0.0), {"mask": x > 0}


@register_adjoint("relu")
def _relu_adjoint(grad, saved, needs):
    # Subgradient at exactly 0 is 0
    return (grad * saved["mask"],)


def relu(x: Node) -> Node:
    return x.tape.apply("relu", [x])


# Batch normalization


@dataclass
class BatchNormState:
    """Running statistics of one batch norm layer, owned by the training thread."""

    channels: int
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    momentum: float = constants.BN_MOMENTUM
    eps: float = constants.BN_EPS

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels)
        if self.running_var is None:
            self.running_var = np.ones(self.channels)

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray, count: int):
        unbiased = batch_var * count / (count - 1) if count > 1 else batch_var
        self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * batch_mean
        self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased


@register_op("batch_norm")
def _batch_norm_forward(x, gamma, beta, mode: str, running_mean=None, running_var=None, eps=constants.BN_EPS):
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    out = gamma * x_hat + beta
    return out, {"x_hat": x_hat, "inv_std": inv_std, "gamma": gamma, "mean": mean, "var": var}


@register_adjoint("batch_norm")
def _batch_norm_adjoint(grad, saved, needs, mode: str, **_):
    x_hat, inv_std, gamma = saved["x_hat"], saved["inv_std"].reshape(1, -1, 1, 1), saved["gamma"]
    grad_gamma = (grad * x_hat).sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1) if needs[1] else None
    grad_beta = grad.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1) if needs[2] else None

    grad_x = None
    if needs[0]:
        grad_x_hat = grad * gamma
        if mode == "train":
            count = grad.shape[0] * grad.shape[2] * grad.shape[3]
            grad_x = (
                inv_std
                / count
                * (
                    count * grad_x_hat
                    - grad_x_hat.sum(axis=(0, 2, 3), keepdims=True)
                    - x_hat * (grad_x_hat * x_hat).sum(axis=(0, 2, 3), keepdims=True)
                )
            )
        else:
            grad_x = grad_x_hat * inv_std
    return grad_x, grad_gamma, grad_beta


def batch_norm(x: Node, gamma: Node, beta: Node, state: BatchNormState, mode: str = "train") -> Node:
    """
    Per-channel batch normalization.

    In train mode the batch statistics are used and ``state`` is updated
    with momentum; in eval mode the running statistics are used.

    :param gamma: Scale, shape ``(1, C, 1, 1)``.
    :type gamma: Node
    :param beta: Shift, shape ``(1, C, 1, 1)``.
    :type beta: Node
    :param state: Running statistics for this layer.
    :type state: BatchNormState
    :param mode: ``"train"`` or ``"eval"``.
    :type mode: str, optional

    :raises ShapeError: If gamma/beta do not have ``C`` entries.
    :raises ValueError: If the mode is unknown.
    """

    channels = x.shape.c
    if gamma.data.size != channels or beta.data.size != channels or state.channels != channels:
        raise ShapeError(f"batch_norm on {channels} channels got gamma/beta/state of another length")
    if mode not in ("train", "eval"):
        raise ValueError(f'mode must be "train" or "eval", not {mode!r}')

    if mode == "eval":
        return x.tape.apply(
            "batch_norm",
            [x, gamma, beta],
            mode=mode,
            running_mean=state.running_mean.copy(),
            running_var=state.running_var.copy(),
            eps=state.eps,
        )

    node = x.tape.apply("batch_norm", [x, gamma, beta], mode=mode, eps=state.eps)
    state.update(node.saved["mean"], node.saved["var"], x.shape.n * x.shape.h * x.shape.w)
    return node


# Two-class softmax


def softmax2_array(logits: np.ndarray) -> np.ndarray:
    if logits.shape[1] != 2:
        raise ShapeError(f"softmax2 needs exactly 2 channels, got {logits.shape[1]}")
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


@register_op("softmax2")
def _softmax2_forward(logits):
    probs = softmax2_array(logits)
    return probs, {"probs": probs}


@register_adjoint("softmax2")
def _softmax2_adjoint(grad, saved, needs):
    probs = saved["probs"]
    return (probs * (grad - (grad * probs).sum(axis=1, keepdims=True)),)


def softmax2(logits: Node) -> Node:
    """
    Per-pixel softmax over channel 0 (non-salient) and channel 1 (salient).

    :raises ShapeError: If there are not exactly two channels.
    """

    if logits.shape.c != 2:
        raise ShapeError(f"softmax2 needs exactly 2 channels, got {logits.shape.c}")
    return logits.tape.apply("softmax2", [logits])
