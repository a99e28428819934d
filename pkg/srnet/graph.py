"""
This module contains :class:`NetworkGraph`, the ordered layer description of
a built network. The same description drives the forward pass (an
interpreter that records onto an :class:`~srnet.autograd.Tape`), training,
shape inference, the text manifest and the cost model.

Parameters are optional: a graph can be built as a pure description and
materialized later with :meth:`NetworkGraph.init_parameters`.

====================================
Copyright srnet-lite authors, 2024-present
====================================
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

try:
    from . import nnops
    from .autograd import Node, Tape
    from .nnops import BatchNormState, ConvSpec
    from .tensor import Shape, Tensor
    from .utils import GraphError, ShapeError
except ImportError:
    import nnops
    from autograd import Node, Tape
    from nnops import BatchNormState, ConvSpec
    from tensor import Shape, Tensor
    from utils import GraphError, ShapeError

logger = logging.getLogger(__name__)

LAYER_KINDS = ("input", "conv", "bn", "relu", "upsample", "concat", "slice", "shuffle", "softmax")
COMPONENTS = ("backbone", "fusion", "reasoning", "classifier")
COMPONENT_TO_GROUP = {"backbone": "W", "fusion": "W", "reasoning": "omega", "classifier": "theta"}


@dataclass(frozen=True)
class Layer:
    """
    One step of a :class:`NetworkGraph`.

    :ivar str name: Unique layer name; parameters are named ``<name>.<param>``.
    :ivar str kind: One of :data:`LAYER_KINDS`.
    :ivar tuple inputs: Names of the layers this one reads.
    :ivar str component: ``backbone``, ``fusion``, ``reasoning`` or ``classifier``.
    :ivar ConvSpec spec: Only for ``conv`` layers.
    :ivar dict attrs: Kind-specific settings (``factor``, ``groups``, ``start``/``stop``, ``channels``).
    """

    name: str
    kind: str
    inputs: Tuple[str, ...]
    component: str
    spec: Optional[ConvSpec] = None
    attrs: Dict[str, Any] = field(default_factory=dict, hash=False, compare=False)

    def describe(self) -> str:
        if self.spec is not None:
            return self.spec.describe()
        if not self.attrs:
            return ""
        return " ".join(f"{key}={value}" for key, value in sorted(self.attrs.items()))

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        if self.kind == "conv":
            shapes = {f"{self.name}.weight": self.spec.weight_shape}
            if self.spec.has_bias:
                shapes[f"{self.name}.bias"] = (1, self.spec.out_channels, 1, 1)
            return shapes
        if self.kind == "bn":
            channels = self.attrs["channels"]
            return {f"{self.name}.gamma": (1, channels, 1, 1), f"{self.name}.beta": (1, channels, 1, 1)}
        return {}


@dataclass
class ForwardResult:
    """What :meth:`NetworkGraph.forward` recorded."""

    tape: Tape
    nodes: Dict[str, Node]
    params: Dict[str, Node]
    output: Node


class NetworkGraph:
    """
    An ordered, named description of a network.

    :param name: A display name, such as ``"SRNet-R"``.
    :type name: str

    :ivar list layers: The layers in execution order.
    :ivar dict params: Parameter arrays by name, once materialized.
    :ivar dict bn_states: Running statistics by batch norm layer name.
    :ivar dict tags: Free-form named layers, such as ``"pyramid"`` or ``"fused"``.
    """

    def __init__(self, name: str = "network"):
        self.name = name
        self.layers: List[Layer] = []
        self._by_name: Dict[str, Layer] = {}
        self.params: Dict[str, np.ndarray] = {}
        self.bn_states: Dict[str, BatchNormState] = {}
        self.tags: Dict[str, Any] = {}
        self.seed: Optional[int] = None

    def __str__(self):
        return f"<NetworkGraph {self.name}: {len(self.layers)} layers>"

    def __repr__(self):
        return self.__str__()

    def __len__(self):
        return len(self.layers)

    def __iter__(self) -> Iterator[Layer]:
        return iter(self.layers)

    def __getitem__(self, name: str) -> Layer:
        try:
            return self._by_name[name]
        except KeyError:
            raise GraphError(f"No layer named {name!r} in {self}") from None

    # Building

    def add(self, layer: Layer) -> str:
        """
        Appends a layer and returns its name.

        :raises GraphError: If the name is taken, the kind or component is
            unknown, or an input has not been added yet.
        """

        if layer.name in self._by_name:
            raise GraphError(f"Layer name {layer.name!r} is already used")
        if layer.kind not in LAYER_KINDS:
            raise GraphError(f"Unknown layer kind {layer.kind!r}")
        if layer.component not in COMPONENTS:
            raise GraphError(f"Unknown component {layer.component!r}")
        for source in layer.inputs:
            if source not in self._by_name:
                raise GraphError(f"Layer {layer.name!r} reads {source!r}, which is not defined before it")
        if layer.kind == "conv" and layer.spec is None:
            raise GraphError(f"Conv layer {layer.name!r} has no ConvSpec")

        self.layers.append(layer)
        self._by_name[layer.name] = layer
        if layer.kind == "bn":
            self.bn_states[layer.name] = BatchNormState(layer.attrs["channels"])
        return layer.name

    def add_input(self, name: str = "input", channels: int = 3) -> str:
        return self.add(Layer(name, "input", (), "backbone", attrs={"channels": channels}))

    def add_conv(self, name: str, spec: ConvSpec, source: str, component: str) -> str:
        return self.add(Layer(name, "conv", (source,), component, spec))

    def add_conv_block(
        self, name: str, spec: ConvSpec, source: str, component: str, bn: bool = True, activation: bool = True
    ) -> str:
        """conv, then optionally batch norm and ReLU. Returns the last layer name."""

        out = self.add_conv(f"{name}.conv", spec, source, component)
        if bn:
            out = self.add(Layer(f"{name}.bn", "bn", (out,), component, attrs={"channels": spec.out_channels}))
        if activation:
            out = self.add(Layer(f"{name}.relu", "relu", (out,), component))
        return out

    def add_upsample(self, name: str, source: str, factor: int, component: str) -> str:
        return self.add(Layer(name, "upsample", (source,), component, attrs={"factor": factor}))

    def add_concat(self, name: str, first: str, second: str, component: str) -> str:
        return self.add(Layer(name, "concat", (first, second), component))

    def add_slice(self, name: str, source: str, start: int, stop: int, component: str) -> str:
        return self.add(Layer(name, "slice", (source,), component, attrs={"start": start, "stop": stop}))

    def add_shuffle(self, name: str, source: str, groups: int, component: str) -> str:
        return self.add(Layer(name, "shuffle", (source,), component, attrs={"groups": groups}))

    def add_softmax(self, name: str, source: str, component: str = "classifier") -> str:
        return self.add(Layer(name, "softmax", (source,), component))

    @property
    def output_name(self) -> str:
        if not self.layers:
            raise GraphError(f"{self} is empty")
        return self.tags.get("output", self.layers[-1].name)

    # Queries

    def count(self, kind: str, conv_kind: Optional[str] = None, component: Optional[str] = None) -> int:
        """Counts layers of a kind, optionally only convs of a given :attr:`ConvSpec.kind`."""
        return sum(
            1
            for layer in self.layers
            if layer.kind == kind
            and (conv_kind is None or (layer.spec is not None and layer.spec.kind == conv_kind))
            and (component is None or layer.component == component)
        )

    def depthwise_count(self) -> int:
        return self.count("conv", "depthwise")

    def consumers(self) -> Dict[str, List[str]]:
        out: Dict[str, List[str]] = {layer.name: [] for layer in self.layers}
        for layer in self.layers:
            for source in layer.inputs:
                out[source].append(layer.name)
        return out

    def channels_of(self, name: str) -> int:
        """The channel count a layer produces, known without an input shape."""

        layer = self[name]
        if layer.kind in ("input", "bn"):
            return layer.attrs["channels"]
        if layer.kind == "conv":
            return layer.spec.out_channels
        if layer.kind == "concat":
            return sum(self.channels_of(source) for source in layer.inputs)
        if layer.kind == "slice":
            return layer.attrs["stop"] - layer.attrs["start"]
        return self.channels_of(layer.inputs[0])

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes: Dict[str, Tuple[int, ...]] = {}
        for layer in self.layers:
            shapes.update(layer.parameter_shapes())
        return shapes

    def parameter_group(self, param_name: str) -> str:
        layer_name = param_name.rsplit(".", 1)[0]
        return COMPONENT_TO_GROUP[self[layer_name].component]

    def parameter_count(self) -> int:
        return int(sum(np.prod(shape) for shape in self.parameter_shapes().values()))

    # Shapes

    def check_input(self, shape: Shape):
        """
        :raises ShapeError: If the spatial size is not a multiple of the
            largest backbone stride (``tags["max_stride"]``).
        """

        stride = self.tags.get("max_stride", 1)
        if shape.h % stride or shape.w % stride:
            raise ShapeError(f"{self.name} needs an input size divisible by {stride}, got {shape.h}x{shape.w}")

    def infer_shapes(self, input_shape: Sequence[int]) -> Dict[str, Shape]:
        """
        Propagates shapes without computing anything.

        :param input_shape: ``(n, c, h, w)`` of the input image batch.
        :type input_shape: Sequence[int]
        :return: The output shape of every layer, by name.
        :rtype: dict[str, Shape]

        :raises ShapeError: If the input or any layer is inconsistent.
        :raises ConvSpecError: If a convolution output would be empty.
        """

        input_shape = Shape.of(input_shape)
        self.check_input(input_shape)
        shapes: Dict[str, Shape] = {}
        for layer in self.layers:
            ins = [shapes[source] for source in layer.inputs]
            if layer.kind == "input":
                if input_shape.c != layer.attrs["channels"]:
                    raise ShapeError(f"{self.name} expects {layer.attrs['channels']} input channels, got {input_shape.c}")
                out = input_shape
            elif layer.kind == "conv":
                out = layer.spec.output_shape(ins[0])
            elif layer.kind == "bn":
                if ins[0].c != layer.attrs["channels"]:
                    raise ShapeError(f"{layer.name} normalizes {layer.attrs['channels']} channels, got {ins[0].c}")
                out = ins[0]
            elif layer.kind in ("relu", "softmax"):
                if layer.kind == "softmax" and ins[0].c != 2:
                    raise ShapeError(f"{layer.name} needs 2 channels, got {ins[0].c}")
                out = ins[0]
            elif layer.kind == "upsample":
                factor = layer.attrs["factor"]
                out = Shape.of((ins[0].n, ins[0].c, ins[0].h * factor, ins[0].w * factor))
            elif layer.kind == "concat":
                first, second = ins
                if (first.n, first.h, first.w) != (second.n, second.h, second.w):
                    raise ShapeError(f"{layer.name} cannot concatenate {first} and {second}")
                out = first.with_channels(first.c + second.c)
            elif layer.kind == "slice":
                start, stop = layer.attrs["start"], layer.attrs["stop"]
                if not 0 <= start < stop <= ins[0].c:
                    raise ShapeError(f"{layer.name} slices [{start}:{stop}] out of {ins[0].c} channels")
                out = ins[0].with_channels(stop - start)
            else:  # shuffle
                if ins[0].c % layer.attrs["groups"]:
                    raise ShapeError(f"{layer.name}: {ins[0].c} channels not divisible by {layer.attrs['groups']}")
                out = ins[0]
            shapes[layer.name] = out
        return shapes

    def manifest(self, input_shape: Sequence[int]) -> str:
        """
        A text listing of every layer in execution order: index, name, kind,
        component, ConvSpec or attributes, input shapes and output shape.
        """

        shapes = self.infer_shapes(input_shape)
        lines = [f"# {self.name} input={Shape.of(input_shape)} layers={len(self.layers)}"]
        for index, layer in enumerate(self.layers):
            ins = ",".join(str(shapes[source]) for source in layer.inputs) or "-"
            lines.append(
                f"{index:4d} {layer.name:<44} {layer.kind:<8} {layer.component:<10} "
                f"{layer.describe():<36} in={ins} out={shapes[layer.name]}"
            )
        return "\n".join(lines) + "\n"

    # Parameters

    @property
    def is_materialized(self) -> bool:
        return bool(self.params) and set(self.params) == set(self.parameter_shapes())

    def init_parameters(self, seed: int):
        """
        Deterministic initialization: Kaiming-style fan-in scaling for conv
        weights (``std = sqrt(2 / fan_in)``), zero biases, batch norm gamma 1
        and beta 0. Parameters are drawn in layer order from one generator.
        """

        rng = np.random.default_rng(seed)
        self.params = {}
        for layer in self.layers:
            if layer.kind == "conv":
                spec = layer.spec
                fan_in = (spec.in_channels // spec.groups) * spec.kernel[0] * spec.kernel[1]
                self.params[f"{layer.name}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=spec.weight_shape)
                if spec.has_bias:
                    self.params[f"{layer.name}.bias"] = np.zeros((1, spec.out_channels, 1, 1))
            elif layer.kind == "bn":
                channels = layer.attrs["channels"]
                self.params[f"{layer.name}.gamma"] = np.ones((1, channels, 1, 1))
                self.params[f"{layer.name}.beta"] = np.zeros((1, channels, 1, 1))
                self.bn_states[layer.name] = BatchNormState(channels)
        self.seed = seed
        logger.debug("Initialized %d parameter tensors of %s with seed %d", len(self.params), self.name, seed)

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Parameters plus batch norm running statistics, by name."""

        state = {name: value.copy() for name, value in self.params.items()}
        for name, bn_state in self.bn_states.items():
            state[f"{name}.running_mean"] = bn_state.running_mean.reshape(1, -1, 1, 1).copy()
            state[f"{name}.running_var"] = bn_state.running_var.reshape(1, -1, 1, 1).copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        """
        The inverse of :meth:`state_dict`.

        :raises GraphError: On missing, unexpected or mis-shaped entries.
        """

        expected = dict(self.parameter_shapes())
        for name, bn_state in self.bn_states.items():
            expected[f"{name}.running_mean"] = (1, bn_state.channels, 1, 1)
            expected[f"{name}.running_var"] = (1, bn_state.channels, 1, 1)

        missing = sorted(set(expected) - set(state))
        unexpected = sorted(set(state) - set(expected))
        if missing or unexpected:
            raise GraphError(f"State does not match {self.name}: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, shape in expected.items():
            if tuple(state[name].shape) != tuple(shape):
                raise GraphError(f"{name} has shape {tuple(state[name].shape)}, expected {tuple(shape)}")

        self.params = {name: np.array(state[name], dtype=np.float64) for name in self.parameter_shapes()}
        for name, bn_state in self.bn_states.items():
            bn_state.running_mean = np.array(state[f"{name}.running_mean"], dtype=np.float64).reshape(-1)
            bn_state.running_var = np.array(state[f"{name}.running_var"], dtype=np.float64).reshape(-1)

    # Forward

    def forward(
        self,
        image: Tensor,
        mode: str = "eval",
        tape: Optional[Tape] = None,
        timings: Optional[Dict[str, float]] = None,
    ) -> ForwardResult:
        """
        Runs the network on a batch, recording every op.

        :param image: Input batch ``(n, 3, H, W)``.
        :type image: Tensor
        :param mode: ``"train"`` (batch statistics, running stats updated) or ``"eval"``.
        :type mode: str, optional
        :param tape: Record onto this tape instead of a new one.
        :type tape: Tape, optional
        :param timings: If given, wall-clock seconds are accumulated per component.
        :type timings: dict, optional
        :return: The tape, every layer's node, every parameter node, and the output node.
        :rtype: ForwardResult

        :raises GraphError: If the parameters are not materialized.
        """

        if not self.is_materialized:
            raise GraphError(f"{self.name} has no parameters; call init_parameters() first")

        self.check_input(image.shape)
        tape = tape if tape is not None else Tape()
        nodes: Dict[str, Node] = {}
        params: Dict[str, Node] = {}

        def param(name: str) -> Node:
            if name not in params:
                params[name] = tape.parameter(Tensor(self.params[name], True), name, self.parameter_group(name))
            return params[name]

        for layer in self.layers:
            started = time.perf_counter()
            ins = [nodes[source] for source in layer.inputs]
            if layer.kind == "input":
                out = tape.constant(image)
            elif layer.kind == "conv":
                bias = param(f"{layer.name}.bias") if layer.spec.has_bias else None
                out = nnops.conv2d(ins[0], layer.spec, param(f"{layer.name}.weight"), bias)
            elif layer.kind == "bn":
                out = nnops.batch_norm(
                    ins[0], param(f"{layer.name}.gamma"), param(f"{layer.name}.beta"), self.bn_states[layer.name], mode
                )
            elif layer.kind == "relu":
                out = nnops.relu(ins[0])
            elif layer.kind == "upsample":
                out = nnops.bilinear_upsample(ins[0], layer.attrs["factor"])
            elif layer.kind == "concat":
                out = nnops.concat_channels(*ins)
            elif layer.kind == "slice":
                out = nnops.slice_channels(ins[0], layer.attrs["start"], layer.attrs["stop"])
            elif layer.kind == "shuffle":
                out = nnops.channel_shuffle(ins[0], layer.attrs["groups"])
            else:
                out = nnops.softmax2(ins[0])
            nodes[layer.name] = out
            if timings is not None:
                timings[layer.component] = timings.get(layer.component, 0.0) + time.perf_counter() - started

        return ForwardResult(tape, nodes, params, nodes[self.output_name])

    def predict(self, image: Tensor) -> Tensor:
        """Eval-mode output of the network (for a full network, the 2-channel probabilities)."""
        return self.forward(image, mode="eval").output.value
