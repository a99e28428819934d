"""
This module assembles networks: the toy backbones with their five-level
feature pyramid, hierarchical feature fusion, the SR-unit, the saliency
reasoning module, the classifier head, the four ablation variants and the
depth-sweep configurations.

Each ``add_*``-style builder appends layers to a
:class:`~srnet.graph.NetworkGraph` and returns the name of its output layer.

====================================
Copyright srnet-lite authors, 2024-present
====================================
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

try:
    from . import constants
    from .graph import NetworkGraph
    from .nnops import ConvSpec
    from .utils import ConfigError, ConvSpecError, format_int_list
except ImportError:
    import constants
    from graph import NetworkGraph
    from nnops import ConvSpec
    from utils import ConfigError, ConvSpecError, format_int_list

logger = logging.getLogger(__name__)

ABLATIONS = ("BPS", "HFS", "BFR", "SRNet")
BACKBONE_KINDS = ("toy_resnet_like", "toy_vgg_like")
_BACKBONE_ALIASES = {"resnet": "toy_resnet_like", "vgg": "toy_vgg_like"}

_PYRAMID = {
    "toy_resnet_like": ((64, 256, 512, 1024, 2048), (2, 4, 8, 16, 32)),
    "toy_vgg_like": ((128, 256, 512, 512, 1024), (2, 4, 8, 8, 8)),
}
_LATERAL = {
    "toy_resnet_like": (64, 128, 256, 256, 256),
    "toy_vgg_like": (128, 128, 256, 256, 256),
}
# Output channels of the top-down 3x3 convs at levels 1..4
_FUSION = (constants.FUSED_CHANNELS, 128, 256, 256)
_VGG_TOP_DILATION = 8


@dataclass(frozen=True)
class BackboneVariant:
    """
    Channel and stride interface of a toy backbone.

    :ivar str kind: ``toy_resnet_like`` or ``toy_vgg_like``.
    :ivar int width_divisor: Divides every pyramid, lateral and fusion channel
        count. 1 reproduces the full widths.

    :raises ConfigError: On an unknown kind or a divisor that does not divide
        every channel count.
    """

    kind: str = "toy_resnet_like"
    width_divisor: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", _BACKBONE_ALIASES.get(self.kind, self.kind))
        if self.kind not in BACKBONE_KINDS:
            raise ConfigError(f"{self.kind!r} is not a backbone, expected one of {BACKBONE_KINDS}")
        counts = _PYRAMID[self.kind][0] + _LATERAL[self.kind] + _FUSION
        if self.width_divisor < 1 or any(count % self.width_divisor for count in counts):
            raise ConfigError(f"width_divisor {self.width_divisor} must divide every channel count in {counts}")

    @classmethod
    def resnet(cls, width_divisor: int = 1) -> BackboneVariant:
        return cls("toy_resnet_like", width_divisor)

    @classmethod
    def vgg(cls, width_divisor: int = 1) -> BackboneVariant:
        return cls("toy_vgg_like", width_divisor)

    @property
    def short_name(self) -> str:
        return "R" if self.kind == "toy_resnet_like" else "V"

    @property
    def pyramid_channels(self) -> Tuple[int, ...]:
        return tuple(count // self.width_divisor for count in _PYRAMID[self.kind][0])

    @property
    def pyramid_strides(self) -> Tuple[int, ...]:
        return _PYRAMID[self.kind][1]

    @property
    def lateral_channels(self) -> Tuple[int, ...]:
        return tuple(count // self.width_divisor for count in _LATERAL[self.kind])

    @property
    def fusion_channels(self) -> Tuple[int, ...]:
        return tuple(count // self.width_divisor for count in _FUSION)

    @property
    def fused_channels(self) -> int:
        return self.fusion_channels[0]

    @property
    def max_stride(self) -> int:
        return max(self.pyramid_strides)


@dataclass(frozen=True)
class SRUnitConfig:
    """
    One SR-unit. ``branch2_depthwise=False`` builds a half unit whose second
    branch is only the 1x1 group conv.

    :raises ConvSpecError: On any divisibility violation.
    """

    in_channels: int
    out_channels: int
    group_count: int = constants.DEFAULT_GROUP_COUNT
    dilation_branch1: int = 1
    dilation_branch2: int = 1
    shuffle_groups: int = constants.DEFAULT_SHUFFLE_GROUPS
    branch2_depthwise: bool = True

    def __post_init__(self):
        if self.out_channels % 2:
            raise ConvSpecError(f"SR-unit out_channels must be even, not {self.out_channels}")
        if self.out_channels % self.shuffle_groups:
            raise ConvSpecError(
                f"SR-unit out_channels ({self.out_channels}) not divisible by shuffle_groups ({self.shuffle_groups})"
            )
        for count in (self.branch_in_channels, self.branch_out_channels):
            if count % self.group_count:
                raise ConvSpecError(
                    f"SR-unit {self.in_channels}->{self.out_channels}: branch width {count} "
                    f"not divisible by group_count ({self.group_count})"
                )
        if self.dilation_branch1 < 1 or self.dilation_branch2 < 1:
            raise ConvSpecError("SR-unit dilations must be >= 1")

    @property
    def splits_input(self) -> bool:
        return self.in_channels == self.out_channels

    @property
    def branch_in_channels(self) -> int:
        return self.in_channels // 2 if self.splits_input else self.in_channels

    @property
    def branch_out_channels(self) -> int:
        return self.out_channels // 2

    @property
    def depthwise_layers(self) -> int:
        return 2 if self.branch2_depthwise else 1


@dataclass(frozen=True)
class ReasoningConfig:
    """
    Stage layout of the saliency reasoning module.

    :ivar dict unit_overrides: Maps a global 1-based unit index to replacement
        :class:`SRUnitConfig` fields (``dilation_branch1``, ``dilation_branch2``,
        ``branch2_depthwise``).
    """

    stage_out_channels: Tuple[int, ...] = constants.DEFAULT_STAGE_CHANNELS
    units_per_stage: Tuple[int, ...] = constants.RESNET_UNITS
    stage_dilations: Tuple[int, ...] = constants.DEFAULT_STAGE_DILATIONS
    group_count: int = constants.DEFAULT_GROUP_COUNT
    shuffle_groups: int = constants.DEFAULT_SHUFFLE_GROUPS
    unit_overrides: Dict[int, Dict[str, Union[int, bool]]] = field(default_factory=dict, hash=False)

    def __post_init__(self):
        for name in ("stage_out_channels", "units_per_stage", "stage_dilations"):
            object.__setattr__(self, name, tuple(int(value) for value in getattr(self, name)))

        stages = len(self.stage_out_channels)
        if stages < 1 or len(self.units_per_stage) != stages or len(self.stage_dilations) != stages:
            raise ConfigError(
                "stage_out_channels, units_per_stage and stage_dilations must have the same, non-zero length"
            )
        if any(a <= b for a, b in zip(self.stage_out_channels, self.stage_out_channels[1:])):
            raise ConfigError(f"Stage channels must strictly decrease, not {self.stage_out_channels}")
        if any(units < 0 for units in self.units_per_stage) or sum(self.units_per_stage) < 1:
            raise ConfigError(f"units_per_stage must be >= 0 with at least one unit, not {self.units_per_stage}")
        if any(dilation < 1 for dilation in self.stage_dilations):
            raise ConfigError(f"Stage dilations must be >= 1, not {self.stage_dilations}")

        allowed = {"dilation_branch1", "dilation_branch2", "branch2_depthwise"}
        for index, override in self.unit_overrides.items():
            if not 1 <= index <= self.unit_count:
                raise ConfigError(f"Unit override index {index} is outside 1..{self.unit_count}")
            if set(override) - allowed:
                raise ConfigError(f"Unit override keys must be among {sorted(allowed)}, not {sorted(override)}")

    @classmethod
    def for_backbone(cls, backbone: BackboneVariant, **kwargs) -> ReasoningConfig:
        units = constants.RESNET_UNITS if backbone.kind == "toy_resnet_like" else constants.VGG_UNITS
        return cls(units_per_stage=kwargs.pop("units_per_stage", units), **kwargs)

    @property
    def unit_count(self) -> int:
        return sum(self.units_per_stage)

    def without_dilation(self) -> ReasoningConfig:
        """The same layout with every dilation forced to 1."""

        overrides = {
            index: {
                key: (1 if key.startswith("dilation") else value) for key, value in override.items()
            }
            for index, override in self.unit_overrides.items()
        }
        return replace(self, stage_dilations=(1,) * len(self.stage_dilations), unit_overrides=overrides)

    def unit_configs(self, in_channels: int) -> List[SRUnitConfig]:
        """
        Resolves every unit. The first unit of a stage changes the channel
        count; unit ``j`` of a stage (1-based) uses the stage dilation in
        branch 1 when ``j`` is odd and 1 when it is even. Branch 2 uses 1.
        """

        units = []
        channels = in_channels
        for out_channels, count, dilation in zip(self.stage_out_channels, self.units_per_stage, self.stage_dilations):
            for j in range(1, count + 1):
                cfg = SRUnitConfig(
                    channels,
                    out_channels,
                    self.group_count,
                    dilation if j % 2 else 1,
                    1,
                    self.shuffle_groups,
                )
                override = self.unit_overrides.get(len(units) + 1)
                if override:
                    cfg = replace(cfg, **override)
                units.append(cfg)
                channels = out_channels
        return units

    def depthwise_layers(self) -> int:
        return sum(
            1 + bool(self.unit_overrides.get(index, {}).get("branch2_depthwise", True))
            for index in range(1, self.unit_count + 1)
        )


def depth_sweep_config(depth: int, base: Optional[ReasoningConfig] = None) -> ReasoningConfig:
    """
    A reasoning configuration with exactly ``depth`` depth-wise conv layers.

    ``ceil(depth / 2)`` units are spread over the stages, later stages taking
    the remainder. An odd depth turns the last unit into a half unit.

    :raises ConfigError: If depth is below one.
    """

    if depth < 1:
        raise ConfigError(f"Depth must be >= 1, not {depth}")
    base = base or ReasoningConfig()
    stages = len(base.stage_out_channels)
    units = math.ceil(depth / 2)
    per_stage = tuple(units // stages + (1 if stage >= stages - units % stages else 0) for stage in range(stages))
    overrides = {units: {"branch2_depthwise": False}} if depth % 2 else {}
    return replace(base, units_per_stage=per_stage, unit_overrides=overrides)


# Builders


def add_backbone(graph: NetworkGraph, variant: BackboneVariant, source: str) -> List[str]:
    """
    Appends the five toy backbone levels. Each level is two conv-BN-ReLU
    blocks, the first one strided to reach the level's stride. The toy VGG
    top level uses a 3x3 conv with dilation 8 followed by a 1x1 conv.

    :return: The five pyramid layer names, S^1 to S^5.
    :rtype: list[str]
    """

    pyramid = []
    channels = graph.channels_of(source)
    previous_stride = 1
    for level, (out_channels, stride) in enumerate(zip(variant.pyramid_channels, variant.pyramid_strides), 1):
        step = stride // previous_stride
        prefix = f"backbone.s{level}"
        if step == 1 and level == 5 and variant.kind == "toy_vgg_like":
            first = ConvSpec(channels, out_channels, 3, 1, _VGG_TOP_DILATION, _VGG_TOP_DILATION)
            second = ConvSpec.pointwise(out_channels, out_channels)
        else:
            first = ConvSpec(channels, out_channels, 3, step, 1)
            second = ConvSpec(out_channels, out_channels, 3, 1, 1)
        out = graph.add_conv_block(f"{prefix}.a", first, source, "backbone")
        source = graph.add_conv_block(f"{prefix}.b", second, out, "backbone")
        pyramid.append(source)
        channels = out_channels
        previous_stride = stride
    return pyramid


def build_backbone(variant: BackboneVariant, seed: int = 0, materialize: bool = True) -> NetworkGraph:
    """
    A graph holding only the backbone. ``graph.tags["pyramid"]`` names S^1..S^5;
    run :meth:`~srnet.graph.NetworkGraph.forward` and read them from the result's nodes.
    """

    graph = NetworkGraph(f"backbone-{variant.short_name}")
    graph.tags["max_stride"] = variant.max_stride
    graph.tags["pyramid"] = add_backbone(graph, variant, graph.add_input())
    graph.tags["output"] = graph.tags["pyramid"][-1]
    if materialize:
        graph.init_parameters(seed)
    return graph


def fuse_features(graph: NetworkGraph, pyramid: Sequence[str], variant: BackboneVariant) -> str:
    """
    Top-down fusion with lateral connections. Lateral 1x1 convs reduce every
    level, then for levels 4 to 1 the level above is upsampled by 2 (skipped
    where adjacent strides are equal), concatenated after the lateral
    features and passed through a 3x3 conv-BN-ReLU.

    :return: The level-1 fused layer, ``variant.fused_channels`` channels at stride 2.
    :rtype: str
    """

    lateral = []
    for level, (name, out_channels) in enumerate(zip(pyramid, variant.lateral_channels), 1):
        spec = ConvSpec.pointwise(graph.channels_of(name), out_channels)
        lateral.append(graph.add_conv_block(f"fusion.lateral{level}", spec, name, "fusion"))

    above = lateral[4]
    strides = variant.pyramid_strides
    for index in range(3, -1, -1):
        level = index + 1
        factor = strides[index + 1] // strides[index]
        if factor > 1:
            above = graph.add_upsample(f"fusion.up{level}", above, factor, "fusion")
        merged = graph.add_concat(f"fusion.cat{level}", lateral[index], above, "fusion")
        spec = ConvSpec(graph.channels_of(merged), variant.fusion_channels[index], 3, 1, 1)
        above = graph.add_conv_block(f"fusion.top{level}", spec, merged, "fusion")
    return above


def sr_unit(graph: NetworkGraph, source: str, cfg: SRUnitConfig, prefix: str) -> str:
    """
    Appends one SR-unit.

    Branch 1 is 1x1 group conv, BN, ReLU, 3x3 depth-wise conv, BN, ReLU,
    1x1 group conv, BN. Branch 2 is 3x3 depth-wise conv, BN, ReLU, 1x1 group
    conv, BN. When input and output widths match, the input is split into
    halves feeding the branches; otherwise both read the full input. The
    branches are concatenated and channel-shuffled.

    :raises ConvSpecError: If the source width differs from ``cfg.in_channels``.
    """

    if graph.channels_of(source) != cfg.in_channels:
        raise ConvSpecError(f"{prefix} expects {cfg.in_channels} channels, {source} has {graph.channels_of(source)}")

    half_in, half_out, groups = cfg.branch_in_channels, cfg.branch_out_channels, cfg.group_count
    if cfg.splits_input:
        first = graph.add_slice(f"{prefix}.split1", source, 0, half_in, "reasoning")
        second = graph.add_slice(f"{prefix}.split2", source, half_in, cfg.in_channels, "reasoning")
    else:
        first = second = source

    out = graph.add_conv_block(f"{prefix}.b1.pw1", ConvSpec.pointwise(half_in, half_out, groups), first, "reasoning")
    out = graph.add_conv_block(
        f"{prefix}.b1.dw", ConvSpec.depthwise(half_out, cfg.dilation_branch1), out, "reasoning"
    )
    branch1 = graph.add_conv_block(
        f"{prefix}.b1.pw2", ConvSpec.pointwise(half_out, half_out, groups), out, "reasoning", activation=False
    )

    out = second
    if cfg.branch2_depthwise:
        out = graph.add_conv_block(
            f"{prefix}.b2.dw", ConvSpec.depthwise(half_in, cfg.dilation_branch2), out, "reasoning"
        )
    branch2 = graph.add_conv_block(
        f"{prefix}.b2.pw", ConvSpec.pointwise(half_in, half_out, groups), out, "reasoning", activation=False
    )

    merged = graph.add_concat(f"{prefix}.cat", branch1, branch2, "reasoning")
    return graph.add_shuffle(f"{prefix}.shuffle", merged, cfg.shuffle_groups, "reasoning")


def sr_unit_graph(cfg: SRUnitConfig, seed: int = 0, materialize: bool = True) -> NetworkGraph:
    """A graph with a single SR-unit reading a ``cfg.in_channels`` input."""

    graph = NetworkGraph("sr-unit")
    sr_unit(graph, graph.add_input(channels=cfg.in_channels), cfg, "reasoning.u1")
    if materialize:
        graph.init_parameters(seed)
    return graph


def reasoning_module(graph: NetworkGraph, source: str, cfg: ReasoningConfig) -> str:
    """Appends every SR-unit of ``cfg``; units are named ``reasoning.u<j>`` with a global 1-based ``j``."""

    for index, unit in enumerate(cfg.unit_configs(graph.channels_of(source)), 1):
        source = sr_unit(graph, source, unit, f"reasoning.u{index}")
    return source


def predict_saliency(graph: NetworkGraph, source: str, factor: int) -> str:
    """
    The classifier head: a 1x1 conv with bias to two channels, softmax and
    bilinear upsampling by ``factor`` back to the input resolution.
    Channel 1 is the saliency probability.
    """

    spec = ConvSpec.pointwise(graph.channels_of(source), 2, has_bias=True)
    out = graph.add_conv("classifier.score", spec, source, "classifier")
    out = graph.add_softmax("classifier.softmax", out)
    if factor > 1:
        out = graph.add_upsample("classifier.up", out, factor, "classifier")
    return out


def build_variant(
    ablation: str,
    backbone: BackboneVariant,
    reasoning: Optional[ReasoningConfig] = None,
    seed: int = 0,
    materialize: bool = True,
) -> NetworkGraph:
    """
    Builds one of the four networks.

    :param ablation: ``BPS`` (classifier on S^5 after a 1x1 reduction),
        ``HFS`` (classifier on fused features), ``BFR`` (full pipeline without
        dilation) or ``SRNet`` (full pipeline).
    :type ablation: str
    :param backbone: The backbone interface.
    :type backbone: BackboneVariant
    :param reasoning: Stage layout. Defaults to the backbone's reference layout.
        Stage widths are never divided by ``backbone.width_divisor``: divided
        desk widths (4, 3, 2 at divisor 16) break the even-width and group
        constraints of the SR-unit. The first unit reads
        ``backbone.fused_channels``, which is 128 only at divisor 1.
    :type reasoning: ReasoningConfig, optional
    :param seed: Initialization seed.
    :type seed: int, optional
    :param materialize: Allocate parameters. A description-only graph still
        supports shape inference, manifests and the cost model.
    :type materialize: bool, optional
    :return: The network.
    :rtype: NetworkGraph

    :raises ConfigError: On an unknown ablation.
    """

    if ablation not in ABLATIONS:
        raise ConfigError(f"{ablation!r} is not an ablation variant, expected one of {ABLATIONS}")
    reasoning = reasoning or ReasoningConfig.for_backbone(backbone)

    graph = NetworkGraph(f"{ablation}-{backbone.short_name}")
    graph.tags["max_stride"] = backbone.max_stride
    graph.tags["ablation"] = ablation
    pyramid = add_backbone(graph, backbone, graph.add_input())
    graph.tags["pyramid"] = pyramid

    if ablation == "BPS":
        spec = ConvSpec.pointwise(backbone.pyramid_channels[-1], backbone.fused_channels)
        reduced = graph.add_conv_block("classifier.reduce", spec, pyramid[-1], "classifier")
        out = predict_saliency(graph, reduced, backbone.max_stride)
    else:
        source = graph.tags["fused"] = fuse_features(graph, pyramid, backbone)
        if ablation != "HFS":
            cfg = reasoning.without_dilation() if ablation == "BFR" else reasoning
            if backbone.fused_channels != constants.FUSED_CHANNELS:
                logger.info(
                    "%s: reasoning reads %d fused channels instead of %d (width_divisor %d), stages stay at %s",
                    graph.name,
                    backbone.fused_channels,
                    constants.FUSED_CHANNELS,
                    backbone.width_divisor,
                    format_int_list(cfg.stage_out_channels),
                )
            source = graph.tags["reasoned"] = reasoning_module(graph, source, cfg)
        out = predict_saliency(graph, source, backbone.pyramid_strides[0])

    graph.tags["output"] = out
    if materialize:
        graph.init_parameters(seed)
    logger.debug("Built %s: %d layers, %d parameters", graph.name, len(graph), graph.parameter_count())
    return graph
