"""
Analytic cost model over a :class:`~srnet.graph.NetworkGraph`: parameter
counts, multiply-accumulate counts, data movement and receptive fields,
per layer and per component.

Conventions:

* one multiply-accumulate counts as one mult-add (not two FLOPs);
* a conv has ``out * (in / groups) * kh * kw`` weights (plus ``out`` biases)
  and ``out_elements * (in / groups) * kh * kw`` mult-adds, so a group conv
  costs ``O(C^2 / groups)`` and a depth-wise conv ``O(C)`` per pixel;
* batch norm has ``2 * C`` trainable parameters;
* upsample, shuffle, concat and slice are data movement: zero mult-adds,
  output bytes reported.

====================================
Copyright srnet-lite authors, 2024-present
====================================
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

try:
    from .graph import COMPONENT_TO_GROUP, COMPONENTS, Layer, NetworkGraph
    from .nnops import ConvSpec
    from .tensor import Shape, random_normal
except ImportError:
    from graph import COMPONENT_TO_GROUP, COMPONENTS, Layer, NetworkGraph
    from nnops import ConvSpec
    from tensor import Shape, random_normal

logger = logging.getLogger(__name__)

BYTES_PER_VALUE = 8
DATA_MOVEMENT = ("upsample", "shuffle", "concat", "slice")
HEADER_NOTES = (
    "mult-adds count one per multiply-accumulate",
    "conv params = out*(in/groups)*kh*kw (+out bias): group conv is O(C^2/groups), "
    "the O(C/groups) shorthand drops one factor of C",
    "upsample/shuffle/concat/slice: 0 mult-adds, output bytes reported",
)


def conv_params(spec: ConvSpec) -> int:
    kh, kw = spec.kernel
    return spec.out_channels * (spec.in_channels // spec.groups) * kh * kw + (spec.out_channels if spec.has_bias else 0)


def conv_mult_adds(spec: ConvSpec, out_shape: Shape) -> int:
    kh, kw = spec.kernel
    return out_shape.size * (spec.in_channels // spec.groups) * kh * kw


def layer_params(layer: Layer) -> int:
    if layer.kind == "conv":
        return conv_params(layer.spec)
    if layer.kind == "bn":
        return 2 * layer.attrs["channels"]
    return 0


def count_params(graph: NetworkGraph) -> Dict[str, int]:
    """Trainable scalars per layer, in execution order."""
    return {layer.name: layer_params(layer) for layer in graph}


def count_flops(graph: NetworkGraph, input_shape: Sequence[int]) -> Dict[str, Tuple[int, int]]:
    """``(mult_adds, bytes_moved)`` per layer for an input of ``input_shape``."""

    shapes = graph.infer_shapes(input_shape)
    out = {}
    for layer in graph:
        mult_adds = conv_mult_adds(layer.spec, shapes[layer.name]) if layer.kind == "conv" else 0
        moved = shapes[layer.name].size * BYTES_PER_VALUE if layer.kind in DATA_MOVEMENT else 0
        out[layer.name] = (mult_adds, moved)
    return out


@dataclass(frozen=True)
class ReceptiveField:
    """
    :ivar int size: Receptive field, in input pixels of the segment start.
    :ivar Fraction jump: Cumulative stride.
    :ivar bool branched: Inputs with different fields meet at this layer; ``size`` follows the deepest one.
    """

    size: Fraction
    jump: Fraction
    branched: bool = False


def receptive_field(graph: NetworkGraph, start: Optional[str] = None) -> Dict[str, ReceptiveField]:
    """
    Propagates ``r += (k - 1) * d * j`` and ``j *= stride`` through the graph.
    Upsampling divides ``j`` by its factor. Where several inputs meet, the
    largest field wins and the layer is flagged.

    :param start: Measure from this layer (field 1, jump 1). Layers that do
        not descend from it are left out. Defaults to the graph input.
    :type start: str, optional
    """

    start = start or graph.layers[0].name
    graph[start]  # raises GraphError for unknown names
    fields: Dict[str, ReceptiveField] = {}
    for layer in graph:
        if layer.name == start:
            fields[layer.name] = ReceptiveField(Fraction(1), Fraction(1))
            continue
        ins = [fields[source] for source in layer.inputs if source in fields]
        if not ins:
            continue

        deepest = max(ins, key=lambda item: item.size)
        branched = len({item.size for item in ins}) > 1
        size, jump = deepest.size, deepest.jump
        if layer.kind == "conv":
            kh, kw = layer.spec.kernel
            size += (max(kh, kw) - 1) * layer.spec.dilation * jump
            jump *= layer.spec.stride
        elif layer.kind == "upsample":
            jump /= layer.attrs["factor"]
        fields[layer.name] = ReceptiveField(size, jump, branched)
    return fields


@dataclass
class CostRow:
    name: str
    kind: str
    component: str
    params: int
    mult_adds: int
    bytes_moved: int
    receptive_field: Fraction
    output_shape: Shape
    branched: bool = False


@dataclass
class CostReport:
    """
    Per-layer rows and per-component totals. Totals are always the sums of the rows.
    """

    network: str
    input_shape: Shape
    rows: List[CostRow]
    timings: Optional[Dict[str, float]] = field(default=None)

    def totals(self) -> Dict[str, Dict[str, int]]:
        out = {component: {"params": 0, "mult_adds": 0, "bytes_moved": 0} for component in COMPONENTS}
        for row in self.rows:
            out[row.component]["params"] += row.params
            out[row.component]["mult_adds"] += row.mult_adds
            out[row.component]["bytes_moved"] += row.bytes_moved
        return {component: values for component, values in out.items() if self._has(component)}

    def _has(self, component: str) -> bool:
        return any(row.component == component for row in self.rows)

    def group_params(self) -> Dict[str, int]:
        """Parameter totals for the W, omega and theta groups."""

        out = {"W": 0, "omega": 0, "theta": 0}
        for row in self.rows:
            out[COMPONENT_TO_GROUP[row.component]] += row.params
        return out

    @property
    def total_params(self) -> int:
        return sum(row.params for row in self.rows)

    @property
    def total_mult_adds(self) -> int:
        return sum(row.mult_adds for row in self.rows)

    def component_share(self, component: str) -> float:
        """A component's fraction of all mult-adds."""
        total = self.total_mult_adds
        return self.totals().get(component, {"mult_adds": 0})["mult_adds"] / total if total else 0.0

    def to_table(self) -> str:
        lines = [f"# {self.network} input={self.input_shape}"]
        lines.extend(f"# {note}" for note in HEADER_NOTES)
        header = f"{'layer':<44} {'kind':<8} {'component':<10} {'params':>12} {'mult_adds':>16} {'bytes':>12} {'rf':>6}"
        header += f" {'out':<18}"
        lines.append(header)
        for row in self.rows:
            flag = "*" if row.branched else ""
            line = (
                f"{row.name:<44} {row.kind:<8} {row.component:<10} {row.params:>12} {row.mult_adds:>16} "
                f"{row.bytes_moved:>12} {_fmt(row.receptive_field) + flag:>6} {str(row.output_shape):<18}"
            )
            lines.append(line.rstrip())
        lines.append("")
        totals_header = f"{'component':<12} {'params':>12} {'mult_adds':>16} {'bytes':>12}"
        lines.append(totals_header + (f" {'seconds':>9}" if self.timings is not None else ""))
        for component, values in self.totals().items():
            line = f"{component:<12} {values['params']:>12} {values['mult_adds']:>16} {values['bytes_moved']:>12}"
            if self.timings is not None:
                line += f" {self.timings.get(component, 0.0):>9.4f}"
            lines.append(line)
        lines.append(f"{'total':<12} {self.total_params:>12} {self.total_mult_adds:>16}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        lines = ["name,kind,component,params,mult_adds,bytes_moved,receptive_field,branched,output_shape"]
        for row in self.rows:
            lines.append(
                f"{row.name},{row.kind},{row.component},{row.params},{row.mult_adds},{row.bytes_moved},"
                f"{_fmt(row.receptive_field)},{int(row.branched)},{row.output_shape}"
            )
        for component, values in self.totals().items():
            seconds = "" if self.timings is None else f"{self.timings.get(component, 0.0):.6f}"
            lines.append(
                f"total:{component},,{component},{values['params']},{values['mult_adds']},"
                f"{values['bytes_moved']},,,{seconds}"
            )
        return "\n".join(lines) + "\n"


def _fmt(value: Fraction) -> str:
    return str(value.numerator) if value.denominator == 1 else f"{float(value):.2f}"


def measure_timings(graph: NetworkGraph, input_shape: Sequence[int], seed: int = 0) -> Dict[str, float]:
    """Wall-clock seconds per component for one eval forward pass on random input."""

    timings: Dict[str, float] = {}
    graph.forward(random_normal(input_shape, seed), mode="eval", timings=timings)
    return timings


def cost_report(graph: NetworkGraph, input_shape: Sequence[int], timing: bool = False) -> CostReport:
    """
    Builds the per-layer report.

    :param graph: The network; only a description is needed unless ``timing`` is set.
    :type graph: NetworkGraph
    :param input_shape: ``(n, c, h, w)``.
    :type input_shape: Sequence[int]
    :param timing: Also run one forward pass and record seconds per component.
    :type timing: bool, optional
    """

    input_shape = Shape.of(input_shape)
    shapes = graph.infer_shapes(input_shape)
    params = count_params(graph)
    flops = count_flops(graph, input_shape)
    fields = receptive_field(graph)

    rows = [
        CostRow(
            layer.name,
            layer.kind,
            layer.component,
            params[layer.name],
            flops[layer.name][0],
            flops[layer.name][1],
            fields[layer.name].size,
            shapes[layer.name],
            fields[layer.name].branched,
        )
        for layer in graph
    ]
    report = CostReport(graph.name, input_shape, rows)
    if timing:
        report.timings = measure_timings(graph, input_shape)
    logger.debug("Cost of %s: %d params, %d mult-adds", graph.name, report.total_params, report.total_mult_adds)
    return report


def segment_receptive_field(graph: NetworkGraph, start: str, stop: str) -> int:
    """The receptive field at ``stop``, measured in pixels of ``start``."""

    size = receptive_field(graph, start)[stop].size
    return int(size) if size.denominator == 1 else float(size)

