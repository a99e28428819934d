"""
Finite-difference probes for every differentiable op, plus whole-network checks.

A probe records one op on a small random input, reduces the output to a
scalar with fixed random weights, and hands the tape to
:func:`~srnet.autograd.finite_diff_check`. Op inputs are recorded as
parameters, so their gradients are checked along with any weights.

====================================
Copyright srnet-lite authors, 2024-present
====================================
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

try:
    from . import autograd, constants, nnops
    from .autograd import GradCheckResult, Node, Tape, finite_diff_check
    from .graph import NetworkGraph
    from .model import SRUnitConfig, sr_unit_graph
    from .nnops import BatchNormState, ConvSpec
    from .tensor import Tensor
    from .training import LossConfig, balanced_bce_loss
except ImportError:
    import autograd
    import constants
    import nnops
    from autograd import GradCheckResult, Node, Tape, finite_diff_check
    from graph import NetworkGraph
    from model import SRUnitConfig, sr_unit_graph
    from nnops import BatchNormState, ConvSpec
    from tensor import Tensor
    from training import LossConfig, balanced_bce_loss

logger = logging.getLogger(__name__)

# {"probe name": build(rng) -> (tape, loss node)}
PROBES: Dict[str, Callable[[np.random.Generator], Tuple[Tape, Node]]] = {}
DEFAULT_SEEDS = (0, 1, 2, 3, 4)


class probe:  # NOSONAR (lowercase, it's used as a decorator)
    """Decorator for registering a gradient probe"""

    def __init__(self, name: str):
        self.name = name

    def __call__(self, func: Callable) -> Callable:
        PROBES[self.name] = func
        return func


def _leaf(tape: Tape, rng: np.random.Generator, shape, name: str, scale: float = 1.0) -> Node:
    return tape.parameter(rng.normal(0.0, scale, size=shape), name)


def _weighted_sum(node: Node, rng: np.random.Generator) -> Node:
    weights = node.tape.constant(rng.normal(size=tuple(node.shape)))
    return autograd.sum_all(autograd.mul(node, weights))


def _conv_probe(spec: ConvSpec, hw: Tuple[int, int] = (6, 6)):
    def build(rng: np.random.Generator):
        tape = Tape()
        x = _leaf(tape, rng, (2, spec.in_channels) + hw, "x")
        weight = _leaf(tape, rng, spec.weight_shape, "weight", 0.5)
        bias = _leaf(tape, rng, (1, spec.out_channels, 1, 1), "bias") if spec.has_bias else None
        return tape, _weighted_sum(nnops.conv2d(x, spec, weight, bias), rng)

    return build


PROBES["conv2d_standard"] = _conv_probe(ConvSpec(3, 4, 3, 1, 1, has_bias=True))
PROBES["conv2d_strided"] = _conv_probe(ConvSpec(2, 3, 3, 2, 1), (7, 7))
PROBES["conv2d_group"] = _conv_probe(ConvSpec(4, 6, 3, 1, 1, groups=2))
PROBES["conv2d_depthwise_dilated"] = _conv_probe(ConvSpec.depthwise(4, dilation=2), (7, 7))
PROBES["conv2d_pointwise_group"] = _conv_probe(ConvSpec.pointwise(8, 4, groups=4, has_bias=True))


@probe("channel_shuffle")
def _channel_shuffle(rng):
    tape = Tape()
    x = _leaf(tape, rng, (1, 12, 3, 3), "x")
    return tape, _weighted_sum(nnops.channel_shuffle(x, 4), rng)


@probe("bilinear_upsample")
def _bilinear_upsample(rng):
    tape = Tape()
    x = _leaf(tape, rng, (1, 2, 3, 4), "x")
    return tape, _weighted_sum(nnops.bilinear_upsample(x, 2), rng)


@probe("concat_slice")
def _concat_slice(rng):
    tape = Tape()
    a = _leaf(tape, rng, (1, 2, 3, 3), "a")
    b = _leaf(tape, rng, (1, 3, 3, 3), "b")
    merged = nnops.concat_channels(a, b)
    return tape, _weighted_sum(nnops.slice_channels(merged, 1, 4), rng)


@probe("relu")
def _relu(rng):
    tape = Tape()
    x = _leaf(tape, rng, (1, 3, 4, 4), "x")
    return tape, _weighted_sum(nnops.relu(x), rng)


def _batch_norm_probe(mode: str):
    def build(rng: np.random.Generator):
        tape = Tape()
        channels = 3
        x = _leaf(tape, rng, (2, channels, 3, 3), "x")
        gamma = _leaf(tape, rng, (1, channels, 1, 1), "gamma")
        beta = _leaf(tape, rng, (1, channels, 1, 1), "beta")
        state = BatchNormState(channels, rng.normal(size=channels), rng.uniform(0.5, 2.0, size=channels))
        return tape, _weighted_sum(nnops.batch_norm(x, gamma, beta, state, mode), rng)

    return build


PROBES["batch_norm_train"] = _batch_norm_probe("train")
PROBES["batch_norm_eval"] = _batch_norm_probe("eval")


@probe("softmax2")
def _softmax2(rng):
    tape = Tape()
    logits = _leaf(tape, rng, (1, 2, 4, 4), "logits")
    return tape, _weighted_sum(nnops.softmax2(logits), rng)


def _loss_probe(cfg: LossConfig):
    def build(rng: np.random.Generator):
        tape = Tape()
        logits = _leaf(tape, rng, (2, 2, 4, 4), "logits")
        mask = (rng.random((2, 1, 4, 4)) < 0.4).astype(np.float64)
        return tape, balanced_bce_loss(nnops.softmax2(logits), mask, cfg)

    return build


PROBES["balanced_bce_auto"] = _loss_probe(LossConfig())
PROBES["balanced_bce_fixed_sum"] = _loss_probe(LossConfig(0.3, "sum"))


@probe("elementwise")
def _elementwise(rng):
    tape = Tape()
    a = _leaf(tape, rng, (1, 2, 3, 3), "a")
    b = _leaf(tape, rng, (1, 2, 3, 3), "b")
    out = autograd.mul(autograd.add(a, b), autograd.sub(a, autograd.scale(b, 0.5)))
    return tape, _weighted_sum(out, rng)


@probe("sr_unit")
def _sr_unit(rng):
    graph = sr_unit_graph(SRUnitConfig(16, 16, dilation_branch1=2), seed=int(rng.integers(2**31)))
    result = graph.forward(Tensor(rng.normal(size=(1, 16, 6, 6))), mode="train")
    return result.tape, _weighted_sum(result.output, rng)


@dataclass
class ProbeResult:
    """The worst outcome of one probe over all seeds."""

    name: str
    max_rel_error: float
    checked: int
    skipped_kinks: int
    tolerance: float = constants.GRADCHECK_TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def row(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{self.name:<28} {self.max_rel_error:>12.3e} {self.checked:>8} {self.skipped_kinks:>8} {status:>6}"


def run_probe(name: str, seed: int, epsilon: float = 1e-6) -> GradCheckResult:
    tape, loss = PROBES[name](np.random.default_rng(seed))
    return finite_diff_check(tape, loss, epsilon, detailed=True)


def run_suite(
    seeds: Iterable[int] = DEFAULT_SEEDS,
    names: Optional[Iterable[str]] = None,
    epsilon: float = 1e-6,
    tolerance: float = constants.GRADCHECK_TOLERANCE,
) -> List[ProbeResult]:
    """Runs every probe (or those named) once per seed, keeping the worst error."""

    seeds = tuple(seeds)
    results = []
    for name in names or sorted(PROBES):
        result = ProbeResult(name, 0.0, 0, 0, tolerance)
        for seed in seeds:
            outcome = run_probe(name, seed, epsilon)
            result.max_rel_error = max(result.max_rel_error, outcome.max_rel_error)
            result.checked += outcome.checked
            result.skipped_kinks += outcome.skipped_kinks
        logger.debug("Probe %s: max relative error %.3e", name, result.max_rel_error)
        results.append(result)
    return results


def check_network(
    net: NetworkGraph,
    images: Tensor,
    masks: Tensor,
    loss_cfg: Optional[LossConfig] = None,
    max_coords_per_param: Optional[int] = 3,
    seed: int = 0,
    epsilon: float = 1e-6,
    tolerance: float = constants.GRADCHECK_TOLERANCE,
) -> ProbeResult:
    """
    Checks the gradient of the training loss of a whole network, in train mode,
    on a sample of coordinates of every parameter. Parameters and batch norm
    running statistics are the same afterwards.
    """

    snapshot = net.state_dict()
    try:
        result = net.forward(images, mode="train")
        loss = balanced_bce_loss(result.output, masks, loss_cfg)
        outcome = finite_diff_check(result.tape, loss, epsilon, max_coords_per_param, seed, detailed=True)
    finally:
        net.load_state_dict(snapshot)
    logger.info(
        "%s: %d coordinates checked, max relative error %.3e (worst: %s)",
        net.name,
        outcome.checked,
        outcome.max_rel_error,
        outcome.worst_parameter,
    )
    return ProbeResult(f"network:{net.name}", outcome.max_rel_error, outcome.checked, outcome.skipped_kinks, tolerance)


def format_table(results: Iterable[ProbeResult]) -> str:
    lines = [f"{'op':<28} {'max_rel_err':>12} {'checked':>8} {'kinks':>8} {'status':>6}"]
    lines.extend(result.row() for result in results)
    return "\n".join(lines) + "\n"
