"""
This module contains the reverse-mode differentiation engine: a dynamically
recorded :class:`Tape` of :class:`Node` objects, the op/adjoint registry,
:func:`backward`, and the finite-difference harness :func:`finite_diff_check`.

Ops register a forward function and an adjoint by name, with the
:func:`register_op` and :func:`register_adjoint` decorators. A forward function
receives the input arrays plus static keyword attributes and returns
``(output_array, saved)``; it must not have side effects, because the tape
replays it for finite differences. An adjoint receives the output gradient,
the ``saved`` dictionary, a ``needs`` tuple telling which inputs want a
gradient, and the same static attributes; it returns one gradient (or None)
per input.

====================================
Copyright srnet-lite authors, 2024-present
====================================
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, Optional, Sequence, Union

import numpy as np

try:
    from .tensor import Tensor, elementwise
    from .utils import AdjointNotFound, GraphError, ShapeError, relative_error
except ImportError:
    from tensor import Tensor, elementwise
    from utils import AdjointNotFound, GraphError, ShapeError, relative_error

logger = logging.getLogger(__name__)

PARAMETER_GROUPS = ("W", "omega", "theta")

# {"op_kind": forward(*arrays, **attrs) -> (array, saved)}
_FORWARDS: Dict[str, Callable] = {}
# {"op_kind": adjoint(grad, saved, needs, **attrs) -> tuple[Optional[array], ...]}
_ADJOINTS: Dict[str, Callable] = {}
# Ops whose input sign pattern decides a subgradient branch
_KINK_OPS = {"relu"}


class register_op:  # NOSONAR (lowercase, it's used as a decorator)
    """Decorator for registering the forward function of an op"""

    def __init__(self, op_kind: str, kink: bool = False):
        if op_kind == "leaf":
            raise ValueError('"leaf" is reserved for tape inputs - consider using a different name.')
        self.op_kind = op_kind
        self.kink = kink

    def __call__(self, func: Callable) -> Callable:
        _FORWARDS[self.op_kind] = func
        if self.kink:
            _KINK_OPS.add(self.op_kind)
        return func


class register_adjoint:  # NOSONAR
    """Decorator for registering the adjoint of an op"""

    def __init__(self, op_kind: str):
        self.op_kind = op_kind

    def __call__(self, func: Callable) -> Callable:
        _ADJOINTS[self.op_kind] = func
        return func


def registered_ops() -> list[str]:
    """All op kinds that have a forward function, sorted."""
    return sorted(_FORWARDS)


def has_adjoint(op_kind: str) -> bool:
    return op_kind in _ADJOINTS


@dataclass(eq=False)
class Node:
    """
    One recorded value on a :class:`Tape`.

    :ivar int id: Index of the node on its tape; inputs always have smaller ids.
    :ivar str op_kind: The registered op that produced the value, or ``"leaf"``.
    :ivar tuple inputs: Ids of the input nodes.
    :ivar Tensor value: The forward value.
    :ivar Tensor grad: Only filled by :func:`backward` with ``keep_grads=True``.
    """

    id: int
    op_kind: str
    inputs: tuple[int, ...]
    value: Tensor
    tape: Tape = field(repr=False)
    requires_grad: bool = False
    attrs: Dict[str, Any] = field(default_factory=dict, repr=False)
    saved: Dict[str, Any] = field(default_factory=dict, repr=False)
    grad: Optional[Tensor] = field(default=None, repr=False)

    @property
    def shape(self):
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    def __str__(self):
        return f"<Node #{self.id} {self.op_kind} {self.value.shape}>"


class Tape:
    """
    An ordered record of every op applied during one forward pass.

    :ivar list nodes: The nodes, in recording order.
    :ivar dict parameter_ids: Maps node id to parameter name, for trainable leaves.
    :ivar dict groups: Maps each parameter group (``W``, ``omega``, ``theta``)
        to the set of node ids in it.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.parameter_ids: dict[int, str] = {}
        self.groups: dict[str, set[int]] = {group: set() for group in PARAMETER_GROUPS}

    def __len__(self):
        return len(self.nodes)

    def __str__(self):
        return f"<Tape: {len(self.nodes)} nodes, {len(self.parameter_ids)} parameters>"

    def __repr__(self):
        return self.__str__()

    # Leaves

    def _leaf(self, tensor: Tensor, requires_grad: bool) -> Node:
        node = Node(len(self.nodes), "leaf", (), tensor, self, requires_grad)
        self.nodes.append(node)
        return node

    def constant(self, tensor: Union[Tensor, np.ndarray]) -> Node:
        """Records a leaf that never receives a gradient."""
        if isinstance(tensor, np.ndarray):
            tensor = Tensor(tensor)
        return self._leaf(tensor, False)

    def parameter(self, tensor: Union[Tensor, np.ndarray], name: str, group: str = "W") -> Node:
        """
        Records a trainable leaf.

        :param tensor: The parameter value.
        :type tensor: Union[Tensor, numpy.ndarray]
        :param name: The parameter name, unique on this tape.
        :type name: str
        :param group: One of ``W``, ``omega``, ``theta``.
        :type group: str, optional
        :return: The new leaf node.
        :rtype: Node

        :raises ValueError: If the group is unknown.
        """

        if group not in self.groups:
            raise ValueError(f"{group} is not a parameter group, expected one of {PARAMETER_GROUPS}")
        if isinstance(tensor, np.ndarray):
            tensor = Tensor(tensor, requires_grad=True)
        node = self._leaf(tensor, True)
        self.parameter_ids[node.id] = name
        self.groups[group].add(node.id)
        return node

    # Ops

    def apply(self, op_kind: str, inputs: Sequence[Node], **attrs) -> Node:
        """
        Runs a registered op forward and records it.

        :raises GraphError: If the op is unknown, or an input is from another tape.
        """

        try:
            forward = _FORWARDS[op_kind]
        except KeyError:
            raise GraphError(f"Op {op_kind!r} is not registered") from None
        for node in inputs:
            if node.tape is not self:
                raise GraphError(f"{node} belongs to another tape")

        out, saved = forward(*(node.data for node in inputs), **attrs)
        node = Node(
            len(self.nodes),
            op_kind,
            tuple(node.id for node in inputs),
            Tensor(out),
            self,
            any(node.requires_grad for node in inputs),
            attrs,
            saved,
        )
        self.nodes.append(node)
        return node

    def replay(
        self, overrides: Optional[Dict[int, np.ndarray]] = None, upto: Optional[int] = None
    ) -> tuple[Dict[int, np.ndarray], Dict[int, np.ndarray]]:
        """
        Re-runs the recorded forward functions without touching the tape.

        :param overrides: Replacement values for leaves, by node id.
        :type overrides: dict, optional
        :param upto: Last node id to compute. Defaults to the last node.
        :type upto: int, optional
        :return: The values by node id, and for every kink op the boolean
            ``input > 0`` pattern by node id.
        :rtype: tuple[dict, dict]
        """

        overrides = overrides or {}
        upto = len(self.nodes) - 1 if upto is None else upto
        values: Dict[int, np.ndarray] = {}
        kinks: Dict[int, np.ndarray] = {}

        for node in self.nodes[: upto + 1]:
            if node.op_kind == "leaf":
                values[node.id] = overrides.get(node.id, node.data)
                continue

            args = [values[input_id] for input_id in node.inputs]
            if node.op_kind in _KINK_OPS:
                kinks[node.id] = args[0] > 0
            values[node.id], _ = _FORWARDS[node.op_kind](*args, **node.attrs)

        return values, kinks

    def parameters(self) -> Dict[int, str]:
        return dict(self.parameter_ids)

    def group_of(self, node_id: int) -> Optional[str]:
        for group, ids in self.groups.items():
            if node_id in ids:
                return group
        return None


def _resolve(tape: Tape, loss_node: Union[int, Node]) -> Node:
    node_id = loss_node.id if isinstance(loss_node, Node) else int(loss_node)
    try:
        return tape.nodes[node_id]
    except IndexError:
        raise GraphError(f"Node #{node_id} is not on {tape}") from None


def backward(tape: Tape, loss_node: Union[int, Node], keep_grads: bool = False) -> Dict[int, Tensor]:
    """
    Computes dL/dp for every trainable parameter on the tape.

    The tape is left unchanged (unless ``keep_grads`` is set), so running this
    twice yields bit-identical gradients.

    :param tape: The tape the loss was recorded on.
    :type tape: Tape
    :param loss_node: The loss node or its id. Must hold a (1, 1, 1, 1) scalar.
    :type loss_node: Union[int, Node]
    :param keep_grads: Store each node's gradient on :attr:`Node.grad` too.
    :type keep_grads: bool, optional
    :return: A map from parameter node id to its gradient. Parameters the loss
        does not depend on get zeros.
    :rtype: dict[int, Tensor]

    :raises ShapeError: If the loss is not a scalar.
    :raises AdjointNotFound: If an op on the path has no registered adjoint.
    """

    loss = _resolve(tape, loss_node)
    if tuple(loss.shape) != (1, 1, 1, 1):
        raise ShapeError(f"The loss must have shape (1, 1, 1, 1), not {tuple(loss.shape)}")

    nodes = tape.nodes[: loss.id + 1]
    for node in nodes:
        if node.op_kind != "leaf" and node.requires_grad and node.op_kind not in _ADJOINTS:
            raise AdjointNotFound(f"No adjoint registered for op {node.op_kind!r}")

    grads: Dict[int, np.ndarray] = {loss.id: np.ones((1, 1, 1, 1))}
    for node in reversed(nodes):
        grad = grads.get(node.id)
        if grad is None or node.op_kind == "leaf" or not node.requires_grad:
            continue

        inputs = [tape.nodes[input_id] for input_id in node.inputs]
        needs = tuple(input_node.requires_grad for input_node in inputs)
        input_grads = _ADJOINTS[node.op_kind](grad, node.saved, needs, **node.attrs)

        for input_node, need, input_grad in zip(inputs, needs, input_grads):
            if not need or input_grad is None:
                continue
            if input_node.id in grads:
                grads[input_node.id] = grads[input_node.id] + input_grad
            else:
                grads[input_node.id] = input_grad

    if keep_grads:
        for node_id, grad in grads.items():
            tape.nodes[node_id].grad = Tensor(grad)

    return {
        param_id: Tensor(grads[param_id]) if param_id in grads else Tensor(np.zeros(tape.nodes[param_id].shape))
        for param_id in tape.parameter_ids
    }


@dataclass
class GradCheckResult:
    """Outcome of :func:`finite_diff_check` with ``detailed=True``."""

    max_rel_error: float
    checked: int
    skipped_kinks: int
    worst_parameter: Optional[str] = None


def _coordinates(size: int, limit: Optional[int], rng: np.random.Generator) -> Iterable[int]:
    if limit is None or limit >= size:
        return range(size)
    return np.sort(rng.choice(size, size=limit, replace=False))


def finite_diff_check(
    tape: Tape,
    loss_node: Union[int, Node],
    epsilon: float = 1e-6,
    max_coords_per_param: Optional[int] = None,
    seed: int = 0,
    detailed: bool = False,
) -> Union[float, GradCheckResult]:
    """
    Compares analytic gradients with central differences
    ``(L(p + eps) - L(p - eps)) / 2eps`` for every trainable scalar.

    Coordinates whose perturbation flips the sign pattern at the input of any
    kink op (ReLU) are skipped.

    :param tape: The recorded tape.
    :type tape: Tape
    :param loss_node: The scalar loss node or its id.
    :type loss_node: Union[int, Node]
    :param epsilon: Perturbation, in [1e-7, 1e-3].
    :type epsilon: float, optional
    :param max_coords_per_param: Check at most this many coordinates per
        parameter, sampled with ``seed``. None checks every coordinate.
    :type max_coords_per_param: int, optional
    :param seed: Seed of the coordinate sample.
    :type seed: int, optional
    :param detailed: Return a :class:`GradCheckResult` instead of the float.
    :type detailed: bool, optional
    :return: The maximum relative error ``|a - f| / max(|a|, |f|, 1e-8)``.
    :rtype: Union[float, GradCheckResult]

    :raises ValueError: If epsilon is out of range.
    """

    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must be in [1e-7, 1e-3], not {epsilon}")

    loss = _resolve(tape, loss_node)
    analytic = backward(tape, loss)
    _, base_kinks = tape.replay(upto=loss.id)
    rng = np.random.default_rng(seed)

    def evaluate(param_id: int, value: np.ndarray) -> tuple[float, bool]:
        values, kinks = tape.replay({param_id: value}, upto=loss.id)
        crossed = any(not np.array_equal(kinks[node_id], base_kinks[node_id]) for node_id in kinks)
        return float(values[loss.id].reshape(-1)[0]), crossed

    result = GradCheckResult(0.0, 0, 0)
    for param_id, name in tape.parameter_ids.items():
        if param_id > loss.id:
            continue
        base = tape.nodes[param_id].data
        grad = analytic[param_id].data.reshape(-1)

        for index in _coordinates(base.size, max_coords_per_param, rng):
            plus = base.copy()
            plus.reshape(-1)[index] += epsilon
            minus = base.copy()
            minus.reshape(-1)[index] -= epsilon

            loss_plus, crossed_plus = evaluate(param_id, plus)
            loss_minus, crossed_minus = evaluate(param_id, minus)
            if crossed_plus or crossed_minus:
                result.skipped_kinks += 1
                continue

            numeric = (loss_plus - loss_minus) / (2 * epsilon)
            error = relative_error(float(grad[index]), numeric)
            result.checked += 1
            if error > result.max_rel_error:
                result.max_rel_error = error
                result.worst_parameter = name

    logger.debug(
        "finite_diff_check: %d coordinates checked, %d skipped at kinks, max rel error %.3g (%s)",
        result.checked,
        result.skipped_kinks,
        result.max_rel_error,
        result.worst_parameter,
    )
    return result if detailed else result.max_rel_error


# Elementary ops


@register_op("add")
def _add_forward(a, b):
    return elementwise(Tensor(a), Tensor(b), "add").data, {}


@register_adjoint("add")
def _add_adjoint(grad, saved, needs):
    return grad, grad


@register_op("sub")
def _sub_forward(a, b):
    return elementwise(Tensor(a), Tensor(b), "sub").data, {}


@register_adjoint("sub")
def _sub_adjoint(grad, saved, needs):
    return grad, -grad


@register_op("mul")
def _mul_forward(a, b):
    return elementwise(Tensor(a), Tensor(b), "mul").data, {"a": a, "b": b}


@register_adjoint("mul")
def _mul_adjoint(grad, saved, needs):
    return (
        grad * saved["b"] if needs[0] else None,
        grad * saved["a"] if needs[1] else None,
    )


@register_op("sum")
def _sum_forward(x):
    return np.sum(x).reshape(1, 1, 1, 1), {"shape": x.shape}


@register_adjoint("sum")
def _sum_adjoint(grad, saved, needs):
    return (np.full(saved["shape"], grad.reshape(-1)[0]),)


@register_op("scale")
def _scale_forward(x, factor: float):
    return x * factor, {}


@register_adjoint("scale")
def _scale_adjoint(grad, saved, needs, factor: float):
    return (grad * factor,)


def add(a: Node, b: Node) -> Node:
    return a.tape.apply("add", [a, b])


def sub(a: Node, b: Node) -> Node:
    return a.tape.apply("sub", [a, b])


def mul(a: Node, b: Node) -> Node:
    return a.tape.apply("mul", [a, b])


def sum_all(x: Node) -> Node:
    """Reduces a node to a (1, 1, 1, 1) scalar."""
    return x.tape.apply("sum", [x])


def scale(x: Node, factor: float) -> Node:
    return x.tape.apply("scale", [x], factor=float(factor))
