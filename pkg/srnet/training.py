"""
This module contains the class-balanced cross-entropy loss, SGD with
momentum and weight decay, right-angle data augmentation and the training
loop.

====================================
Copyright srnet-lite authors, 2024-present
====================================
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

try:
    from . import _checkpoint, constants
    from .autograd import Node, backward, register_adjoint, register_op
    from .data import Sample, batch
    from .evaluation import EvalReport, evaluate
    from .graph import NetworkGraph
    from .tensor import Tensor
    from .utils import CheckpointError, ConfigError, GraphError, ShapeError
except ImportError:
    import _checkpoint
    import constants
    from autograd import Node, backward, register_adjoint, register_op
    from data import Sample, batch
    from evaluation import EvalReport, evaluate
    from graph import NetworkGraph
    from tensor import Tensor
    from utils import CheckpointError, ConfigError, GraphError, ShapeError

logger = logging.getLogger(__name__)

NORMALIZATIONS = ("pixels", "sum")
# Parameter name suffixes that get no weight decay
_NO_DECAY_SUFFIXES = (".bias", ".beta")


# Loss


@dataclass(frozen=True)
class LossConfig:
    """
    :ivar float delta: A fixed weight in (0, 1) on the salient terms, or None
        for ``|Y-| / T`` per image (clamped to [0.05, 0.95]).
    :ivar str normalization: ``"pixels"`` divides each image's loss by its
        pixel count and averages over the batch; ``"sum"`` adds everything up.
    """

    delta: Optional[float] = None
    normalization: str = "pixels"

    def __post_init__(self):
        if self.delta is not None and not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must be in (0, 1), not {self.delta}")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"normalization must be one of {NORMALIZATIONS}, not {self.normalization!r}")

    def deltas(self, mask: np.ndarray) -> np.ndarray:
        """The per-image delta, shape ``(n,)``."""

        if self.delta is not None:
            return np.full(mask.shape[0], self.delta)
        negatives = 1.0 - mask.mean(axis=(1, 2, 3))
        return np.clip(negatives, *constants.DELTA_CLAMP)


def _check_mask(probs: np.ndarray, mask: np.ndarray):
    if probs.shape[1] != 2 or mask.shape[1] != 1:
        raise ShapeError(f"Expected 2-channel probabilities and a 1-channel mask, got {probs.shape}, {mask.shape}")
    if probs.shape[0] != mask.shape[0] or probs.shape[2:] != mask.shape[2:]:
        raise ShapeError(f"Probabilities {probs.shape} and mask {mask.shape} differ in size")
    if not np.isin(mask, (0.0, 1.0)).all():
        raise ShapeError("The mask is not binary")


@register_op("balanced_bce")
def _balanced_bce_forward(probs, mask: np.ndarray, deltas: np.ndarray, normalization: str):
    salient = mask[:, 0]
    positive = np.log(np.maximum(probs[:, 1], constants.LOG_CLAMP))
    negative = np.log(np.maximum(probs[:, 0], constants.LOG_CLAMP))
    per_pixel = -(deltas[:, None, None] * salient * positive + (1 - deltas[:, None, None]) * (1 - salient) * negative)
    per_image = per_pixel.sum(axis=(1, 2))
    if normalization == "pixels":
        total = (per_image / salient[0].size).mean()
    else:
        total = per_image.sum()
    return np.full((1, 1, 1, 1), total), {"probs": probs}


@register_adjoint("balanced_bce")
def _balanced_bce_adjoint(grad, saved, needs, mask: np.ndarray, deltas: np.ndarray, normalization: str):
    probs = saved["probs"]
    salient = mask[:, 0]
    n, _, h, w = probs.shape
    weight = grad.reshape(-1)[0] / (n * h * w) if normalization == "pixels" else grad.reshape(-1)[0]

    out = np.zeros_like(probs)
    # Zero slope where the log argument is clamped
    p1, p0 = probs[:, 1], probs[:, 0]
    out[:, 1] = np.where(p1 > constants.LOG_CLAMP, -deltas[:, None, None] * salient / np.maximum(p1, 1e-300), 0.0)
    out[:, 0] = np.where(
        p0 > constants.LOG_CLAMP, -(1 - deltas[:, None, None]) * (1 - salient) / np.maximum(p0, 1e-300), 0.0
    )
    return (out * weight,)


def balanced_bce_loss(probs: Node, mask: Union[Tensor, np.ndarray], cfg: Optional[LossConfig] = None) -> Node:
    """
    ``L = -delta * sum_{Y+} log p1 - (1 - delta) * sum_{Y-} log p0`` per image,
    log arguments clamped at 1e-12, then normalized as ``cfg.normalization`` says.

    :param probs: Softmax output ``(n, 2, H, W)``.
    :type probs: Node
    :param mask: Ground truth ``(n, 1, H, W)``.
    :type mask: Union[Tensor, numpy.ndarray]
    :param cfg: Delta mode and normalization.
    :type cfg: LossConfig, optional
    :return: A ``(1, 1, 1, 1)`` loss node.
    :rtype: Node

    :raises ShapeError: If the mask is not binary or shapes disagree.
    """

    cfg = cfg or LossConfig()
    mask = np.array(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    _check_mask(probs.data, mask)
    return probs.tape.apply(
        "balanced_bce", [probs], mask=mask, deltas=cfg.deltas(mask), normalization=cfg.normalization
    )


def balanced_bce_loss_array(probs: np.ndarray, mask: np.ndarray, cfg: Optional[LossConfig] = None) -> float:
    """The loss value without recording anything."""

    cfg = cfg or LossConfig()
    _check_mask(probs, mask)
    out, _ = _balanced_bce_forward(probs, mask, cfg.deltas(mask), cfg.normalization)
    return float(out.reshape(-1)[0])


# Optimizer


@dataclass
class OptimizerState:
    """
    SGD hyperparameters and the per-parameter velocity.

    :ivar dict velocity: Velocity arrays by parameter name, created on first use.
    """

    lr: float = constants.DEFAULT_LR
    momentum: float = constants.DEFAULT_MOMENTUM
    weight_decay: float = constants.DEFAULT_WEIGHT_DECAY
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0


def decays(name: str) -> bool:
    """Whether weight decay applies to a parameter. Biases and batch norm shifts are excluded."""
    return not name.endswith(_NO_DECAY_SUFFIXES)


def sgd_step(
    params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimizerState
) -> Dict[str, np.ndarray]:
    """
    One update ``v = momentum * v + grad + weight_decay * param``,
    ``param = param - lr * v`` for every parameter with a gradient.

    New arrays are returned; the inputs are never written to.

    :raises ShapeError: If a gradient or velocity shape differs from its parameter.
    """

    updated = dict(params)
    for name, grad in grads.items():
        param = params[name]
        if grad.shape != param.shape:
            raise ShapeError(f"Gradient of {name} has shape {grad.shape}, parameter has {param.shape}")
        velocity = state.velocity.get(name)
        if velocity is None:
            velocity = np.zeros_like(param)
        elif velocity.shape != param.shape:
            raise ShapeError(f"Velocity of {name} has shape {velocity.shape}, parameter has {param.shape}")

        step = grad + state.weight_decay * param if decays(name) else grad
        velocity = state.momentum * velocity + step
        state.velocity[name] = velocity
        updated[name] = param - state.lr * velocity
    state.steps += 1
    return updated


# Augmentation


@dataclass(frozen=True)
class Augmentation:
    """A horizontal flip, followed by ``quarter_turns`` counter-clockwise right-angle rotations."""

    flip: bool = False
    quarter_turns: int = 0

    @classmethod
    def draw(cls, seed: int) -> Augmentation:
        rng = np.random.default_rng(seed)
        flip = bool(rng.random() < 0.5)
        quarter_turns = int(rng.integers(1, 4)) if rng.random() < 0.5 else 0
        return cls(flip, quarter_turns)

    def apply(self, values: np.ndarray) -> np.ndarray:
        if self.flip:
            values = values[..., ::-1]
        return np.ascontiguousarray(np.rot90(values, self.quarter_turns, axes=(2, 3)))

    def invert(self, values: np.ndarray) -> np.ndarray:
        values = np.rot90(values, -self.quarter_turns, axes=(2, 3))
        if self.flip:
            values = values[..., ::-1]
        return np.ascontiguousarray(values)


def augment(sample: Sample, seed: int) -> Sample:
    """
    With probability 0.5 a horizontal flip, and with probability 0.5 a
    rotation by 90, 180 or 270 degrees, applied to image and mask together.
    """

    plan = Augmentation.draw(seed)
    return Sample(Tensor(plan.apply(sample.image.data)), Tensor(plan.apply(sample.mask.data)), sample.name)


def augment_inverse(sample: Sample, seed: int) -> Sample:
    """Undoes :func:`augment` with the same seed."""

    plan = Augmentation.draw(seed)
    return Sample(Tensor(plan.invert(sample.image.data)), Tensor(plan.invert(sample.mask.data)), sample.name)


# Training loop


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = constants.DEFAULT_EPOCHS
    batch_size: int = constants.DEFAULT_BATCH_SIZE
    lr: float = constants.DEFAULT_LR
    momentum: float = constants.DEFAULT_MOMENTUM
    weight_decay: float = constants.DEFAULT_WEIGHT_DECAY
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    augment: bool = True
    checkpoint_path: Optional[str] = None

    def optimizer(self) -> OptimizerState:
        return OptimizerState(self.lr, self.momentum, self.weight_decay)


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    wall_seconds: float

    def csv(self) -> str:
        return f"{self.epoch},{self.mean_loss!r},{self.wall_seconds:.3f}"


@dataclass
class TrainResult:
    """What :func:`train` returns: the epoch history and, if one was given, the held-out report."""

    history: List[EpochLog]
    optimizer: OptimizerState
    held_out: Optional[EvalReport] = None
    checkpoint_path: Optional[str] = None


def train_step(
    net: NetworkGraph, images: Tensor, masks: Tensor, optimizer: OptimizerState, loss_cfg: Optional[LossConfig] = None
) -> float:
    """One forward/backward/update on a batch. Returns the loss before the update."""

    result = net.forward(images, mode="train")
    loss = balanced_bce_loss(result.output, masks, loss_cfg)
    grads = backward(result.tape, loss)
    named = {result.tape.parameter_ids[param_id]: grad.data for param_id, grad in grads.items()}
    net.params = sgd_step(net.params, named, optimizer)
    return float(loss.data.reshape(-1)[0])


def fit_batch(
    net: NetworkGraph,
    images: Tensor,
    masks: Tensor,
    steps: int,
    optimizer: Optional[OptimizerState] = None,
    loss_cfg: Optional[LossConfig] = None,
) -> List[float]:
    """Repeats :func:`train_step` on one fixed batch; returns the loss of every step."""

    optimizer = optimizer or OptimizerState()
    return [train_step(net, images, masks, optimizer, loss_cfg) for _ in range(steps)]


def train(
    net: NetworkGraph,
    dataset: Sequence[Sample],
    cfg: TrainConfig,
    on_epoch: Optional[Callable[[EpochLog], None]] = None,
    held_out: Optional[Sequence[Sample]] = None,
    n_thresholds: int = constants.DEFAULT_N_THRESHOLDS,
    beta_squared: float = constants.DEFAULT_BETA_SQUARED,
) -> TrainResult:
    """
    Shuffled mini-batch SGD over ``dataset``.

    :param net: A materialized network; its parameters and batch norm
        statistics are updated in place.
    :type net: NetworkGraph
    :param dataset: Training samples, all of one size.
    :type dataset: Sequence[Sample]
    :param cfg: Epochs, batch size, optimizer and loss settings.
    :type cfg: TrainConfig
    :param on_epoch: Called with each epoch's log line.
    :type on_epoch: Callable[[EpochLog], None], optional
    :param held_out: Samples evaluated once training ends.
    :type held_out: Sequence[Sample], optional
    :return: The history and, with ``held_out``, its evaluation.
    :rtype: TrainResult

    :raises ConfigError: If the dataset is empty or the schedule is invalid.
    :raises CheckpointError: If a checkpoint cannot be written.
    """

    if not dataset:
        raise ConfigError("Cannot train on an empty dataset")
    if cfg.epochs < 1 or cfg.batch_size < 1:
        raise ConfigError(f"epochs and batch_size must be >= 1, not {cfg.epochs} and {cfg.batch_size}")

    rng = np.random.default_rng(cfg.seed)
    optimizer = cfg.optimizer()
    history = []
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            samples = [dataset[index] for index in order[start : start + cfg.batch_size]]
            if cfg.augment:
                samples = [augment(sample, int(rng.integers(2**31))) for sample in samples]
            images, masks = batch(samples)
            losses.append(train_step(net, images, masks, optimizer, cfg.loss))
            logger.debug("epoch %d step %d loss %.6f", epoch, optimizer.steps, losses[-1])

        log = EpochLog(epoch, float(np.mean(losses)), time.perf_counter() - started)
        history.append(log)
        logger.info("Epoch %d/%d: mean loss %.6f (%.1fs)", epoch, cfg.epochs, log.mean_loss, log.wall_seconds)
        if cfg.checkpoint_path:
            _checkpoint.save_checkpoint(cfg.checkpoint_path, net.state_dict())
        if on_epoch is not None:
            on_epoch(log)

    report = None
    if held_out:
        report = evaluate(net, held_out, n_thresholds, beta_squared)
        logger.info("Held-out F-beta max %.4f, MAE %.4f", report.f_beta_max, report.mae)
    return TrainResult(history, optimizer, report, cfg.checkpoint_path)


def load_into(net: NetworkGraph, path: Union[str, os.PathLike]) -> NetworkGraph:
    """
    Loads a checkpoint into ``net``.

    :raises CheckpointError: If the file is malformed or does not match the network.
    """

    state = _checkpoint.load_checkpoint(path)
    try:
        net.load_state_dict(state)
    except GraphError as e:
        raise CheckpointError(str(e), os.fspath(path)) from e
    return net


def save_from(net: NetworkGraph, path: Union[str, os.PathLike]):
    _checkpoint.save_checkpoint(path, net.state_dict())


def predict_maps(net: NetworkGraph, samples: Sequence[Sample]) -> List[np.ndarray]:
    """Eval-mode saliency maps ``(H, W)``, one per sample."""
    return [net.predict(sample.image).data[0, 1] for sample in samples]

