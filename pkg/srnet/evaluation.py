"""
This module contains the saliency metrics: precision-recall curves,
maximum F-measure and mean absolute error, and the :class:`EvalReport`
that bundles them.

PR points are computed per image and then averaged over the images that
have at least one salient pixel. MAE averages over every image.

====================================
Copyright srnet-lite authors, 2024-present
====================================
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, List, NamedTuple, Sequence, Union

import numpy as np

try:
    from . import constants
    from .tensor import Tensor
    from .utils import ConfigError, DatasetError, ShapeError
except ImportError:
    import constants
    from tensor import Tensor
    from utils import ConfigError, DatasetError, ShapeError

if TYPE_CHECKING:
    from .data import Sample
    from .graph import NetworkGraph

logger = logging.getLogger(__name__)

MapLike = Union[Tensor, np.ndarray]


class PRPoint(NamedTuple):
    threshold: float
    precision: float
    recall: float


def _as_map(value: MapLike) -> np.ndarray:
    data = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
    return data.reshape(data.shape[-2:]) if data.size == np.prod(data.shape[-2:]) else data


def thresholds(n_thresholds: int) -> np.ndarray:
    """Bin midpoints ``(i + 0.5) / n``: strictly increasing inside [0, 1)."""

    if n_thresholds < 1:
        raise ConfigError(f"n_thresholds must be >= 1, not {n_thresholds}")
    return (np.arange(n_thresholds) + 0.5) / n_thresholds


def _image_pr(pred: np.ndarray, gt: np.ndarray, cuts: np.ndarray):
    salient = gt >= 0.5
    positives = np.sort(pred[salient])
    negatives = np.sort(pred[~salient])
    # Counts of pred >= t
    true_positive = positives.size - np.searchsorted(positives, cuts, side="left")
    false_positive = negatives.size - np.searchsorted(negatives, cuts, side="left")
    predicted = true_positive + false_positive
    precision = np.where(predicted > 0, true_positive / np.maximum(predicted, 1), 1.0)
    recall = true_positive / positives.size
    return precision, recall


def pr_curve(
    preds: Sequence[MapLike], gts: Sequence[MapLike], n_thresholds: int = constants.DEFAULT_N_THRESHOLDS
) -> List[PRPoint]:
    """
    Binarizes each prediction at ``pred >= t`` for every threshold and
    averages per-image precision and recall. Precision is 1 when nothing is
    predicted salient. Images whose ground truth is empty are skipped.

    :param preds: Saliency maps in [0, 1].
    :type preds: Sequence[Union[Tensor, numpy.ndarray]]
    :param gts: Binary ground truth maps, same sizes.
    :type gts: Sequence[Union[Tensor, numpy.ndarray]]
    :param n_thresholds: Number of thresholds.
    :type n_thresholds: int, optional
    :return: One point per threshold, in increasing threshold order.
    :rtype: list[PRPoint]

    :raises DatasetError: If the lists are empty, differ in length, or no ground truth has a salient pixel.
    :raises ShapeError: If a prediction and its ground truth differ in shape.
    """

    if not preds or len(preds) != len(gts):
        raise DatasetError(f"Need equally many predictions and ground truths, got {len(preds)} and {len(gts)}")

    cuts = thresholds(n_thresholds)
    precision_sum = np.zeros(n_thresholds)
    recall_sum = np.zeros(n_thresholds)
    used = 0
    for pred, gt in zip(preds, gts):
        pred, gt = _as_map(pred), _as_map(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"Prediction {pred.shape} and ground truth {gt.shape} differ in shape")
        if not (gt >= 0.5).any():
            continue
        precision, recall = _image_pr(pred, gt, cuts)
        precision_sum += precision
        recall_sum += recall
        used += 1

    if used == 0:
        raise DatasetError("No ground truth has a salient pixel; the PR curve is undefined")
    logger.debug("PR curve over %d of %d images", used, len(preds))
    return [
        PRPoint(float(t), float(p), float(r))
        for t, p, r in zip(cuts, precision_sum / used, recall_sum / used)
    ]


def f_beta_max(pr: Iterable[PRPoint], beta_squared: float = constants.DEFAULT_BETA_SQUARED) -> float:
    """
    ``max (1 + b2) p r / (b2 p + r)`` over the curve, with 0/0 taken as 0.

    :raises ConfigError: If ``beta_squared`` is not positive.
    :raises DatasetError: If the curve is empty.
    """

    if beta_squared <= 0:
        raise ConfigError(f"beta_squared must be > 0, not {beta_squared}")
    points = np.array([(point[1], point[2]) for point in pr], dtype=np.float64).reshape(-1, 2)
    if not len(points):
        raise DatasetError("Cannot take the F-measure of an empty PR curve")

    precision, recall = points[:, 0], points[:, 1]
    denominator = beta_squared * precision + recall
    scores = np.where(
        denominator > 0, (1 + beta_squared) * precision * recall / np.where(denominator > 0, denominator, 1.0), 0.0
    )
    return float(scores.max())


def mae(pred: MapLike, gt: MapLike) -> float:
    """
    ``mean |pred - gt|`` over all pixels.

    :raises ShapeError: If the shapes differ.
    """

    pred, gt = _as_map(pred), _as_map(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"Prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    return float(np.abs(pred - gt).mean())


@dataclass
class EvalReport:
    """
    :ivar list pr_points: ``(threshold, precision, recall)`` per threshold.
    :ivar float f_beta_max: Best F-measure along the curve.
    :ivar float mae: MAE averaged over images.
    """

    pr_points: List[PRPoint]
    f_beta_max: float
    mae: float
    beta_squared: float = constants.DEFAULT_BETA_SQUARED
    images: int = 0
    names: List[str] = field(default_factory=list, repr=False)

    def csv_lines(self) -> List[str]:
        lines = ["threshold,precision,recall"]
        lines.extend(f"{t!r},{p!r},{r!r}" for t, p, r in self.pr_points)
        lines.append(f"fbeta_max,{self.f_beta_max!r}")
        lines.append(f"mae,{self.mae!r}")
        return lines

    def to_csv(self) -> str:
        return "\n".join(self.csv_lines()) + "\n"


def evaluate_maps(
    preds: Sequence[MapLike],
    gts: Sequence[MapLike],
    n_thresholds: int = constants.DEFAULT_N_THRESHOLDS,
    beta_squared: float = constants.DEFAULT_BETA_SQUARED,
) -> EvalReport:
    """The full report for paired saliency maps and ground truths."""

    curve = pr_curve(preds, gts, n_thresholds)
    errors = [mae(pred, gt) for pred, gt in zip(preds, gts)]
    return EvalReport(curve, f_beta_max(curve, beta_squared), float(np.mean(errors)), beta_squared, len(preds))


def evaluate(
    net: NetworkGraph,
    samples: Sequence[Sample],
    n_thresholds: int = constants.DEFAULT_N_THRESHOLDS,
    beta_squared: float = constants.DEFAULT_BETA_SQUARED,
) -> EvalReport:
    """Runs ``net`` in eval mode over ``samples`` and scores its saliency channel."""

    preds = [net.predict(sample.image).data[0, 1] for sample in samples]
    gts = [sample.mask.data[0, 0] for sample in samples]
    report = evaluate_maps(preds, gts, n_thresholds, beta_squared)
    report.names = [sample.name for sample in samples]
    return report
