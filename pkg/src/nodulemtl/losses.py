"""Training losses and evaluation metrics."""
from __future__ import annotations

import math
import statistics
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import ShapeError, Tensor, pick, scale, tsum
from .layers import log_softmax

DEFAULT_EPSILON = 1e-5


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = DEFAULT_EPSILON
    lam: float = 1.0  # classification weight
    seg_weight: float = 1.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.lam < 0 or self.seg_weight < 0:
            raise ValueError("loss weights must be non-negative")


def dice_loss(p: Tensor, g: Tensor, epsilon: float = DEFAULT_EPSILON) -> Tensor:
    """Soft Dice loss ``1 - (2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps)``.

    Sums run over every element of ``p``, so a batch is scored as one volume.
    """
    if p.shape != g.shape:
        raise ShapeError(f"dice_loss: shapes {p.shape} vs {g.shape}")
    overlap = tsum(p * g)
    num = scale(overlap, 2.0) + epsilon
    den = tsum(p * p) + float((g.data.astype(np.float64) ** 2).sum()) + epsilon
    return 1.0 - num / den


def categorical_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over rows; targets are 0-based."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or targets.shape[0] != logits.shape[0]:
        raise ShapeError(f"categorical_cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    c = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise ValueError(f"target class out of range [0, {c})")
    return scale(tsum(pick(log_softmax(logits), targets)), -1.0 / targets.size)


def multitask_loss(seg: Tensor, mask: Tensor, attribute_logits: Tensor, attribute_targets,
                   malignancy_logits: Tensor, malignancy_target, cfg: LossConfig = LossConfig()):
    """``seg_weight * dice + lam * (mean attribute CE + malignancy CE)``.

    Targets are rating classes 1..5. A term whose weight is zero is left out
    of the graph entirely. Returns ``(total, breakdown)``.
    """
    attribute_targets = np.asarray(attribute_targets, dtype=np.int64)
    n, k, c = attribute_logits.shape
    breakdown = {}
    terms = []
    if cfg.seg_weight > 0:
        d = dice_loss(seg, mask, cfg.epsilon)
        breakdown["dice"] = d.item()
        terms.append(scale(d, cfg.seg_weight))
    if cfg.lam > 0:
        attr = categorical_cross_entropy(attribute_logits.reshape(n * k, c), attribute_targets.reshape(-1) - 1)
        mal = categorical_cross_entropy(malignancy_logits, np.asarray(malignancy_target) - 1)
        breakdown["attribute_ce"] = attr.item()
        breakdown["malignancy_ce"] = mal.item()
        terms.append(scale(attr + mal, cfg.lam))
    if not terms:
        raise ValueError("both loss weights are zero")
    total = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    breakdown["total"] = total.item()
    return total, breakdown


def recompose(breakdown: dict, cfg: LossConfig) -> float:
    total = cfg.seg_weight * breakdown.get("dice", 0.0)
    if "attribute_ce" in breakdown:
        total += cfg.lam * (breakdown["attribute_ce"] + breakdown["malignancy_ce"])
    return total


# -- metrics -------------------------------------------------------------------------

def dice_coefficient(pred: np.ndarray, truth: np.ndarray, threshold: float | None = 0.5,
                     epsilon: float = DEFAULT_EPSILON) -> float:
    """Dice of one prediction; probabilities are binarised at ``threshold``."""
    p = np.asarray(pred, dtype=np.float64)
    if threshold is not None:
        p = (p >= threshold).astype(np.float64)
    g = np.asarray(truth, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"dice_coefficient: shapes {p.shape} vs {g.shape}")
    return float((2 * (p * g).sum() + epsilon) / ((p * p).sum() + (g * g).sum() + epsilon))


def off_by_one_accuracy(pred_class: Sequence[int], true_class: Sequence[int]) -> float:
    p, t = np.asarray(pred_class), np.asarray(true_class)
    if p.shape != t.shape or p.size == 0:
        raise ValueError("predictions and truths must be non-empty and equally shaped")
    return float(np.mean(np.abs(p - t) <= 1))


def exact_accuracy(pred_class: Sequence[int], true_class: Sequence[int]) -> float:
    p, t = np.asarray(pred_class), np.asarray(true_class)
    if p.shape != t.shape or p.size == 0:
        raise ValueError("predictions and truths must be non-empty and equally shaped")
    return float(np.mean(p == t))


def binary_accuracy(pred: Sequence[bool], truth: Sequence[bool]) -> float:
    return exact_accuracy(np.asarray(pred, dtype=bool), np.asarray(truth, dtype=bool))


def sem(values: Sequence[float]) -> float:
    """Standard error of the mean: sample standard deviation over sqrt(n).

    ``statistics.stdev`` works in exact rational arithmetic, so a constant
    list gives exactly zero.
    """
    x = [float(v) for v in values]
    if not x:
        raise ValueError("sem of an empty sequence")
    if len(x) == 1:
        return 0.0
    return statistics.stdev(x) / math.sqrt(len(x))
