"""Per-nodule evidence reports and matplotlib figures.

A report lists the predicted rating ``A`` next to the reference rating ``B``
for every attribute. Pairs within one class of each other are marked ``ok``,
the rest ``miss``. A rating whose top two softmax probabilities are closer
than :data:`LOW_CONFIDENCE_MARGIN` is flagged ``low-confidence``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .losses import dice_coefficient
from .model import MultiTaskNet, predict_arrays, predicted_classes
from .phantom import RATING_NAMES

LOW_CONFIDENCE_MARGIN = 0.1
# keeps PNG bytes independent of the matplotlib version string
_PNG_METADATA = {"Software": None}


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class RatingLine:
    name: str
    predicted: int
    truth: int | None
    confidence: float
    margin: float

    @property
    def low_confidence(self) -> bool:
        return self.margin < LOW_CONFIDENCE_MARGIN

    @property
    def marker(self) -> str:
        if self.truth is None:
            return "-"
        return "ok" if abs(self.predicted - self.truth) <= 1 else "miss"


@dataclass
class NoduleReport:
    nodule_id: str
    seg_mask: np.ndarray  # [s, s, s] uint8
    seg_prob: np.ndarray  # [s, s, s] float
    ratings: list[RatingLine] = field(default_factory=list)
    dice: float | None = None

    @property
    def malignancy_line(self) -> RatingLine:
        return self.ratings[-1]

    @property
    def malignancy_class(self) -> str:
        return "malignant" if self.malignancy_line.predicted > 3 else "benign"

    def render(self) -> str:
        lines = [f"nodule {self.nodule_id}",
                 f"segmentation voxels {int(self.seg_mask.sum())}"]
        if self.dice is not None:
            lines.append(f"dice {self.dice:.4f}")
        lines.append(f"{'rating':<20} {'A/B':>5}  {'mark':<4}  {'p(A)':>6}  flag")
        for r in self.ratings:
            pair = f"{r.predicted}/{r.truth if r.truth is not None else '-'}"
            flag = "low-confidence" if r.low_confidence else ""
            lines.append(f"{r.name:<20} {pair:>5}  {r.marker:<4}  {r.confidence:6.3f}  {flag}".rstrip())
        lines.append(f"malignancy class {self.malignancy_class} (rating {self.malignancy_line.predicted})")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({
            "id": self.nodule_id,
            "dice": self.dice,
            "ratings": {r.name: {"A": r.predicted, "B": r.truth, "mark": r.marker,
                                 "low_confidence": r.low_confidence} for r in self.ratings},
            "malignancy_class": self.malignancy_class,
        }, sort_keys=True)


def predict(model: MultiTaskNet, patch: np.ndarray, mask: np.ndarray | None = None,
            rating_classes: Sequence[int] | None = None, nodule_id: str = "input") -> NoduleReport:
    """Run one patch ``[C, s, s, s]`` through the model and build its report.

    ``rating_classes`` holds the nine reference classes (eight attributes,
    then malignancy) when they are known.
    """
    patch = np.asarray(patch, dtype=np.float32)
    if patch.ndim != 4:
        raise ValueError(f"expected a [C, s, s, s] patch, got shape {patch.shape}")
    out = predict_arrays(model, patch[None])
    prob = out["seg_prob"][0, 0]
    logits = out["attribute_logits"][0]  # [9, 5]; the last row is replaced by the malignancy head
    logits = np.concatenate([logits[:len(RATING_NAMES) - 1], out["malignancy_logits"]], axis=0)
    probs = _softmax(logits.astype(np.float64))
    pred = predicted_classes(logits)
    ranked = np.sort(probs, axis=-1)
    truth = list(rating_classes) if rating_classes is not None else [None] * len(RATING_NAMES)
    if len(truth) != len(RATING_NAMES):
        raise ValueError(f"expected {len(RATING_NAMES)} reference ratings, got {len(truth)}")
    lines = [RatingLine(name, int(pred[j]), None if truth[j] is None else int(truth[j]),
                        float(probs[j, pred[j] - 1]), float(ranked[j, -1] - ranked[j, -2]))
             for j, name in enumerate(RATING_NAMES)]
    rep = NoduleReport(nodule_id, (prob >= 0.5).astype(np.uint8), prob, lines)
    if mask is not None:
        rep.dice = dice_coefficient(prob, np.asarray(mask).reshape(prob.shape))
    return rep


# -- figures ----------------------------------------------------------------------------

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_mid_slices(patch: np.ndarray, pred_mask: np.ndarray, truth_mask: np.ndarray | None,
                    path, title: str = "") -> Path:
    """Axial mid-slice of every input channel next to predicted and reference masks."""
    plt = _pyplot()
    mid = patch.shape[1] // 2
    panels = [(f"channel {c}", patch[c, mid]) for c in range(patch.shape[0])]
    panels.append(("predicted mask", pred_mask[mid]))
    if truth_mask is not None:
        panels.append(("reference mask", np.asarray(truth_mask).reshape(pred_mask.shape)[mid]))
    fig, axes = plt.subplots(1, len(panels), figsize=(2.2 * len(panels), 2.6))
    for ax, (label, img) in zip(np.atleast_1d(axes), panels):
        ax.imshow(img, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
        ax.set_title(label, fontsize=8)
        ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=80, metadata=_PNG_METADATA)
    plt.close(fig)
    return path


def plot_training_curves(log: Sequence[dict], path) -> Path:
    """Training loss terms and validation loss / dice per epoch from a metrics log."""
    plt = _pyplot()
    epochs = [e for e in log if e.get("event") == "epoch"]
    xs = [e["epoch"] for e in epochs]
    fig, (ax_loss, ax_dice) = plt.subplots(1, 2, figsize=(9, 3.4))
    for key in ("total", "dice", "attribute_ce", "malignancy_ce"):
        ys = [e["train"].get(key) for e in epochs]
        if any(y is not None for y in ys):
            ax_loss.plot(xs, [np.nan if y is None else y for y in ys], label=f"train {key}")
    if epochs and "validation" in epochs[0]:
        ax_loss.plot(xs, [e["validation"]["loss"] for e in epochs], "k--", label="validation total")
        ax_dice.plot(xs, [e["validation"]["dice"] for e in epochs], label="validation dice")
        ax_dice.plot(xs, [e["validation"]["mean_off_by_one"] for e in epochs], label="validation off-by-one")
    ax_loss.set_yscale("log")
    ax_dice.set_ylim(0, 1)
    for ax in (ax_loss, ax_dice):
        ax.set_xlabel("epoch")
        if ax.get_legend_handles_labels()[0]:
            ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=80, metadata=_PNG_METADATA)
    plt.close(fig)
    return path
