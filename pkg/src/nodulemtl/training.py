"""Training loop, evaluation, and the stratified k-fold protocol."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor, no_grad
from .losses import (LossConfig, dice_coefficient, exact_accuracy, multitask_loss, off_by_one_accuracy,
                     binary_accuracy, sem)
from .model import MultiTaskNet, NetConfig, build, malignancy_decision, predict_arrays, predicted_classes
from .optim import Adam
from .phantom import RATING_NAMES, read_manifest
from .windowing import read_mask, read_patch

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    ids: list[str]
    patches: np.ndarray  # [N, C, s, s, s]
    masks: np.ndarray  # [N, 1, s, s, s]
    rating_classes: np.ndarray  # [N, 9] in 1..5; last column is malignancy
    malignant: np.ndarray  # [N] bool

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def malignancy_class(self) -> np.ndarray:
        return self.rating_classes[:, -1]


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    records = read_manifest(manifest_path)
    if not records:
        raise ValueError(f"manifest {manifest_path} is empty")
    root = manifest_path.parent
    patches = np.stack([read_patch(root / r.patch) for r in records])
    masks = np.stack([read_mask(root / r.mask) for r in records])[:, None]
    ratings = np.array([r.label.rating_classes() for r in records], dtype=np.int64)
    malignant = np.array([r.label.is_malignant for r in records])
    return Dataset([r.id for r in records], patches.astype(np.float32), masks.astype(np.float32),
                   ratings, malignant)


# -- folds ---------------------------------------------------------------------------

@dataclass
class FoldPlan:
    folds: list[list[int]]  # test indices per fold
    validation: list[list[int]]  # validation indices, drawn from that fold's training portion

    @property
    def n_folds(self) -> int:
        return len(self.folds)

    def training(self, k: int) -> list[int]:
        held = set(self.folds[k]) | set(self.validation[k])
        return [i for fold in self.folds for i in fold if i not in held]


def _stratified_sample(indices: Sequence[int], labels: np.ndarray, fraction: float,
                       rng: np.random.Generator) -> list[int]:
    picked = []
    for cls in (False, True):
        members = [i for i in indices if bool(labels[i]) == cls]
        take = int(math.floor(len(members) * fraction + 0.5))
        picked += [members[j] for j in rng.permutation(len(members))[:take]]
    return sorted(picked)


def make_folds(labels: Sequence[bool], n_folds: int = 5, seed: int = 0,
               val_fraction: float = 0.1) -> FoldPlan:
    """Stratified partition: each class is shuffled, then dealt round-robin.

    The deal continues across classes, so fold sizes differ by at most one.
    """
    labels = np.asarray(labels, dtype=bool)
    if n_folds < 2:
        raise ValueError("need at least two folds")
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(n_folds)]
    slot = 0
    for cls in (False, True):
        members = np.flatnonzero(labels == cls)
        for i in members[rng.permutation(len(members))]:
            folds[slot % n_folds].append(int(i))
            slot += 1
    folds = [sorted(f) for f in folds]
    validation = []
    for k in range(n_folds):
        rest = [i for j, f in enumerate(folds) if j != k for i in f]
        validation.append(_stratified_sample(rest, labels, val_fraction, rng))
    return FoldPlan(folds, validation)


# -- evaluation -----------------------------------------------------------------------

def evaluate(model: MultiTaskNet, data: Dataset, indices: Sequence[int],
             loss_cfg: LossConfig | None = None) -> dict:
    idx = np.asarray(indices, dtype=np.int64)
    out = predict_arrays(model, data.patches[idx])
    truth = data.rating_classes[idx]
    # the ninth attribute row is an auxiliary malignancy target; reported
    # malignancy ratings come from the dedicated malignancy head
    pred = predicted_classes(out["attribute_logits"])
    mal_pred = predicted_classes(out["malignancy_logits"])
    pred[:, -1] = mal_pred
    dice = [dice_coefficient(p, g) for p, g in zip(out["seg_prob"], data.masks[idx])]
    obo = {name: off_by_one_accuracy(pred[:, j], truth[:, j]) for j, name in enumerate(RATING_NAMES)}
    metrics = {
        "n": int(len(idx)),
        "dice": float(np.mean(dice)),
        "off_by_one": obo,
        "mean_off_by_one": float(np.mean(list(obo.values()))),
        "mean_exact": float(np.mean([exact_accuracy(pred[:, j], truth[:, j]) for j in range(truth.shape[1])])),
        "malignancy_binary_accuracy": binary_accuracy(malignancy_decision(out["malignancy_logits"]),
                                                      data.malignant[idx]),
        "malignancy_off_by_one": off_by_one_accuracy(mal_pred, truth[:, -1]),
    }
    if loss_cfg is not None:
        with no_grad():
            _, b = multitask_loss(Tensor(out["seg_prob"]), Tensor(data.masks[idx]),
                                  Tensor(out["attribute_logits"]), truth,
                                  Tensor(out["malignancy_logits"]), truth[:, -1], loss_cfg)
        metrics["loss"] = b["total"]
    return metrics


# -- training -------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: MultiTaskNet
    optimizer: Adam
    log: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    stopped: str = "completed"


def _snapshot(model: MultiTaskNet) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in model.state().items()}


def _restore(model: MultiTaskNet, snap: dict[str, np.ndarray]) -> None:
    for k, t in model.state().items():
        t.data[...] = snap[k]


def batches(indices: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled mini-batches; a trailing batch smaller than 2 is dropped (batch norm)."""
    order = np.asarray(indices)[rng.permutation(len(indices))]
    out = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    return [b for b in out if len(b) >= 2]


def random_flips(patches: np.ndarray, masks: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Flip each sample along a random subset of its three spatial axes.

    Mirroring leaves every rating unchanged, so labels need no adjustment.
    """
    patches, masks = patches.copy(), masks.copy()
    flips = rng.random((len(patches), 3)) < 0.5
    for i, axes in enumerate(flips):
        dims = tuple(int(a) + 1 for a in np.flatnonzero(axes))
        if dims:
            patches[i] = np.flip(patches[i], dims)
            masks[i] = np.flip(masks[i], dims)
    return patches, masks


def train_step(model: MultiTaskNet, opt: Adam, data: Dataset, batch: np.ndarray,
               loss_cfg: LossConfig, rng: np.random.Generator | None = None) -> dict:
    """One Adam step on ``batch``; a generator enables flip augmentation."""
    model.train()
    opt.zero_grad()
    patches, masks = data.patches[batch], data.masks[batch]
    if rng is not None:
        patches, masks = random_flips(patches, masks, rng)
    out = model(Tensor(patches))
    truth = data.rating_classes[batch]
    total, breakdown = multitask_loss(out["seg_prob"], Tensor(masks), out["attribute_logits"],
                                      truth, out["malignancy_logits"], truth[:, -1], loss_cfg)
    if not math.isfinite(breakdown["total"]):
        raise FloatingPointError(f"loss diverged: {breakdown}")
    total.backward()
    opt.step()
    return breakdown


def train(data: Dataset, train_idx: Sequence[int], val_idx: Sequence[int], config: NetConfig,
          loss_cfg: LossConfig | None = None, epochs: int = 30, batch_size: int = 8, seed: int = 0,
          lr: float = 1e-3, patience: int = 10, log_path=None, test_idx: Sequence[int] = (),
          augment: bool = True) -> TrainResult:
    """Train from scratch; the model with the best validation loss is kept.

    Each log line is JSON. The first records the id split so that the
    separation of train / validation / test data can be audited.
    """
    if len(train_idx) < 2:
        raise ValueError("need at least two training samples")
    if batch_size < 2:
        raise ValueError("batch size must be >= 2 for batch norm")
    loss_cfg = loss_cfg or LossConfig(lam=config.trade_off_lambda)
    model = build(config)
    opt = Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    result = TrainResult(model, opt)
    logf = open(log_path, "w") if log_path is not None else None

    def emit(entry: dict) -> None:
        result.log.append(entry)
        if logf is not None:
            logf.write(json.dumps(entry) + "\n")
            logf.flush()

    emit({"event": "split", "train": [data.ids[i] for i in train_idx],
          "validation": [data.ids[i] for i in val_idx], "test": [data.ids[i] for i in test_idx]})
    best = (math.inf, None)
    good = _snapshot(model)
    since_best = 0
    try:
        for epoch in range(epochs):
            sums: dict[str, float] = {}
            steps = 0
            try:
                for batch in batches(train_idx, batch_size, rng):
                    b = train_step(model, opt, data, batch, loss_cfg, rng if augment else None)
                    for k, v in b.items():
                        sums[k] = sums.get(k, 0.0) + v
                    steps += 1
            except FloatingPointError as exc:
                log.warning("epoch %d: %s; restoring last good weights", epoch, exc)
                _restore(model, good)
                result.stopped = f"diverged: {exc}"
                emit({"event": "diverged", "epoch": epoch, "reason": str(exc)})
                break
            good = _snapshot(model)
            entry = {"event": "epoch", "epoch": epoch, "steps": opt.t,
                     "train": {k: v / max(steps, 1) for k, v in sums.items()}}
            if len(val_idx):
                val = evaluate(model, data, val_idx, loss_cfg)
                entry["validation"] = val
                score = val["loss"]
            else:
                score = entry["train"].get("total", math.inf)
            emit(entry)
            log.info("epoch %d loss %.4f val %.4f", epoch, entry["train"].get("total", float("nan")), score)
            if score < best[0]:
                best = (score, good)
                result.best_epoch = epoch
                since_best = 0
            else:
                since_best += 1
                if since_best >= patience:
                    result.stopped = "early-stopped"
                    break
    finally:
        if logf is not None:
            logf.close()
    if best[1] is not None:
        _restore(model, best[1])
    model.eval()
    return result


def crossvalidate(data: Dataset, config: NetConfig, loss_cfg: LossConfig | None = None,
                  n_folds: int = 5, seed: int = 0, epochs: int = 30, batch_size: int = 8,
                  lr: float = 1e-3, patience: int = 10, out_dir=None, augment: bool = True) -> dict:
    """Train one model per fold and report per-fold metrics with mean and SEM."""
    plan = make_folds(data.malignant, n_folds, seed)
    per_fold = []
    for k in range(n_folds):
        log_path = None
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            log_path = Path(out_dir) / f"fold{k}.jsonl"
        res = train(data, plan.training(k), plan.validation[k], config, loss_cfg, epochs, batch_size,
                    seed + k, lr, patience, log_path, test_idx=plan.folds[k], augment=augment)
        metrics = evaluate(res.model, data, plan.folds[k])
        metrics["fold"] = k
        per_fold.append(metrics)
    keys = ["dice", "malignancy_binary_accuracy", "malignancy_off_by_one", "mean_off_by_one", "mean_exact"]
    aggregate = {k: {"mean": float(np.mean([m[k] for m in per_fold])), "sem": sem([m[k] for m in per_fold])}
                 for k in keys}
    return {"folds": per_fold, "aggregate": aggregate, "plan": {"test": plan.folds, "validation": plan.validation}}
