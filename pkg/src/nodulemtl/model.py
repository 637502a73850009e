"""Multi-task volumetric network: segmentation, nine rating heads, malignancy.

Layout (``f`` = base filters, ``s`` = patch size)::

    encoder  4 x [BN -> conv3 -> ELU -> maxpool]   widths f, 2f, 4f, 8f
    decoder  4 x [BN -> conv3 -> ELU -> uppool]    widths 8f, 4f, 2f, f
             each block after the first reads concat(previous, encoder map)
    seg head 1x1x1 conv over concat(decoder, first encoder map) -> sigmoid
    pathway A  global average pool of the pooled bottleneck
    pathway B  4 x [conv3 -> ELU -> maxpool] over the segmentation, then pool
    fusion   dense(concat(A, B)) -> ELU
    heads    dense(fusion) -> 9 x 5 rating logits; dense(fusion) -> 5 malignancy logits
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from . import formats
from .autodiff import ShapeError, Tensor, no_grad
from .layers import (BatchNorm3d, Conv3d, Dense, concat_channels, elu, global_avg_pool, maxpool3d,
                     sigmoid, uppool3d)

LEVELS = 4


@dataclass
class NetConfig:
    patch_size: int = 16
    in_channels: int = 2
    base_filters: int = 8
    subnet_filters: tuple[int, ...] = (8, 16, 32, 64)
    fusion_units: int = 64
    attribute_count: int = 9
    rating_classes: int = 5
    trade_off_lambda: float = 1.0
    bn_momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        self.subnet_filters = tuple(int(c) for c in self.subnet_filters)
        if self.patch_size < 16 or self.patch_size % 2 ** LEVELS:
            raise ValueError(f"patch size must be a positive multiple of 16, got {self.patch_size}")
        if self.attribute_count != 9:
            raise ValueError("attribute_count is fixed at 9")
        if len(self.subnet_filters) != 4:
            raise ValueError("the segmentation sub-net has exactly four conv layers")
        if self.in_channels < 1 or self.base_filters < 1:
            raise ValueError("channel counts must be >= 1")
        if not self.trade_off_lambda >= 0:
            raise ValueError("trade_off_lambda must be non-negative")

    @property
    def filters(self) -> list[int]:
        return [self.base_filters * 2 ** i for i in range(LEVELS)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["subnet_filters"] = list(self.subnet_filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


# Full-scale model: 64^3 two-window patches, encoder ladder 16/32/64/128
# (half the widths of a standard 3-D U-Net).
FULL_SCALE = NetConfig(patch_size=64, in_channels=2, base_filters=16, fusion_units=128)


class MultiTaskNet:
    def __init__(self, config: NetConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        f = config.filters
        mom = config.bn_momentum
        self.encoder = []
        in_ch = config.in_channels
        for i, out_ch in enumerate(f):
            self.encoder.append((BatchNorm3d(in_ch, mom, name=f"enc{i}.bn"),
                                 Conv3d(in_ch, out_ch, 3, rng, name=f"enc{i}.conv")))
            in_ch = out_ch
        self.decoder = []
        dec_widths = f[::-1]
        for j, out_ch in enumerate(dec_widths):
            in_ch = f[-1] if j == 0 else dec_widths[j - 1] + f[LEVELS - j]
            self.decoder.append((BatchNorm3d(in_ch, mom, name=f"dec{j}.bn"),
                                 Conv3d(in_ch, out_ch, 3, rng, name=f"dec{j}.conv")))
        self.seg_head = Conv3d(dec_widths[-1] + f[0], 1, 1, rng, name="seg_head")
        self.subnet = []
        in_ch = 1
        for k, out_ch in enumerate(config.subnet_filters):
            self.subnet.append(Conv3d(in_ch, out_ch, 3, rng, name=f"sub{k}.conv"))
            in_ch = out_ch
        self.fusion = Dense(f[-1] + config.subnet_filters[-1], config.fusion_units, rng, name="fusion")
        self.attr_head = Dense(config.fusion_units, config.attribute_count * config.rating_classes, rng,
                               name="attr_head")
        self.mal_head = Dense(config.fusion_units, config.rating_classes, rng, name="mal_head")
        self.training = True

    # -- bookkeeping ---------------------------------------------------------------
    def _modules(self) -> Iterable:
        for bn, conv in self.encoder:
            yield bn
            yield conv
        for bn, conv in self.decoder:
            yield bn
            yield conv
        yield self.seg_head
        yield from self.subnet
        yield self.fusion
        yield self.attr_head
        yield self.mal_head

    def parameters(self) -> dict[str, Tensor]:
        return {p.name: p for m in self._modules() for p in m.parameters()}

    def buffers(self) -> dict[str, Tensor]:
        return {b.name: b for m in self._modules() if isinstance(m, BatchNorm3d) for b in m.buffers()}

    def state(self) -> dict[str, Tensor]:
        return {**self.parameters(), **self.buffers()}

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def train(self) -> "MultiTaskNet":
        self._set_mode(True)
        return self

    def eval(self) -> "MultiTaskNet":
        self._set_mode(False)
        return self

    def _set_mode(self, training: bool) -> None:
        self.training = training
        for m in self._modules():
            if isinstance(m, BatchNorm3d):
                m.training = training

    def classification_only_parameters(self) -> list[str]:
        names = [p.name for m in (*self.subnet, self.fusion, self.attr_head, self.mal_head)
                 for p in m.parameters()]
        return names

    def segmentation_only_parameters(self) -> list[str]:
        mods = [m for pair in self.decoder for m in pair] + [self.seg_head]
        return [p.name for m in mods for p in m.parameters()]

    # -- forward -------------------------------------------------------------------
    def __call__(self, x: Tensor) -> dict[str, Tensor]:
        cfg = self.config
        s = cfg.patch_size
        if x.shape[1:] != (cfg.in_channels, s, s, s):
            raise ShapeError(f"network input: expected [n, {cfg.in_channels}, {s}, {s}, {s}], got {x.shape}")
        skips = []
        h = x
        for bn, conv in self.encoder:
            h = elu(conv(bn(h)))
            skips.append(h)
            h = maxpool3d(h)
        bottleneck = h
        for j, (bn, conv) in enumerate(self.decoder):
            if j > 0:
                h = concat_channels(h, skips[LEVELS - j])
            h = uppool3d(elu(conv(bn(h))))
        seg_prob = sigmoid(self.seg_head(concat_channels(h, skips[0])))

        g = seg_prob
        for conv in self.subnet:
            g = maxpool3d(elu(conv(g)))
        features = concat_channels(global_avg_pool(bottleneck), global_avg_pool(g))
        fused = elu(self.fusion(features))
        n = x.shape[0]
        attr = self.attr_head(fused).reshape(n, cfg.attribute_count, cfg.rating_classes)
        return {"seg_prob": seg_prob, "attribute_logits": attr, "malignancy_logits": self.mal_head(fused)}


def build(config: NetConfig) -> MultiTaskNet:
    return MultiTaskNet(config)


def forward_multitask(model: MultiTaskNet, patch: Tensor) -> dict[str, Tensor]:
    return model(patch)


def predict_arrays(model: MultiTaskNet, patches: np.ndarray, batch_size: int = 16) -> dict[str, np.ndarray]:
    """Inference-mode forward over a numpy batch, returned as numpy arrays."""
    model.eval()
    outs: dict[str, list] = {}
    with no_grad():
        for i in range(0, len(patches), batch_size):
            res = model(Tensor(patches[i:i + batch_size]))
            for k, v in res.items():
                outs.setdefault(k, []).append(v.data)
    return {k: np.concatenate(v) for k, v in outs.items()}


def count_parameters(model) -> int:
    """Element count of trainable tensors (batch-norm running stats excluded)."""
    params = model.parameters() if hasattr(model, "parameters") else model
    if isinstance(params, dict):
        params = params.values()
    return int(sum(p.size for p in params))


def predicted_classes(logits: np.ndarray) -> np.ndarray:
    """Rating classes 1..5 by argmax; ties go to the lowest class."""
    return np.argmax(logits, axis=-1) + 1


def malignancy_decision(malignancy_logits: np.ndarray) -> np.ndarray:
    """True (malignant) iff the predicted malignancy class exceeds 3."""
    return predicted_classes(malignancy_logits) > 3


# -- checkpoints -----------------------------------------------------------------------

def to_checkpoint(model: MultiTaskNet, optimizer=None) -> formats.Checkpoint:
    tensors = {name: t.data for name, t in model.state().items()}
    step = 0
    if optimizer is not None:
        for name, arr in optimizer.state_tensors().items():
            tensors[f"adam/{name}"] = arr
        step = optimizer.t
    return formats.Checkpoint(config=model.config.to_dict(), tensors=tensors, step=step)


def save_checkpoint(model: MultiTaskNet, path, optimizer=None) -> None:
    formats.write_checkpoint_file(path, to_checkpoint(model, optimizer))


def restore(ckpt: formats.Checkpoint, model: MultiTaskNet | None = None, optimizer=None) -> MultiTaskNet:
    try:
        config = NetConfig.from_dict(ckpt.config)
    except (TypeError, ValueError) as exc:
        raise formats.CheckpointError(f"bad config in checkpoint: {exc}") from None
    if model is None:
        model = build(config)
    elif model.config.to_dict() != config.to_dict():
        raise formats.CheckpointError("checkpoint config does not match the target model")
    state = model.state()
    adam = {k[len("adam/"):]: v for k, v in ckpt.tensors.items() if k.startswith("adam/")}
    plain = {k: v for k, v in ckpt.tensors.items() if not k.startswith("adam/")}
    unknown = sorted(set(plain) - set(state))
    if unknown:
        raise formats.CheckpointError(f"unknown parameter name(s) in checkpoint: {unknown}")
    missing = sorted(set(state) - set(plain))
    if missing:
        raise formats.CheckpointError(f"checkpoint lacks parameter(s): {missing}")
    for name, arr in plain.items():
        if state[name].shape != arr.shape:
            raise formats.CheckpointError(f"{name}: shape {arr.shape} vs model {state[name].shape}")
        state[name].data[...] = arr
    if optimizer is not None:
        optimizer.load_state_tensors(adam, ckpt.step)
    return model


def load_checkpoint(path, model: MultiTaskNet | None = None, optimizer=None) -> MultiTaskNet:
    return restore(formats.read_checkpoint_file(path), model, optimizer)
