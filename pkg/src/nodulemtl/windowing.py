"""CT preprocessing: window/level mapping, isotropic resampling, patch cropping."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import formats

HU_MIN, HU_MAX = -3024.0, 3071.0
AIR_HU = -1000.0
TARGET_SPACING_MM = 0.6


@dataclass(frozen=True)
class WindowPreset:
    width: float
    center: float

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError(f"window width must be positive, got {self.width}")

    @classmethod
    def parse(cls, text: str) -> "WindowPreset":
        """Parse ``"ww/wc"``, e.g. ``"1600/-600"``."""
        try:
            ww, wc = text.split("/")
            return cls(float(ww), float(wc))
        except ValueError:
            raise ValueError(f"bad window preset {text!r}; expected 'width/center'") from None

    def __str__(self) -> str:
        return f"{self.width:g}/{self.center:g}"


# Lung window and a narrower soft-tissue-leaning lung window.
LUNG_WIDE = WindowPreset(1600.0, -600.0)
LUNG_NARROW = WindowPreset(700.0, -600.0)
DEFAULT_PRESETS = (LUNG_WIDE, LUNG_NARROW)


def parse_presets(text: str) -> tuple[WindowPreset, ...]:
    presets = tuple(WindowPreset.parse(p.strip()) for p in text.split(",") if p.strip())
    if not presets:
        raise ValueError("at least one window preset is required")
    return presets


@dataclass
class HuVolume:
    voxels: np.ndarray  # [d, h, w]
    spacing_mm: tuple[float, float, float]  # (z, y, x)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise ValueError(f"HuVolume needs 3-D voxels, got shape {self.voxels.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing_mm}")
        if self.voxels.size and (self.voxels.min() < HU_MIN or self.voxels.max() > HU_MAX):
            raise ValueError("HU values outside [-3024, 3071]")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    @property
    def extent_mm(self) -> np.ndarray:
        return (np.array(self.dims) - 1) * np.array(self.spacing_mm)


def window_transform(hu, preset: WindowPreset):
    """Linear window: ``clamp((hu - (center - width/2)) / width, 0, 1)``."""
    lo = preset.center - preset.width / 2
    out = np.clip((np.asarray(hu, dtype=np.float64) - lo) / preset.width, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def _linear_axis(a: np.ndarray, axis: int, ratio: float, n_out: int) -> np.ndarray:
    # output sample j sits at input coordinate j * ratio; beyond the last input
    # sample the edge value is held
    n_in = a.shape[axis]
    pos = np.arange(n_out) * ratio
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = np.clip(pos - i0, 0.0, 1.0)
    shape = [1] * a.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    return np.take(a, i0, axis=axis) * (1 - frac) + np.take(a, i1, axis=axis) * frac


def resample_isotropic(v: HuVolume, target_mm: float = TARGET_SPACING_MM) -> HuVolume:
    """Trilinear resampling onto a ``target_mm`` grid (separable per axis)."""
    if not target_mm > 0:
        raise ValueError("target spacing must be positive")
    if min(v.dims) < 2:
        raise ValueError(f"cannot resample degenerate volume of dims {v.dims}")
    out = v.voxels.astype(np.float64)
    for axis, (n, s) in enumerate(zip(v.dims, v.spacing_mm)):
        n_out = max(1, int(math.floor(n * s / target_mm + 0.5)))
        out = _linear_axis(out, axis, target_mm / s, n_out)
    return HuVolume(out.astype(np.float32), (target_mm,) * 3)


def crop_centered(voxels: np.ndarray, center_vox: np.ndarray, size: int, fill: float) -> np.ndarray:
    start = np.floor(center_vox - (size - 1) / 2 + 0.5).astype(np.int64)
    out = np.full((size,) * 3, fill, dtype=voxels.dtype)
    src, dst = [], []
    for axis in range(3):
        lo, hi = start[axis], start[axis] + size
        a, b = max(lo, 0), min(hi, voxels.shape[axis])
        if a >= b:
            return out
        src.append(slice(a, b))
        dst.append(slice(a - lo, b - lo))
    out[tuple(dst)] = voxels[tuple(src)]
    return out


def _check_patch_size(size: int) -> None:
    if size < 1 or size & (size - 1):
        raise ValueError(f"patch size must be a power of two, got {size}")


def extract_patch(v: HuVolume, centroid_mm: Sequence[float], size: int,
                  presets: Sequence[WindowPreset] = DEFAULT_PRESETS) -> np.ndarray:
    """Crop a ``size``-cube around ``centroid_mm`` and window it once per preset.

    Returns ``[len(presets), size, size, size]`` float32 in [0, 1]. Voxels
    outside the volume are filled with air before windowing.
    """
    _check_patch_size(size)
    if len(set(v.spacing_mm)) != 1:
        raise ValueError(f"extract_patch needs an isotropic volume, got spacing {v.spacing_mm}")
    c = np.asarray(centroid_mm, dtype=np.float64)
    if c.shape != (3,) or np.any(c < 0) or np.any(c > v.extent_mm):
        raise ValueError(f"centroid {list(c)} mm lies outside the volume extent {v.extent_mm.tolist()}")
    hu = crop_centered(v.voxels, c / v.spacing_mm[0], size, AIR_HU)
    return np.stack([window_transform(hu, p) for p in presets]).astype(np.float32)


def read_volume(path) -> HuVolume:
    voxels, spacing = formats.read_volume_file(path)
    return HuVolume(voxels, spacing)


def write_volume(v: HuVolume, path) -> None:
    formats.write_volume_file(path, v.voxels, v.spacing_mm)


# Patches and masks reuse NKVOL1 with a unit-spacing sentinel; channels are
# stacked along z, so a [c, s, s, s] patch is stored with dims [c*s, s, s].
PATCH_SPACING = (1.0, 1.0, 1.0)


def write_patch(channels: np.ndarray, path) -> None:
    c, s = channels.shape[0], channels.shape[1]
    formats.write_volume_file(path, channels.reshape(c * s, s, s), PATCH_SPACING)


def read_patch(path) -> np.ndarray:
    voxels, _ = formats.read_volume_file(path)
    s = voxels.shape[1]
    if voxels.shape[0] % s or voxels.shape[2] != s:
        raise formats.FormatError(f"patch dims {voxels.shape} are not a stack of cubes")
    return voxels.reshape(voxels.shape[0] // s, s, s, s)


def write_mask(mask: np.ndarray, path) -> None:
    formats.write_volume_file(path, mask.astype(np.float32), PATCH_SPACING)


def read_mask(path) -> np.ndarray:
    voxels, _ = formats.read_volume_file(path)
    return voxels
