"""Synthetic nodule phantoms with known masks and attribute ratings.

Each phantom is a spiculated, optionally calcified ellipsoid in a textured
lung background. Its nine ratings come from fixed monotone maps of the
generating parameters, passed through a panel of four simulated raters and
averaged exactly as real multi-reader ratings are (:func:`derive_label`).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .windowing import (DEFAULT_PRESETS, TARGET_SPACING_MM, HuVolume, WindowPreset, crop_centered,
                        extract_patch, resample_isotropic, write_mask, write_patch)

ATTRIBUTE_NAMES = ("subtlety", "internal_structure", "calcification", "sphericity", "margin",
                   "lobulation", "spiculation", "solidity")
# the eight attributes plus malignancy rating form the nine rating heads
RATING_NAMES = ATTRIBUTE_NAMES + ("malignancy",)

MAX_SPIKES = 8
MAX_BLUR_MM = 1.2
SIZE_RANGE_MM = (1.5, 2.8)
CONTRAST_RANGE_HU = (-300.0, 100.0)
SPIKE_LENGTH = 0.5  # beyond the surface, as a fraction of the local radius
SPIKE_RADIUS_MM = 0.55
BACKGROUND_HU = -800.0
BACKGROUND_NOISE_HU = 30.0
NODULE_BASE_HU = -100.0
CALCIFIED_HU = 300.0
RATER_OFFSETS = (-0.3, -0.1, 0.1, 0.3)

# weights over (spiculation, margin blur, size, asphericity); sum to 1
MALIGNANCY_WEIGHTS = {"spiculation": 0.30, "margin_blur": 0.15, "size": 0.40, "asphericity": 0.15}

DEFAULT_CLASS_BALANCE = 898 / (898 + 506)


@dataclass(frozen=True)
class LabelRecord:
    attribute_ratings: tuple[float, ...]
    malignancy_rating: float
    malignancy_class: str  # "benign" | "malignant"

    @property
    def is_malignant(self) -> bool:
        return self.malignancy_class == "malignant"

    def rating_classes(self) -> tuple[int, ...]:
        """Nine integer classes 1..5 (attributes then malignancy), rounded half-up."""
        return tuple(round_half_up(r) for r in self.attribute_ratings + (self.malignancy_rating,))


class _Excluded:
    def __repr__(self) -> str:
        return "EXCLUDED"

    def __bool__(self) -> bool:
        return False


EXCLUDED = _Excluded()


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def derive_label(rater_scores: Sequence[Sequence[int]]) -> LabelRecord | _Excluded:
    """Average per-attribute rater scores into a label.

    ``rater_scores`` holds nine lists: the eight attributes in
    :data:`ATTRIBUTE_NAMES` order, then malignancy. A nodule whose mean
    malignancy is exactly 3 is excluded.
    """
    if len(rater_scores) != len(RATING_NAMES):
        raise ValueError(f"expected {len(RATING_NAMES)} rater lists, got {len(rater_scores)}")
    means = []
    for name, scores in zip(RATING_NAMES, rater_scores):
        if len(scores) == 0:
            raise ValueError(f"no rater scores for {name}")
        if any(int(s) != s or not 1 <= s <= 5 for s in scores):
            raise ValueError(f"{name} scores must be integers 1..5, got {list(scores)}")
        means.append(sum(scores) / len(scores))
    malignancy = means[-1]
    if malignancy == 3:
        return EXCLUDED
    return LabelRecord(tuple(means[:-1]), malignancy, "malignant" if malignancy > 3 else "benign")


@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    radius_mm: float
    axis_ratios: tuple[float, float, float] = (1.0, 1.0, 1.0)
    margin_blur_mm: float = 0.0
    spike_count: int = 0
    calcification_fraction: float = 0.0
    contrast_hu: float = 0.0

    def __post_init__(self):
        if self.radius_mm <= 0:
            raise ValueError("radius must be positive")
        if len(self.axis_ratios) != 3 or min(self.axis_ratios) <= 0:
            raise ValueError("axis ratios must be three positive values")
        if self.margin_blur_mm < 0 or self.spike_count < 0:
            raise ValueError("blur and spike count must be non-negative")
        if not 0 <= self.calcification_fraction <= 1:
            raise ValueError("calcification fraction must lie in [0, 1]")

    def reach_mm(self) -> float:
        r = self.radius_mm * max(self.axis_ratios)
        return r * (1 + SPIKE_LENGTH) if self.spike_count else r


def _clip01(x: float) -> float:
    return min(1.0, max(0.0, x))


def spec_features(spec: PhantomSpec) -> dict[str, float]:
    """Normalised [0, 1] descriptors that drive every rating map."""
    lo, hi = SIZE_RANGE_MM
    ratios = spec.axis_ratios
    return {
        "size": _clip01((spec.radius_mm - lo) / (hi - lo)),
        "asphericity": _clip01((1 - min(ratios) / max(ratios)) / 0.5),
        "spiculation": min(spec.spike_count, MAX_SPIKES) / MAX_SPIKES,
        "margin_blur": _clip01(spec.margin_blur_mm / MAX_BLUR_MM),
        "contrast": _clip01((spec.contrast_hu - CONTRAST_RANGE_HU[0])
                            / (CONTRAST_RANGE_HU[1] - CONTRAST_RANGE_HU[0])),
        "calcification": _clip01(spec.calcification_fraction / 0.4),
    }


def continuous_ratings(spec: PhantomSpec) -> dict[str, float]:
    f = spec_features(spec)
    malignancy = 1 + 4 * sum(w * f[k] for k, w in MALIGNANCY_WEIGHTS.items())
    return {
        "subtlety": 1 + 4 * (0.5 * f["contrast"] + 0.5 * f["size"]),
        "internal_structure": 1 + 0.3 * f["asphericity"],
        "calcification": 1 + 4 * f["calcification"],
        "sphericity": 5 - 4 * f["asphericity"],
        "margin": 5 - 4 * f["margin_blur"],
        "lobulation": 1 + 4 * _clip01(0.7 * f["asphericity"] + 0.3 * f["spiculation"]),
        "spiculation": 1 + 4 * f["spiculation"],
        "solidity": 5 - 0.3 * f["margin_blur"],
        "malignancy": min(5.0, max(1.0, malignancy)),
    }


def simulate_raters(rating: float) -> list[int]:
    return [min(5, max(1, round_half_up(rating + o))) for o in RATER_OFFSETS]


def label_for_spec(spec: PhantomSpec) -> LabelRecord | _Excluded:
    ratings = continuous_ratings(spec)
    return derive_label([simulate_raters(ratings[name]) for name in RATING_NAMES])


def max_reach_mm(patch_size: int, spacing: float = TARGET_SPACING_MM) -> float:
    return (patch_size / 2 - 1) * spacing


def sample_spec(seed: int, patch_size: int) -> PhantomSpec:
    """Draw a phantom whose descriptors share one latent "aggressiveness"."""
    rng = np.random.default_rng(seed)
    u = rng.uniform()

    def feature() -> float:
        return _clip01(u + rng.normal(0, 0.15))

    size_f, aspher, spike_f, blur_f = feature(), feature(), feature(), feature()
    lo, hi = SIZE_RANGE_MM
    spikes = int(round(spike_f * MAX_SPIKES))
    limit = max_reach_mm(patch_size) / (1 + SPIKE_LENGTH if spikes else 1)
    radius = min(lo + size_f * (hi - lo), limit)
    short = 1 - 0.5 * aspher
    ratios = [1.0, float(rng.uniform(short, 1.0)), short]
    rng.shuffle(ratios)
    calcified = rng.uniform() < 0.35 * (1 - u)
    return PhantomSpec(
        seed=int(seed),
        radius_mm=float(radius),
        axis_ratios=tuple(float(r) for r in ratios),
        margin_blur_mm=float(blur_f * MAX_BLUR_MM),
        spike_count=spikes,
        calcification_fraction=float(rng.uniform(0.1, 0.4)) if calcified else 0.0,
        contrast_hu=float(rng.uniform(*CONTRAST_RANGE_HU)),
    )


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip((points - a) @ ab / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(points - (a + t[..., None] * ab), axis=-1)


def rasterize_mask(spec: PhantomSpec, patch_size: int, spacing: float = TARGET_SPACING_MM,
                   rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Binary nodule mask and calcified-core mask on a centred ``patch_size`` grid."""
    rng = rng or np.random.default_rng(spec.seed)
    c = (patch_size - 1) / 2
    axis = (np.arange(patch_size) - c) * spacing
    pts = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)  # mm, (z, y, x)
    rot = _random_rotation(rng)
    semi = spec.radius_mm * np.asarray(spec.axis_ratios)
    local = pts @ rot
    q = ((local / semi) ** 2).sum(axis=-1)
    mask = q <= 1.0
    for _ in range(spec.spike_count):
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        surface = 1.0 / math.sqrt((((u @ rot) / semi) ** 2).sum())
        tip = u * surface * (1 + SPIKE_LENGTH)
        mask |= _segment_distance(pts, 0.5 * surface * u, tip) <= SPIKE_RADIUS_MM
    labels, _ = ndimage.label(mask, structure=ndimage.generate_binary_structure(3, 1))
    centre = labels[tuple(int(round(c)) for _ in range(3))]
    if centre:
        mask = labels == centre
    core = q <= spec.calcification_fraction ** (2 / 3) if spec.calcification_fraction > 0 else np.zeros_like(mask)
    return mask, core & mask


def generate_phantom(spec: PhantomSpec, patch_size: int, spacing: float = TARGET_SPACING_MM):
    """Return ``(HuVolume, mask, label)``; ``label`` may be :data:`EXCLUDED`."""
    if spec.reach_mm() > max_reach_mm(patch_size, spacing) + 1e-9:
        raise ValueError(f"nodule reach {spec.reach_mm():.2f} mm exceeds the {patch_size}^3 patch")
    rng = np.random.default_rng(spec.seed)
    mask, core = rasterize_mask(spec, patch_size, spacing, rng)
    interior = NODULE_BASE_HU + spec.contrast_hu
    hu = np.where(mask, interior, BACKGROUND_HU)
    hu = np.where(core, CALCIFIED_HU, hu)
    if spec.margin_blur_mm > 0:
        hu = ndimage.gaussian_filter(hu, sigma=spec.margin_blur_mm / spacing, mode="nearest")
    texture = ndimage.gaussian_filter(rng.normal(size=hu.shape), sigma=1.0)
    texture *= BACKGROUND_NOISE_HU / max(texture.std(), 1e-12)
    hu = np.clip(hu + texture, -1024.0, 3071.0)
    volume = HuVolume(hu.astype(np.float32), (spacing,) * 3)
    return volume, mask.astype(np.uint8), label_for_spec(spec)


# -- manifests ------------------------------------------------------------------

@dataclass
class ManifestRecord:
    id: str
    patch: str
    mask: str
    ratings: list
    malignancy_rating: float
    malignancy_class: str

    def to_json(self) -> str:
        d = {"id": self.id, "patch": self.patch, "mask": self.mask, "ratings": list(self.ratings),
             "malignancy_rating": self.malignancy_rating, "class": self.malignancy_class}
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> "ManifestRecord":
        d = json.loads(line)
        return cls(d["id"], d["patch"], d["mask"], list(d["ratings"]), float(d["malignancy_rating"]),
                   d["class"])

    @property
    def label(self) -> LabelRecord:
        return LabelRecord(tuple(self.ratings), self.malignancy_rating, self.malignancy_class)


def benign_count(n: int, class_balance: float) -> int:
    # guards against 0.29 * 100 == 28.999...
    return int(math.floor(n * class_balance + 1e-9))


def build_manifest(n: int, seed: int, class_balance: float = DEFAULT_CLASS_BALANCE,
                   out_dir=None, patch_size: int = 16,
                   presets: Sequence[WindowPreset] = DEFAULT_PRESETS,
                   max_attempts: int | None = None) -> list[ManifestRecord]:
    """Generate ``n`` admitted phantoms with ``floor(n * class_balance)`` benign.

    When ``out_dir`` is given, patches and masks are written there as NKVOL1
    files and the records to ``manifest.jsonl``; paths are relative to it.
    """
    if not 0 <= class_balance <= 1:
        raise ValueError("class balance must lie in [0, 1]")
    quota = {"benign": benign_count(n, class_balance)}
    quota["malignant"] = n - quota["benign"]
    rng = np.random.default_rng(seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "patches").mkdir(parents=True, exist_ok=True)
    records: list[ManifestRecord] = []
    attempts = 0
    max_attempts = max_attempts or 200 * n + 1000
    while len(records) < n:
        attempts += 1
        if attempts > max_attempts:
            raise RuntimeError(f"could not fill class quota {quota} in {max_attempts} draws")
        spec = sample_spec(int(rng.integers(2 ** 63)), patch_size)
        label = label_for_spec(spec)
        if label is EXCLUDED or quota[label.malignancy_class] == 0:
            continue
        quota[label.malignancy_class] -= 1
        rid = f"nod-{len(records):05d}"
        rec = ManifestRecord(rid, f"patches/{rid}.nkvol", f"patches/{rid}_mask.nkvol",
                             list(label.attribute_ratings), label.malignancy_rating, label.malignancy_class)
        if out is not None:
            volume, mask, _ = generate_phantom(spec, patch_size)
            iso = resample_isotropic(volume, TARGET_SPACING_MM)
            centroid = iso.extent_mm / 2
            channels = extract_patch(iso, centroid, patch_size, presets)
            mask_patch = crop_centered(mask, centroid / TARGET_SPACING_MM, patch_size, 0)
            write_patch(channels, out / rec.patch)
            write_mask(mask_patch, out / rec.mask)
        records.append(rec)
    if out is not None:
        write_manifest(records, out / "manifest.jsonl")
    return records


def write_manifest(records: Sequence[ManifestRecord], path) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records))


def read_manifest(path) -> list[ManifestRecord]:
    lines = Path(path).read_text().splitlines()
    return [ManifestRecord.from_json(line) for line in lines if line.strip()]


def spec_as_dict(spec: PhantomSpec) -> dict:
    return asdict(spec)
