import math

import numpy as np
import pytest
from scipy import ndimage

from nodulemtl import phantom as P
from nodulemtl.phantom import EXCLUDED, PhantomSpec, derive_label

NEUTRAL = [[3]] * 8


class TestDeriveLabel:
    def test_mean_three_excluded(self):
        assert derive_label(NEUTRAL + [[3, 3, 3]]) is EXCLUDED

    def test_malignant_mean(self):
        rec = derive_label(NEUTRAL + [[5, 5, 4, 4]])
        assert rec.malignancy_rating == 4.5 and rec.malignancy_class == "malignant"

    def test_benign_mean(self):
        rec = derive_label(NEUTRAL + [[1, 2]])
        assert rec.malignancy_rating == 1.5 and rec.malignancy_class == "benign"

    def test_attribute_means(self):
        rec = derive_label([[1, 2], [5], [3, 4, 5], [1], [2], [2, 2], [4, 5], [5]] + [[4]])
        assert rec.attribute_ratings == (1.5, 5, 4, 1, 2, 2, 4.5, 5)

    def test_rounding_half_up(self):
        rec = derive_label([[2, 3]] + [[1]] * 7 + [[4, 5]])
        assert rec.rating_classes() == (3, 1, 1, 1, 1, 1, 1, 1, 5)

    def test_errors(self):
        with pytest.raises(ValueError, match="no rater"):
            derive_label(NEUTRAL + [[]])
        with pytest.raises(ValueError):
            derive_label(NEUTRAL + [[6]])
        with pytest.raises(ValueError):
            derive_label([[1]])


class TestGeneratePhantom:
    def test_perfect_sphere_extremes(self):
        spec = PhantomSpec(seed=1, radius_mm=2.0)
        vol, mask, label = P.generate_phantom(spec, 16)
        ratings = dict(zip(P.ATTRIBUTE_NAMES, label.attribute_ratings))
        assert ratings["sphericity"] == 5 and ratings["spiculation"] == 1
        assert ratings["margin"] == 5
        c = (16 - 1) / 2
        z, y, x = np.indices(mask.shape)
        r_vox = 2.0 / 0.6
        sphere = ((z - c) ** 2 + (y - c) ** 2 + (x - c) ** 2) * 0.36 <= 4.0
        assert np.array_equal(mask.astype(bool), sphere)
        assert r_vox > 0

    def test_deterministic(self):
        spec = P.sample_spec(42, 16)
        a = P.generate_phantom(spec, 16)
        b = P.generate_phantom(spec, 16)
        assert a[0].voxels.tobytes() == b[0].voxels.tobytes()
        assert a[1].tobytes() == b[1].tobytes() and a[2] == b[2]

    @pytest.mark.parametrize("ratios", [(1, 1, 1), (1, 0.8, 0.6), (0.7, 1, 0.9)])
    def test_mask_volume_matches_ellipsoid(self, ratios):
        spec = PhantomSpec(seed=3, radius_mm=5.0, axis_ratios=ratios)
        _, mask, _ = P.generate_phantom(spec, 64)
        a, b, c = ratios
        analytic = 4 * math.pi * a * b * c * (5.0 / 0.6) ** 3 / 3
        assert abs(mask.sum() - analytic) / analytic < 0.05

    def test_hu_levels(self):
        spec = PhantomSpec(seed=0, radius_mm=2.5, contrast_hu=50.0, calcification_fraction=0.3)
        vol, mask, _ = P.generate_phantom(spec, 16)
        assert np.median(vol.voxels[mask == 0]) == pytest.approx(-800, abs=30)
        assert vol.voxels.max() > 150  # calcified core
        assert vol.spacing_mm == (0.6, 0.6, 0.6)

    def test_nodule_exceeding_patch_rejected(self):
        with pytest.raises(ValueError, match="exceeds"):
            P.generate_phantom(PhantomSpec(seed=0, radius_mm=5.0), 16)

    @pytest.mark.parametrize("seed", range(25))
    def test_single_six_connected_component(self, seed):
        spec = P.sample_spec(seed, 16)
        _, mask, _ = P.generate_phantom(spec, 16)
        _, n = ndimage.label(mask, structure=ndimage.generate_binary_structure(3, 1))
        assert n == 1


class TestRatingMaps:
    def base(self, **kw):
        args = dict(seed=0, radius_mm=2.0)
        args.update(kw)
        return PhantomSpec(**args)

    def _monotone(self, key, specs, increasing):
        vals = [P.continuous_ratings(s)[key] for s in specs]
        pairs = zip(vals, vals[1:])
        assert all((b >= a) if increasing else (b <= a) for a, b in pairs), vals

    def test_sphericity_falls_with_elongation(self):
        self._monotone("sphericity", [self.base(axis_ratios=(1, 1, r)) for r in np.linspace(1, 0.4, 8)], False)

    def test_margin_falls_with_blur(self):
        self._monotone("margin", [self.base(margin_blur_mm=b) for b in np.linspace(0, 1.5, 8)], False)

    def test_spiculation_rises_with_spikes(self):
        self._monotone("spiculation", [self.base(spike_count=k) for k in range(10)], True)

    def test_malignancy_monotone_in_drivers(self):
        self._monotone("malignancy", [self.base(radius_mm=r) for r in np.linspace(1.2, 3.0, 8)], True)
        self._monotone("malignancy", [self.base(spike_count=k) for k in range(10)], True)
        self._monotone("malignancy", [self.base(margin_blur_mm=b) for b in np.linspace(0, 1.5, 8)], True)

    def test_weights_sum_to_one(self):
        assert math.isclose(sum(P.MALIGNANCY_WEIGHTS.values()), 1.0)


class TestManifest:
    def test_empty(self, tmp_path):
        assert P.build_manifest(0, 1, out_dir=tmp_path) == []
        assert (tmp_path / "manifest.jsonl").read_text() == ""

    def test_balance_floor(self):
        recs = P.build_manifest(100, 3, class_balance=0.64)
        assert sum(r.malignancy_class == "benign" for r in recs) == 64

    def test_never_contains_excluded(self):
        recs = P.build_manifest(200, 5)
        assert all(r.malignancy_rating != 3 for r in recs)
        assert all((r.malignancy_class == "malignant") == (r.malignancy_rating > 3) for r in recs)

    def test_same_seed_same_bytes(self, tmp_path):
        P.build_manifest(12, 9, out_dir=tmp_path / "a")
        P.build_manifest(12, 9, out_dir=tmp_path / "b")
        for f in sorted((tmp_path / "a").rglob("*")):
            if f.is_file():
                assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()

    def test_record_fields_and_files(self, tmp_path):
        recs = P.build_manifest(3, 2, out_dir=tmp_path)
        import json
        line = json.loads((tmp_path / "manifest.jsonl").read_text().splitlines()[0])
        assert list(line) == ["id", "patch", "mask", "ratings", "malignancy_rating", "class"]
        assert len(line["ratings"]) == 8
        assert P.read_manifest(tmp_path / "manifest.jsonl") == recs
        assert (tmp_path / recs[0].patch).exists() and (tmp_path / recs[0].mask).exists()

    def test_default_manifest_headline(self):
        assert P.benign_count(1404, P.DEFAULT_CLASS_BALANCE) == 898
