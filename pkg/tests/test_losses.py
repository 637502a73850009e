import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nodulemtl.autodiff import Tensor, precision
from nodulemtl.losses import (LossConfig, categorical_cross_entropy, dice_coefficient, dice_loss, multitask_loss,
                              off_by_one_accuracy, recompose, sem)

EPS = 1e-5


@pytest.fixture(autouse=True)
def float64():
    with precision(64):
        yield


class TestDiceLoss:
    def test_unit_vector_example(self):
        got = dice_loss(Tensor([1.0, 0.0]), Tensor([1.0, 1.0]), EPS).item()
        assert abs(got - (1 - (2 + EPS) / (3 + EPS))) < 1e-9

    def test_identical_binary_is_zero(self):
        g = Tensor((np.random.default_rng(0).uniform(size=(2, 1, 4, 4, 4)) > 0.5).astype(float))
        assert dice_loss(g, g).item() == 0.0

    def test_empty_prediction_and_mask(self):
        z = Tensor(np.zeros(8))
        assert dice_loss(z, z).item() == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_bounded(self, seed):
        rng = np.random.default_rng(seed)
        p, g = rng.uniform(size=27), (rng.uniform(size=27) > 0.5).astype(float)
        assert 0 <= dice_loss(Tensor(p), Tensor(g)).item() <= 1


class TestCrossEntropy:
    def test_uniform_logits(self):
        ce = categorical_cross_entropy(Tensor(np.zeros((3, 5))), [0, 2, 4]).item()
        assert ce == pytest.approx(math.log(5), abs=1e-12)
        assert round(ce, 5) == 1.60944

    def test_confident_correct_is_small(self):
        z = np.full((2, 5), -20.0)
        z[0, 1] = z[1, 3] = 20.0
        assert categorical_cross_entropy(Tensor(z), [1, 3]).item() < 1e-12

    def test_target_range(self):
        with pytest.raises(ValueError):
            categorical_cross_entropy(Tensor(np.zeros((1, 5))), [5])


class TestMultitask:
    def make(self, seed=0):
        rng = np.random.default_rng(seed)
        return (Tensor(rng.uniform(size=(2, 1, 4, 4, 4))), Tensor((rng.uniform(size=(2, 1, 4, 4, 4)) > .5) * 1.),
                Tensor(rng.normal(size=(2, 9, 5))), rng.integers(1, 6, size=(2, 9)),
                Tensor(rng.normal(size=(2, 5))), rng.integers(1, 6, size=2))

    @pytest.mark.parametrize("lam,w", [(1.0, 1.0), (0.3, 1.0), (2.0, 0.5), (0.0, 1.0), (1.0, 0.0)])
    def test_recomposition(self, lam, w):
        cfg = LossConfig(lam=lam, seg_weight=w)
        total, b = multitask_loss(*self.make(), cfg=cfg)
        assert abs(b["total"] - recompose(b, cfg)) < 1e-12
        assert total.item() == b["total"]

    def test_zero_weights_leave_terms_out(self):
        _, b = multitask_loss(*self.make(), cfg=LossConfig(lam=0.0))
        assert set(b) == {"dice", "total"}
        _, b = multitask_loss(*self.make(), cfg=LossConfig(seg_weight=0.0))
        assert "dice" not in b
        with pytest.raises(ValueError):
            multitask_loss(*self.make(), cfg=LossConfig(lam=0, seg_weight=0))


class TestMetrics:
    def test_off_by_one_examples(self):
        assert off_by_one_accuracy([3], [4]) == 1.0
        assert off_by_one_accuracy([1], [3]) == 0.0
        assert off_by_one_accuracy([1, 2, 5, 5], [2, 4, 5, 3]) == 0.5

    def test_sem_examples(self):
        assert sem([0.0, 2.0]) == 1.0
        assert sem([0.7]) == 0.0
        with pytest.raises(ValueError):
            sem([])

    def test_dice_coefficient_thresholds(self):
        pred = np.array([0.9, 0.6, 0.4, 0.1])
        truth = np.array([1, 1, 1, 0])
        assert dice_coefficient(pred, truth, epsilon=0) == pytest.approx(0.8)
        assert dice_coefficient(truth, truth) == 1.0


class TestSpecExamplesAndProperties:
    def test_spec_off_by_one_examples(self):
        assert off_by_one_accuracy([4], [5]) == 1.0
        assert off_by_one_accuracy([2], [4]) == 0.0
        assert off_by_one_accuracy([3, 3], [3, 5]) == 0.5

    def test_perfect_everything_is_near_zero(self):
        rng = np.random.default_rng(3)
        mask = (rng.uniform(size=(2, 1, 4, 4, 4)) > 0.5).astype(float)
        attr_t = rng.integers(1, 6, size=(2, 9))
        mal_t = rng.integers(1, 6, size=2)
        attr = np.full((2, 9, 5), -30.0)
        np.put_along_axis(attr, (attr_t - 1)[..., None], 30.0, axis=-1)
        mal = np.full((2, 5), -30.0)
        mal[np.arange(2), mal_t - 1] = 30.0
        _, b = multitask_loss(Tensor(mask), Tensor(mask), Tensor(attr), attr_t, Tensor(mal), mal_t)
        assert b["total"] < 1e-12

    def test_lambda_zero_equals_dice(self):
        seg, mask, attr, at, mal, mt = TestMultitask().make(4)
        total, _ = multitask_loss(seg, mask, attr, at, mal, mt, LossConfig(lam=0.0))
        assert total.item() == dice_loss(seg, mask).item()

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10 ** 6), st.floats(-50, 50))
    def test_ce_shift_invariance_and_oracle(self, seed, shift):
        rng = np.random.default_rng(seed)
        z = rng.normal(scale=3, size=(4, 5))
        t = rng.integers(0, 5, size=4)
        base = categorical_cross_entropy(Tensor(z), t).item()
        assert abs(categorical_cross_entropy(Tensor(z + shift), t).item() - base) < 1e-9
        probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        assert abs(base - np.mean(-np.log(probs[np.arange(4), t]))) < 1e-9

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_dice_symmetric_for_binary_and_monotone(self, seed):
        rng = np.random.default_rng(seed)
        p = (rng.uniform(size=20) > 0.5).astype(float)
        g = (rng.uniform(size=20) > 0.5).astype(float)
        assert abs(dice_loss(Tensor(p), Tensor(g)).item() - dice_loss(Tensor(g), Tensor(p)).item()) < 1e-15
        # raising overlap with both squared sums fixed lowers the loss
        a, b = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        assert dice_loss(Tensor(a), Tensor(a)).item() < dice_loss(Tensor(a), Tensor(b)).item()

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(1, 5), min_size=1, max_size=30), st.integers(0, 10 ** 6))
    def test_off_by_one_dominates_exact(self, truth, seed):
        from nodulemtl.losses import exact_accuracy
        pred = np.random.default_rng(seed).integers(1, 6, size=len(truth))
        assert off_by_one_accuracy(pred, truth) >= exact_accuracy(pred, truth)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=40))
    def test_sem_two_pass_oracle(self, xs):
        mu = sum(xs) / len(xs)
        sd = math.sqrt(sum((x - mu) ** 2 for x in xs) / (len(xs) - 1))
        assert sem(xs) == pytest.approx(sd / math.sqrt(len(xs)), rel=1e-9, abs=1e-9)
        assert sem([xs[0]] * len(xs)) == 0.0
