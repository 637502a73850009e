"""Finite-difference verification of every differentiable layer and loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers as L
from .autodiff import Graph, Tensor, finite_diff_check, precision, tsum
from .losses import categorical_cross_entropy, dice_loss


@dataclass
class CaseResult:
    op: str
    wrt: str
    seed: int
    max_rel_error: float
    excluded: int
    passed: bool


class _Projection:
    """Fixed random weights reducing an output to a scalar, drawn on first use."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.weights: Tensor | None = None

    def __call__(self, out: Tensor) -> Tensor:
        if self.weights is None:
            self.weights = Tensor(self.rng.normal(size=out.shape))
        return tsum(out * self.weights)


def _cases(rng: np.random.Generator) -> list[tuple[str, Callable, dict[str, Tensor]]]:
    def t(*shape, lo=None, hi=None):
        if lo is not None:
            return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)
        return Tensor(rng.normal(size=shape), requires_grad=True)

    rm, rv = np.zeros(2), np.ones(2)
    targets = rng.integers(0, 5, size=4)
    mask = Tensor((rng.uniform(size=(1, 1, 3, 3, 3)) > 0.5).astype(np.float64))
    proj = [_Projection(int(rng.integers(2 ** 32))) for _ in range(13)]

    return [
        ("conv3d", lambda x, w, b: proj[0](L.conv3d(x, w, b)),
         {"x": t(2, 2, 3, 3, 3), "w": t(2, 2, 3, 3, 3), "b": t(2)}),
        ("conv3d_1x1", lambda x, w, b: proj[1](L.conv3d(x, w, b)),
         {"x": t(2, 3, 2, 2, 2), "w": t(2, 3, 1, 1, 1), "b": t(2)}),
        ("batchnorm_train", lambda x, g, b: proj[2](L.batchnorm(x, g, b, rm, rv, True)),
         {"x": t(3, 2, 2, 2, 2), "g": t(2), "b": t(2)}),
        ("batchnorm_infer", lambda x, g, b: proj[3](L.batchnorm(x, g, b, rm + 0.3, rv + 0.5, False)),
         {"x": t(2, 2, 2, 2, 2), "g": t(2), "b": t(2)}),
        ("elu", lambda x: proj[4](L.elu(x)), {"x": t(2, 2, 2, 2, 2)}),
        ("maxpool3d", lambda x: proj[5](L.maxpool3d(x)), {"x": t(1, 2, 4, 4, 2)}),
        ("uppool3d", lambda x: proj[6](L.uppool3d(x)), {"x": t(1, 2, 2, 1, 2)}),
        ("dense", lambda x, w, b: proj[7](L.dense(x, w, b)),
         {"x": t(3, 4), "w": t(2, 4), "b": t(2)}),
        ("softmax", lambda x: proj[8](L.softmax(x)), {"x": t(3, 5)}),
        ("log_softmax", lambda x: proj[12](L.log_softmax(x)), {"x": t(3, 5)}),
        ("sigmoid", lambda x: proj[9](L.sigmoid(x)), {"x": t(2, 1, 2, 2, 2)}),
        ("concat_channels", lambda a, b: proj[10](L.concat_channels(a, b)),
         {"a": t(1, 2, 2, 2, 2), "b": t(1, 1, 2, 2, 2)}),
        ("global_avg_pool", lambda x: proj[11](L.global_avg_pool(x)), {"x": t(2, 3, 2, 2, 2)}),
        ("dice_loss", lambda p: dice_loss(p, mask), {"p": t(1, 1, 3, 3, 3, lo=0.05, hi=0.95)}),
        ("cross_entropy", lambda z: categorical_cross_entropy(z, targets), {"z": t(4, 5)}),
    ]


def run_suite(seeds: int = 10, step: float = 1e-5, tolerance: float = 1e-4) -> list[CaseResult]:
    """Check every case against central differences for ``seeds`` random draws."""
    results = []
    with precision(64):
        for seed in range(seeds):
            rng = np.random.default_rng(seed)
            for op, fn, inputs in _cases(rng):
                graph = Graph(fn, name=op)
                for wrt in inputs:
                    rep = finite_diff_check(graph, inputs, wrt, step=step, tolerance=tolerance)
                    results.append(CaseResult(op, wrt, seed, rep.max_rel_error, rep.n_excluded, rep.passed))
    return results


def summarize(results: list[CaseResult]) -> list[str]:
    lines = []
    for op in dict.fromkeys(r.op for r in results):
        rs = [r for r in results if r.op == op]
        worst = max(r.max_rel_error for r in rs)
        ok = all(r.passed for r in rs)
        lines.append(f"{'PASS' if ok else 'FAIL'}  {op:<16} max rel err {worst:.2e} "
                     f"over {len(rs)} checks, {sum(r.excluded for r in rs)} excluded")
    return lines
