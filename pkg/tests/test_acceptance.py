"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest -s tests/test_acceptance.py`` to see the lines
interleaved with progress; they are also printed by the full suite.
"""
import time

import numpy as np
import pytest

from nodulemtl import cli, formats
from nodulemtl.autodiff import Tensor, precision
from nodulemtl.gradcheck import run_suite, summarize
from nodulemtl.losses import LossConfig, dice_loss, multitask_loss
from nodulemtl.model import FULL_SCALE, NetConfig, build, count_parameters, save_checkpoint
from nodulemtl.optim import Adam
from nodulemtl.phantom import build_manifest
from nodulemtl.training import evaluate, load_dataset, make_folds, train, train_step
from nodulemtl.windowing import DEFAULT_PRESETS, WindowPreset, window_transform

E2E_NODULES = 300
E2E_SEEDS = (0, 1, 2)


@pytest.fixture
def verdict(capsys):
    """Print one criterion line outside pytest's capture, then assert."""
    def emit(number: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return emit


def test_criterion_1_gradient_suite(verdict):
    t = time.perf_counter()
    results = run_suite(seeds=10, step=1e-5, tolerance=1e-4)
    elapsed = time.perf_counter() - t
    worst = max(r.max_rel_error for r in results)
    ops = sorted({r.op for r in results})
    ok = all(r.passed for r in results) and elapsed < 120 and len({r.seed for r in results}) == 10
    verdict(1, ok, f"{len(results)} checks over {len(ops)} ops x 10 seeds, max rel err {worst:.2e}, "
                   f"{elapsed:.1f}s\n  " + "\n  ".join(summarize(results)))


def test_criterion_2_dice_unit_vector(verdict):
    eps = 1e-5
    with precision(64):
        got = dice_loss(Tensor([1.0, 0.0]), Tensor([1.0, 1.0]), eps).item()
        same = dice_loss(Tensor([1.0, 0.0, 1.0]), Tensor([1.0, 0.0, 1.0]), eps).item()
    want = 1 - (2 + eps) / (3 + eps)
    verdict(2, abs(got - want) < 1e-9 and same == 0.0, f"L={got!r} expected {want!r}; p==g gives {same!r}")


def test_criterion_3_windowing(verdict):
    wide, narrow = WindowPreset(1600, -600), WindowPreset(700, -600)
    vals = (window_transform(-600, wide), window_transform(200, wide), window_transform(-950, narrow))
    ok = vals == (0.5, 1.0, 0.0) and DEFAULT_PRESETS == (wide, narrow)
    verdict(3, ok, f"examples {vals}; defaults {[(p.width, p.center) for p in DEFAULT_PRESETS]}")


def test_criterion_4_parameter_count(verdict, capsys):
    n = count_parameters(build(FULL_SCALE))
    capsys.readouterr()
    rc = cli.main(["paramcount"])
    printed = int(capsys.readouterr().out.strip().splitlines()[-1].split("\t")[1])
    verdict(4, 1.2e6 <= n <= 1.8e6 and rc == 0 and printed == n,
            f"full-scale config {n:,} trainable parameters (paramcount printed {printed:,})")


def test_criterion_5_overfit(verdict, tmp_path):
    build_manifest(4, 21, out_dir=tmp_path)
    data = load_dataset(tmp_path / "manifest.jsonl")
    model = build(NetConfig(patch_size=16))
    opt = Adam(model.parameters(), lr=1e-3)
    batch = np.arange(4)
    t = time.perf_counter()
    for _ in range(200):
        last = train_step(model, opt, data, batch, LossConfig(lam=1.0))
    elapsed = time.perf_counter() - t
    verdict(5, last["total"] < 0.05 and elapsed < 300,
            f"loss after 200 steps {last['total']:.4f} (dice {last['dice']:.4f}), {elapsed:.0f}s")


@pytest.fixture(scope="module")
def e2e_split(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    build_manifest(E2E_NODULES, 7, out_dir=root)
    data = load_dataset(root / "manifest.jsonl")
    plan = make_folds(data.malignant, 5, seed=0)
    return data, plan.training(0), plan.validation[0], plan.folds[0]


def _fit(split, lam: float, seed: int):
    data, tr, va, te = split
    t = time.perf_counter()
    res = train(data, tr, va, NetConfig(patch_size=16, in_channels=2, seed=seed), LossConfig(lam=lam),
                epochs=30, batch_size=8, seed=seed)
    return evaluate(res.model, data, te), time.perf_counter() - t


def test_criterion_6_end_to_end(verdict, e2e_split):
    data, tr, va, te = e2e_split
    runs = {(lam, s): _fit(e2e_split, lam, s) for s in E2E_SEEDS for lam in (1.0, 0.0)}
    (main, elapsed) = runs[(1.0, E2E_SEEDS[0])]
    thresholds = (main["dice"] >= 0.80 and main["malignancy_binary_accuracy"] >= 0.90
                  and main["mean_off_by_one"] >= 0.85 and elapsed < 1800)
    ordering = [(s, runs[(1.0, s)][0]["dice"], runs[(0.0, s)][0]["dice"]) for s in E2E_SEEDS]
    ordered = all(mt >= so for _, mt, so in ordering)
    detail = (f"{len(tr)}/{len(va)}/{len(te)} train/val/test; multi-task seed {E2E_SEEDS[0]}: "
              f"dice {main['dice']:.4f}, malignancy binary {main['malignancy_binary_accuracy']:.4f}, "
              f"mean off-by-one {main['mean_off_by_one']:.4f}, {elapsed:.0f}s; thresholds "
              f"{'met' if thresholds else 'NOT met'}\n  multi-task vs segmentation-only dice: "
              + ", ".join(f"seed {s} {mt:.4f} vs {so:.4f}" for s, mt, so in ordering)
              + f"; ordering {'holds' if ordered else 'does NOT hold'}")
    verdict(6, thresholds and ordered, detail)


def _grads(cfg: LossConfig, mask_seed: int):
    model = build(NetConfig(seed=1)).train()
    rng = np.random.default_rng(0)
    out = model(Tensor(rng.uniform(size=(2, 2, 16, 16, 16))))
    mask = (np.random.default_rng(mask_seed).uniform(size=(2, 1, 16, 16, 16)) > 0.6).astype(np.float32)
    total, parts = multitask_loss(out["seg_prob"], Tensor(mask), out["attribute_logits"],
                                  rng.integers(1, 6, (2, 9)), out["malignancy_logits"], rng.integers(1, 6, 2), cfg)
    total.backward()
    grads = {k: (np.zeros(p.shape) if p.grad is None else p.grad.copy()) for k, p in model.parameters().items()}
    return model, grads, parts


def test_criterion_7_ablation_switches(verdict):
    model, grads, parts = _grads(LossConfig(lam=0.0), 0)
    cls = model.classification_only_parameters()
    seg_only = all(not np.any(grads[n]) for n in cls) and "attribute_ce" not in parts
    # with the segmentation weight at zero the mask target cannot influence any gradient
    _, ga, pa = _grads(LossConfig(seg_weight=0.0), 0)
    _, gb, _ = _grads(LossConfig(seg_weight=0.0), 1)
    cls_only = all(np.array_equal(ga[k], gb[k]) for k in ga) and "dice" not in pa
    reaches = any(np.any(ga[n]) for n in model.segmentation_only_parameters())
    verdict(7, seg_only and cls_only and reaches,
            f"lambda=0: {len(cls)} classification-only tensors have zero grad ({seg_only}); "
            f"seg weight 0: grads independent of the mask ({cls_only}), decoder still trained through "
            f"the sub-net ({reaches})")


def test_criterion_8_determinism(verdict, tmp_path):
    cfg = NetConfig(base_filters=4, subnet_filters=(4, 4, 8, 8), fusion_units=16)
    digests = []
    for tag in "ab":
        out = tmp_path / tag
        build_manifest(20, 13, out_dir=out)
        data = load_dataset(out / "manifest.jsonl")
        plan = make_folds(data.malignant, 5, 0)
        res = train(data, plan.training(0), plan.validation[0], cfg, epochs=2, batch_size=4, seed=3,
                    log_path=out / "log.jsonl", test_idx=plan.folds[0])
        save_checkpoint(res.model, out / "model.nkckpt", res.optimizer)
        digests.append({p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    same = digests[0] == digests[1]
    verdict(8, same, f"{len(digests[0])} files (manifest, patches, masks, log, checkpoint) byte-identical: {same}")


def test_criterion_9_format_round_trips(verdict):
    rng = np.random.default_rng(2024)
    bad = 0
    for i in range(1000):
        shape = tuple(int(x) for x in rng.integers(1, 9, size=3))
        vox = rng.normal(scale=rng.uniform(1, 2000), size=shape).astype(np.float32)
        buf = formats.encode_volume(vox, rng.uniform(0.05, 5.0, size=3))
        if formats.encode_volume(*formats.decode_volume(buf)) != buf:
            bad += 1
        tensors = {}
        for j in range(int(rng.integers(0, 6))):
            ndim = int(rng.integers(0, 5))
            tensors[f"layer{j}/{'w' if j % 2 else 'b'}{i}"] = rng.normal(size=tuple(rng.integers(1, 5, ndim)))
        ck = formats.Checkpoint({"case": i, "lr": float(rng.uniform()), "tags": ["x"] * int(rng.integers(3))},
                                tensors, int(rng.integers(0, 2 ** 62)))
        cbuf = formats.encode_checkpoint(ck)
        if formats.encode_checkpoint(formats.decode_checkpoint(cbuf)) != cbuf:
            bad += 1
    verdict(9, bad == 0, f"1000 fuzzed NKVOL1 + 1000 fuzzed NKCKPT1 instances, {bad} byte mismatches")
