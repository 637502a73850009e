"""Command-line entry point: ``nodulemtl <subcommand> [options]``.

Exit codes: 0 success, 2 usage error, 3 bad input data or files,
4 training diverged, 5 gradient check failed, 1 anything unexpected.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import formats
from .losses import LossConfig
from .model import FULL_SCALE, NetConfig, build, count_parameters, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 1, 2, 3, 4, 5

log = logging.getLogger("nodulemtl")


class UsageError(Exception):
    pass


def _tsv(rows: list[list]) -> str:
    return "\n".join("\t".join(_fmt(v) for v in row) for row in rows) + "\n"


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _net_config(args, data=None) -> NetConfig:
    patch = args.patch_size
    channels = len(args.presets)
    if data is not None:
        shape = data.patches.shape
        if args.patch_size_given and shape[-1] != patch:
            raise UsageError(f"--patch-size {patch} does not match the manifest patches ({shape[-1]})")
        patch, channels = shape[-1], shape[1]
    return NetConfig(patch_size=patch, in_channels=channels, base_filters=args.base_filters,
                     fusion_units=args.fusion_units, trade_off_lambda=args.lam, seed=args.seed)


def _metric_rows(metrics: dict) -> list[list]:
    rows = [["metric", "value"], ["dice", metrics["dice"]],
            ["malignancy_binary_accuracy", metrics["malignancy_binary_accuracy"]],
            ["malignancy_off_by_one", metrics["malignancy_off_by_one"]],
            ["mean_off_by_one", metrics["mean_off_by_one"]], ["mean_exact", metrics["mean_exact"]]]
    rows += [[f"off_by_one/{k}", v] for k, v in metrics["off_by_one"].items()]
    return rows


# -- subcommands ------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .phantom import DEFAULT_CLASS_BALANCE, build_manifest

    balance = DEFAULT_CLASS_BALANCE if args.balance is None else args.balance
    recs = build_manifest(args.n, args.seed, balance, _out_dir(args), args.patch_size, args.presets)
    benign = sum(r.malignancy_class == "benign" for r in recs)
    sys.stdout.write(_tsv([["nodules", "benign", "malignant", "manifest"],
                           [len(recs), benign, len(recs) - benign, str(Path(args.out) / "manifest.jsonl")]]))
    return EXIT_OK


def cmd_train(args) -> int:
    from .report import plot_training_curves
    from .training import evaluate, load_dataset, make_folds, train

    data = load_dataset(args.manifest)
    cfg = _net_config(args, data)
    out = _out_dir(args)
    plan = make_folds(data.malignant, args.folds, args.seed)
    if not 0 <= args.fold < plan.n_folds:
        raise UsageError(f"--fold must be in [0, {plan.n_folds})")
    res = train(data, plan.training(args.fold), plan.validation[args.fold], cfg,
                LossConfig(lam=args.lam, seg_weight=args.seg_weight), args.epochs, args.batch, args.seed,
                args.lr, args.patience, out / "metrics.jsonl", test_idx=plan.folds[args.fold],
                augment=not args.no_augment)
    save_checkpoint(res.model, out / "checkpoint.nkckpt", res.optimizer)
    metrics = evaluate(res.model, data, plan.folds[args.fold])
    (out / "test_metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    table = _tsv(_metric_rows(metrics))
    (out / "test_metrics.tsv").write_text(table)
    plot_training_curves(res.log, out / "loss_curves.png")
    sys.stdout.write(table)
    sys.stderr.write(f"best epoch {res.best_epoch}, {res.stopped}; outputs in {out}\n")
    return EXIT_DIVERGED if res.stopped.startswith("diverged") else EXIT_OK


def cmd_cv(args) -> int:
    from .report import plot_training_curves
    from .training import crossvalidate, load_dataset

    data = load_dataset(args.manifest)
    cfg = _net_config(args, data)
    out = _out_dir(args)
    res = crossvalidate(data, cfg, LossConfig(lam=args.lam, seg_weight=args.seg_weight), args.folds,
                        args.seed, args.epochs, args.batch, args.lr, args.patience, out,
                        augment=not args.no_augment)
    (out / "cv.json").write_text(json.dumps(res, indent=1, sort_keys=True) + "\n")
    keys = list(res["aggregate"])
    rows = [["fold", *keys]] + [[m["fold"], *(m[k] for k in keys)] for m in res["folds"]]
    rows.append(["mean", *(res["aggregate"][k]["mean"] for k in keys)])
    rows.append(["sem", *(res["aggregate"][k]["sem"] for k in keys)])
    table = _tsv(rows)
    (out / "cv_metrics.tsv").write_text(table)
    for k in range(args.folds):
        entries = [json.loads(line) for line in (out / f"fold{k}.jsonl").read_text().splitlines()]
        plot_training_curves(entries, out / f"fold{k}_loss_curves.png")
    sys.stdout.write(table)
    return EXIT_OK


def cmd_predict(args) -> int:
    from .phantom import read_manifest
    from .report import plot_mid_slices, predict
    from .windowing import read_mask, read_patch

    model = load_checkpoint(args.checkpoint)
    truth = None
    if args.manifest:
        if not args.id:
            raise UsageError("--manifest needs --id to select a nodule")
        root = Path(args.manifest).parent
        recs = {r.id: r for r in read_manifest(args.manifest)}
        if args.id not in recs:
            raise UsageError(f"nodule id {args.id!r} not in {args.manifest}")
        rec = recs[args.id]
        patch, mask = read_patch(root / rec.patch), read_mask(root / rec.mask)
        truth, name = rec.label.rating_classes(), rec.id
    elif args.patch:
        patch = read_patch(args.patch)
        mask = read_mask(args.mask) if args.mask else None
        name = Path(args.patch).stem
    else:
        raise UsageError("give --patch or --manifest with --id")
    rep = predict(model, patch, mask, truth, name)
    text = rep.render()
    sys.stdout.write(text)
    if args.out:
        out = _out_dir(args)
        (out / f"{name}_report.txt").write_text(text)
        (out / f"{name}_report.json").write_text(rep.to_json() + "\n")
        formats.write_volume_file(out / f"{name}_pred_mask.nkvol", rep.seg_mask.astype(np.float32), (1, 1, 1))
        plot_mid_slices(patch, rep.seg_mask, mask, out / f"{name}_slices.png", title=name)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite, summarize

    results = run_suite(seeds=args.seeds)
    sys.stdout.write("\n".join(summarize(results)) + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_GRADCHECK


def cmd_paramcount(args) -> int:
    if args.desk:
        cfg = NetConfig(patch_size=args.patch_size, in_channels=len(args.presets), base_filters=args.base_filters,
                        fusion_units=args.fusion_units)
    else:
        cfg = FULL_SCALE
    model = build(cfg)
    rows = [["group", "parameters"]]
    params = model.parameters()
    cls = set(model.classification_only_parameters())
    seg = set(model.segmentation_only_parameters())
    rows.append(["shared encoder", count_parameters([p for n, p in params.items() if n not in cls | seg])])
    rows.append(["segmentation only", count_parameters([params[n] for n in seg])])
    rows.append(["classification only", count_parameters([params[n] for n in cls])])
    rows.append(["total", count_parameters(model)])
    sys.stdout.write(f"# config {json.dumps(cfg.to_dict(), sort_keys=True)}\n" + _tsv(rows))
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------

def _presets(text: str):
    from .windowing import parse_presets

    try:
        return parse_presets(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


class _PatchSize(argparse.Action):
    def __call__(self, parser, namespace, values, option_string=None):
        setattr(namespace, self.dest, values)
        namespace.patch_size_given = True


def build_parser() -> argparse.ArgumentParser:
    from .windowing import DEFAULT_PRESETS

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--patch-size", type=int, default=16, action=_PatchSize)
    common.add_argument("--presets", type=_presets, default=DEFAULT_PRESETS, help='"ww/wc[,ww/wc]"')
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    net = argparse.ArgumentParser(add_help=False)
    net.add_argument("--base-filters", type=int, default=8)
    net.add_argument("--fusion-units", type=int, default=64)

    fit = argparse.ArgumentParser(add_help=False)
    fit.add_argument("--manifest", required=True)
    fit.add_argument("--lambda", dest="lam", type=float, default=1.0)
    fit.add_argument("--seg-weight", type=float, default=1.0)
    fit.add_argument("--lr", type=float, default=1e-3)
    fit.add_argument("--epochs", type=int, default=30)
    fit.add_argument("--batch", type=int, default=8)
    fit.add_argument("--patience", type=int, default=10)
    fit.add_argument("--folds", type=int, default=5)
    fit.add_argument("--no-augment", action="store_true", help="disable random flips")

    p = argparse.ArgumentParser(prog="nodulemtl", description=__doc__.splitlines()[0])
    p.set_defaults(patch_size_given=False)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a phantom manifest")
    g.add_argument("--n", type=int, default=1404)
    g.add_argument("--balance", type=float, default=None, help="benign fraction")
    g.set_defaults(func=cmd_gen_data, out_required=True)

    t = sub.add_parser("train", parents=[common, net, fit], help="train on one fold and test on it")
    t.add_argument("--fold", type=int, default=0)
    t.set_defaults(func=cmd_train, out_required=True)

    c = sub.add_parser("cv", parents=[common, net, fit], help="k-fold cross-validation")
    c.set_defaults(func=cmd_cv, out_required=True)

    r = sub.add_parser("predict", parents=[common], help="evidence report for one nodule")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--patch")
    r.add_argument("--mask")
    r.add_argument("--manifest")
    r.add_argument("--id")
    r.set_defaults(func=cmd_predict, out_required=False)

    k = sub.add_parser("gradcheck", parents=[common], help="finite-difference suite")
    k.add_argument("--seeds", type=int, default=10)
    k.set_defaults(func=cmd_gradcheck, out_required=False)

    n = sub.add_parser("paramcount", parents=[common, net], help="trainable parameter count")
    n.add_argument("--desk", action="store_true", help="count the desk config instead of full scale")
    n.set_defaults(func=cmd_paramcount, out_required=False)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.out_required and not args.out:
        sys.stderr.write(f"error: {args.command} needs --out\n")
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except (OSError, ValueError, formats.FormatError) as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return EXIT_DATA
    except FloatingPointError as exc:
        sys.stderr.write(f"diverged: {exc}\n")
        return EXIT_DIVERGED
    except Exception as exc:  # noqa: BLE001 - report category, keep traceback under -v
        log.info("internal failure", exc_info=True)
        sys.stderr.write(f"internal error: {type(exc).__name__}: {exc}\n")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
