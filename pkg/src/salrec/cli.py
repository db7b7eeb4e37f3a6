"""Command-line interface.

Subcommands cover single stages (saliency, extract, codebook, encode),
model training and evaluation, and full experiments and sweeps. Exit
codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from .classify import MklModel, chi2_kernel_matrix, combine_kernels, predict, save_model, load_model, train_svm
from .core import load_image, resize_to_height, scan_dataset, to_luminance
from .encoding import load_codebook, save_codebook, save_spm_vector, spm_encode, train_codebook
from .errors import ConfigError, DataError, SalrecError
from .features import (
    PruneSpec,
    attach_saliency,
    dense_sift,
    prune_top_fraction,
    read_descriptor_records,
    save_descriptors,
    split_by_threshold,
)
from .pipeline import ExperimentConfig, build_config, emit_plot_data, emit_results_csv, load_config_file, run_experiment
from .saliency import SaliencyMap, compute_saliency


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we map usage errors to 1
        raise _UsageError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--dataset", help="dataset root: one subdirectory per class")
    p.add_argument("--model", help="saliency model: itti | gauss | external:<dir>")
    p.add_argument("--mode", help="baseline | prune | weight | split_mkl")
    p.add_argument("--keep", type=float, help="fraction of descriptors kept in prune mode")
    p.add_argument("--threshold", type=float, help="saliency threshold for split mode")
    p.add_argument("--ntrain", help="training images per class (comma list)")
    p.add_argument("--reps", type=int, help="number of split repetitions")
    p.add_argument("--seed", type=int, help="base random seed")
    p.add_argument("--out", help="output path")
    p.add_argument("--cache", help="artifact cache directory")
    p.add_argument("--jobs", type=int, help="worker processes for per-image stages")
    p.add_argument("--codewords", type=int, help="codebook size")
    p.add_argument("--restarts", type=int, help="k-means restarts")
    p.add_argument("--levels", type=int, help="pyramid levels")
    p.add_argument("--step", type=int, help="dense grid step in pixels")
    p.add_argument("--scales", help="descriptor bin sizes (comma list)")
    p.add_argument("--height", type=int, help="common image height")
    p.add_argument("--svm-c", type=float, dest="svm_c", help="SVM regularization C")
    p.add_argument("--per-class-mean", action="store_true", default=None,
                   help="report the mean of per-class accuracies")
    p.add_argument("--no-timing", action="store_true", default=None,
                   help="record 0.0 seconds for reproducible output")


def _overrides_from_args(args: argparse.Namespace) -> dict:
    over: dict = {}
    mapping = {
        "dataset": "dataset",
        "model": "model",
        "mode": "mode",
        "keep": "keep",
        "threshold": "threshold",
        "reps": "reps",
        "seed": "seed",
        "cache": "cache",
        "jobs": "jobs",
        "codewords": "codewords",
        "restarts": "restarts",
        "levels": "levels",
        "step": "step",
        "height": "height",
        "svm_c": "svm_c",
    }
    for attr, key in mapping.items():
        val = getattr(args, attr, None)
        if val is not None:
            over[key] = val
    if getattr(args, "ntrain", None):
        over["ntrain"] = tuple(int(v) for v in args.ntrain.split(","))
    if getattr(args, "scales", None):
        over["scales"] = tuple(int(v) for v in args.scales.split(","))
    if getattr(args, "per_class_mean", None):
        over["per_class_mean"] = True
    if getattr(args, "no_timing", None):
        over["timing"] = False
    return over


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    file_values = load_config_file(args.config) if getattr(args, "config", None) else None
    try:
        return build_config(file_values, _overrides_from_args(args))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _save_map_png(smap: SaliencyMap, path: Path) -> None:
    eight_bit = np.round(smap.values * 255.0).astype(np.uint8)
    Image.fromarray(eight_bit, mode="L").save(path)


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_saliency(args) -> int:
    model = args.model or "gauss"
    height = args.height or 480
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    for image_path in args.images:
        img = resize_to_height(load_image(image_path), height)
        smap = compute_saliency(model, img, image_path=image_path)
        target = out_dir / (Path(image_path).stem + ".png")
        _save_map_png(smap, target)
        print(f"{image_path} -> {target}")
    return 0


def _cmd_extract(args) -> int:
    height = args.height or 480
    step = args.step or 2
    scales = tuple(int(v) for v in (args.scales or "4,6,8,10").split(","))
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    for image_path in args.images:
        img = resize_to_height(load_image(image_path), height)
        dset = dense_sift(to_luminance(img), step=step, scales=scales)
        if args.model:
            smap = compute_saliency(args.model, img, image_path=image_path)
            dset = attach_saliency(dset, smap)
        target = out_dir / (Path(image_path).stem + ".dset")
        save_descriptors(dset, target)
        print(f"{image_path}: {len(dset)} descriptors -> {target}")
    return 0


def _cmd_codebook(args) -> int:
    if not args.out:
        raise _UsageError("codebook requires --out <file>")
    parts = []
    for dump in args.dumps:
        records = read_descriptor_records(dump)
        parts.append(records[:, 4:].astype(np.float64))
    if not parts:
        raise _UsageError("codebook requires at least one descriptor dump")
    sample = np.concatenate(parts)
    cb = train_codebook(
        sample,
        m=args.codewords or 600,
        restarts=args.restarts or 5,
        seed=args.seed or 0,
    )
    save_codebook(cb, args.out)
    print(f"codebook: m={cb.m} energy={cb.energy:.6g} -> {args.out}")
    return 0


def _cmd_encode(args) -> int:
    if not args.codebook:
        raise _UsageError("encode requires --codebook <file>")
    cfg = _config_for_encode(args)
    cb = load_codebook(args.codebook)
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    for image_path in args.images:
        img = resize_to_height(load_image(image_path), cfg.height)
        dset = dense_sift(to_luminance(img), step=cfg.step, scales=tuple(cfg.scales))
        if cfg.mode != "baseline":
            smap = compute_saliency(cfg.saliency_model, img, image_path=image_path)
            dset = attach_saliency(dset, smap)
        stem = Path(image_path).stem
        if cfg.mode == "split_mkl":
            sal, nonsal = split_by_threshold(dset, cfg.threshold)
            save_spm_vector(spm_encode(sal, cb, levels=cfg.levels), out_dir / f"{stem}.salient.spmv")
            save_spm_vector(spm_encode(nonsal, cb, levels=cfg.levels), out_dir / f"{stem}.nonsalient.spmv")
        elif cfg.mode == "prune":
            pruned = prune_top_fraction(dset, PruneSpec(cfg.keep_fraction))
            save_spm_vector(spm_encode(pruned, cb, levels=cfg.levels), out_dir / f"{stem}.spmv")
        elif cfg.mode == "weight":
            save_spm_vector(spm_encode(dset, cb, levels=cfg.levels, use_weights=True), out_dir / f"{stem}.spmv")
        else:
            save_spm_vector(spm_encode(dset, cb, levels=cfg.levels), out_dir / f"{stem}.spmv")
        print(f"encoded {image_path}")
    return 0


def _config_for_encode(args) -> ExperimentConfig:
    # encode/train/evaluate accept the same knobs as experiment but do not
    # require a dataset when operating on explicit files
    over = _overrides_from_args(args)
    over.setdefault("dataset", ".")
    file_values = load_config_file(args.config) if getattr(args, "config", None) else None
    return build_config(file_values, over)


def _cmd_train(args) -> int:
    cfg = _config_from_args(args)
    if not args.out:
        raise _UsageError("train requires --out <model file>")
    out = Path(args.out)
    table = run_experiment(replace(cfg, n_train=(cfg.n_train[0],), n_reps=1), keep_details=True)
    detail = table.details[0]
    if cfg.mode == "split_mkl":
        model = MklModel(
            alpha=detail["alpha"],
            svm=_retrain_from_detail(cfg, detail),
            bandwidths=detail["bandwidths"],
        )
    else:
        k_tr = detail["K_train"]
        svm = train_svm(k_tr, _labels_for(cfg, detail["train_ids"]), C=cfg.svm_c)
        model = MklModel(alpha=1.0, svm=svm, bandwidths=(detail["bandwidth"], detail["bandwidth"]))
    save_model(model, out)
    acc = table.rows[0].accuracy
    print(f"trained {cfg.mode} model (rep 0 accuracy {acc:.4f}) -> {out}")
    return 0


def _labels_for(cfg: ExperimentConfig, ids: np.ndarray) -> np.ndarray:
    index = scan_dataset(cfg.dataset_root)
    labels = np.array([c for _, c in index.items], dtype=np.intp)
    return labels[ids]


def _retrain_from_detail(cfg: ExperimentConfig, detail: dict):
    k_star = combine_kernels(detail["K_s_train"], detail["K_ns_train"], detail["alpha"])
    return train_svm(k_star, _labels_for(cfg, detail["train_ids"]), C=cfg.svm_c)


def _cmd_evaluate(args) -> int:
    cfg = _config_from_args(args)
    if not args.model_file:
        raise _UsageError("evaluate requires --model-file <file>")
    stored = load_model(args.model_file)
    table = run_experiment(replace(cfg, n_train=(cfg.n_train[0],), n_reps=1), keep_details=True)
    detail = table.details[0]
    index = scan_dataset(cfg.dataset_root)
    labels = np.array([c for _, c in index.items], dtype=np.intp)
    train_ids, test_ids = detail["train_ids"], detail["test_ids"]
    if cfg.mode == "split_mkl":
        xs, xns = detail["spm_salient"], detail["spm_nonsalient"]
        ks_te = chi2_kernel_matrix(xs[test_ids], xs[train_ids], bandwidth=stored.bandwidths[0])
        kns_te = chi2_kernel_matrix(xns[test_ids], xns[train_ids], bandwidth=stored.bandwidths[1])
        k_te = combine_kernels(ks_te, kns_te, stored.alpha)
    else:
        x = detail["spm"]
        k_te = chi2_kernel_matrix(x[test_ids], x[train_ids], bandwidth=stored.bandwidths[0])
    stored.svm.n_train = len(train_ids)
    pred, _ = predict(stored.svm, k_te)
    acc = float((pred == labels[test_ids]).mean())
    print(f"accuracy: {acc:.6f} over {len(test_ids)} test images")
    return 0


def _cmd_experiment(args) -> int:
    cfg = _config_from_args(args)
    table = run_experiment(cfg)
    if args.out:
        emit_results_csv(table, args.out)
        print(f"results -> {args.out}")
    for row in table.rows:
        alpha = f" alpha={row.alpha:.3f}" if row.alpha is not None else ""
        print(f"{row.mode} n_train={row.n_train} rep={row.rep}: {row.accuracy:.4f}{alpha}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    if not args.out:
        raise _UsageError("sweep requires --out <plot data file>")
    tables = []
    if args.sweep == "keep":
        if not args.keep_list:
            raise _UsageError("sweep keep requires --keep-list p1,p2,...")
        fractions = [float(v) for v in args.keep_list.split(",")]
        for p in fractions:
            sub = replace(cfg, mode="prune", keep_fraction=p)
            tables.append(run_experiment(sub))
        axis = "keep_fraction"
    else:
        tables.append(run_experiment(cfg))
        axis = "n_train"
    emit_plot_data(tables, axis, args.out)
    if args.csv_dir:
        csv_dir = Path(args.csv_dir)
        csv_dir.mkdir(parents=True, exist_ok=True)
        for i, t in enumerate(tables):
            emit_results_csv(t, csv_dir / f"sweep_{i:03d}.csv")
    print(f"plot data -> {args.out}")
    return 0


# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="salrec", description="Saliency-guided scene recognition pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("saliency", help="write saliency maps as 8-bit PNGs")
    _add_common(p)
    p.add_argument("images", nargs="+")
    p.set_defaults(fn=_cmd_saliency)

    p = sub.add_parser("extract", help="write dense descriptor dumps")
    _add_common(p)
    p.add_argument("images", nargs="+")
    p.set_defaults(fn=_cmd_extract)

    p = sub.add_parser("codebook", help="train a codebook from descriptor dumps")
    _add_common(p)
    p.add_argument("dumps", nargs="+")
    p.set_defaults(fn=_cmd_codebook)

    p = sub.add_parser("encode", help="encode images into pyramid histograms")
    _add_common(p)
    p.add_argument("--codebook", help="codebook file")
    p.add_argument("images", nargs="+")
    p.set_defaults(fn=_cmd_encode)

    p = sub.add_parser("train", help="train a model on repetition 0 of the split")
    _add_common(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a saved model on the test partition")
    _add_common(p)
    p.add_argument("--model-file", dest="model_file")
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("experiment", help="run the full protocol and emit CSV")
    _add_common(p)
    p.set_defaults(fn=_cmd_experiment)

    p = sub.add_parser("sweep", help="run sweeps and emit plot data")
    _add_common(p)
    p.add_argument("--sweep", choices=("keep", "ntrain"), default="ntrain")
    p.add_argument("--keep-list", dest="keep_list", help="keep fractions for a pruning sweep")
    p.add_argument("--csv-dir", dest="csv_dir", help="also write per-run CSVs here")
    p.set_defaults(fn=_cmd_sweep)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except SalrecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - map unexpected failures to exit 3
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
