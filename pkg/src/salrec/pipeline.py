"""End-to-end experiment orchestration: config, caching, regimes, results.

A run indexes the dataset, draws stratified splits, extracts (or loads
cached) saliency maps and descriptors, trains a codebook per repetition
from training images only, encodes every image under the configured
regime, trains the classifier, and records per-repetition and mean
accuracies. All stages are deterministic for a fixed config, independent
of the worker count.
"""

from __future__ import annotations

import hashlib
import tempfile
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classify import (
    chi2_kernel_matrix,
    combine_kernels,
    predict,
    train_mkl,
    train_svm,
)
from .core import make_splits, resize_to_height, scan_dataset, to_luminance, load_image
from .encoding import Codebook, spm_encode, train_codebook
from .errors import ConfigError, DataError
from .features import DescriptorSet, PruneSpec, attach_saliency, dense_sift, prune_top_fraction, split_by_threshold
from .saliency import SaliencyMap, compute_saliency, parse_model_id

_FMT_VERSION = "v1"

MODES = ("baseline", "prune", "weight", "split_mkl")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; defaults follow the standard protocol."""

    dataset_root: str
    mode: str = "baseline"
    saliency_model: str = "gauss"
    keep_fraction: float | None = None
    threshold: float = 0.5
    n_train: tuple[int, ...] = (30,)
    n_reps: int = 5
    seed: int = 0
    codewords: int = 600
    restarts: int = 5
    levels: int = 3
    step: int = 2
    scales: tuple[int, ...] = (4, 6, 8, 10)
    height: int = 480
    svm_c: float = 10.0
    cache_dir: str | None = None
    jobs: int = 1
    codebook_sample: int = 200_000
    share_codebook: bool = False
    per_class_mean: bool = False
    timing: bool = True

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode: {self.mode!r} (choose from {', '.join(MODES)})")
        try:
            parse_model_id(self.saliency_model)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.mode == "prune":
            if self.keep_fraction is None:
                raise ConfigError("prune mode requires keep_fraction (--keep)")
            if not (0.0 < self.keep_fraction <= 1.0):
                raise ConfigError("keep_fraction must lie in (0, 1]")
        if self.mode == "split_mkl" and not (0.0 <= self.threshold <= 1.0):
            raise ConfigError("threshold must lie in [0, 1]")
        if not self.n_train or any(n < 1 for n in self.n_train):
            raise ConfigError("n_train must be a non-empty list of positive counts")
        if self.n_reps < 1:
            raise ConfigError("n_reps must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.codewords < 2:
            raise ConfigError("codewords must be >= 2")
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1")
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.step < 1:
            raise ConfigError("step must be >= 1")
        if not self.scales or any(s < 1 for s in self.scales):
            raise ConfigError("scales must be a non-empty list of positive bin sizes")
        if self.height < 1:
            raise ConfigError("height must be >= 1")
        if self.svm_c <= 0:
            raise ConfigError("svm C must be positive")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.codebook_sample < self.codewords:
            raise ConfigError("codebook_sample must be >= codewords")


@dataclass
class ResultRow:
    mode: str
    model: str
    n_train: int
    rep: int | str  # repetition index, or "mean" for aggregates
    accuracy: float
    alpha: float | None
    seconds: float


@dataclass
class ResultsTable:
    rows: list[ResultRow]
    config: ExperimentConfig
    details: list[dict] | None = None


# ---------------------------------------------------------------------------
# Artifact cache


def _hash_key(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode())
        h.update(b"\x1f")
    return h.hexdigest()


class ArtifactCache:
    """Content-keyed array store; corrupt entries are recomputed, never trusted."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _file(self, key: str) -> Path:
        return self.root / f"{key}.npz"

    def load(self, key: str) -> dict[str, np.ndarray] | None:
        f = self._file(key)
        if not f.is_file():
            return None
        try:
            with np.load(f, allow_pickle=False) as z:
                return {k: z[k] for k in z.files}
        except Exception:
            warnings.warn(f"corrupt cache entry {f.name}; recomputing")
            return None

    def store(self, key: str, **arrays: np.ndarray) -> None:
        f = self._file(key)
        tmp = f.with_suffix(f".tmp-{time.monotonic_ns()}")
        try:
            with open(tmp, "wb") as fh:
                np.savez(fh, **arrays)
            tmp.replace(f)
        finally:
            tmp.unlink(missing_ok=True)


@contextmanager
def _cache_root(cfg: ExperimentConfig):
    if cfg.cache_dir:
        Path(cfg.cache_dir).mkdir(parents=True, exist_ok=True)
        yield cfg.cache_dir
    else:
        with tempfile.TemporaryDirectory(prefix="salrec-cache-") as td:
            yield td


def _derived_seed(*parts) -> int:
    return int.from_bytes(hashlib.sha256(repr(parts).encode()).digest()[:4], "little")


# ---------------------------------------------------------------------------
# Cached per-image stages (also used by pool workers)


def _get_descriptors(cache: ArtifactCache, cfg: ExperimentConfig, path: str) -> DescriptorSet:
    key = _hash_key("desc", _FMT_VERSION, path, cfg.height, cfg.step, tuple(cfg.scales))
    data = cache.load(key)
    if data is not None and {"xs", "ys", "scales", "vectors", "dims"} <= set(data):
        dims = (int(data["dims"][0]), int(data["dims"][1]))
        return DescriptorSet(
            xs=data["xs"],
            ys=data["ys"],
            scales=data["scales"],
            weights=np.ones(len(data["xs"]), dtype=np.float32),
            vectors=data["vectors"],
            image_dims=dims,
        )
    img = resize_to_height(load_image(path), cfg.height)
    dset = dense_sift(to_luminance(img), step=cfg.step, scales=tuple(cfg.scales))
    cache.store(
        key,
        xs=dset.xs,
        ys=dset.ys,
        scales=dset.scales,
        vectors=dset.vectors,
        dims=np.array(dset.image_dims, dtype=np.int64),
    )
    return dset


def _get_saliency_values(cache: ArtifactCache, cfg: ExperimentConfig, path: str) -> np.ndarray:
    key = _hash_key("sal", _FMT_VERSION, path, cfg.height, cfg.saliency_model)
    data = cache.load(key)
    if data is not None and "values" in data:
        return data["values"]
    img = resize_to_height(load_image(path), cfg.height)
    smap = compute_saliency(cfg.saliency_model, img, image_path=path)
    cache.store(key, values=smap.values)
    return smap.values


def _mode_signature(cfg: ExperimentConfig) -> tuple:
    if cfg.mode == "baseline":
        return ("baseline",)
    if cfg.mode == "prune":
        return ("prune", cfg.saliency_model, cfg.keep_fraction)
    if cfg.mode == "weight":
        return ("weight", cfg.saliency_model)
    return ("split", cfg.saliency_model, cfg.threshold)


_CODEBOOK_MEMO: dict[str, Codebook] = {}


def _codebook_from_cache(cache: ArtifactCache, cb_key: str) -> Codebook:
    cb = _CODEBOOK_MEMO.get(cb_key)
    if cb is not None:
        return cb
    data = cache.load(cb_key)
    if data is None:
        raise DataError("codebook missing from cache (internal error)")
    cb = Codebook(
        centers=data["centers"],
        energy=float(data["energy"]),
        seed=int(data["seed"]),
    )
    _CODEBOOK_MEMO[cb_key] = cb
    return cb


def _encode_one(cache: ArtifactCache, cfg: ExperimentConfig, path: str, cb_key: str) -> tuple[np.ndarray, ...]:
    key = _hash_key("enc", _FMT_VERSION, path, cb_key, _mode_signature(cfg), cfg.levels)
    data = cache.load(key)
    if data is not None:
        if cfg.mode == "split_mkl" and {"vs", "vns"} <= set(data):
            return (data["vs"], data["vns"])
        if cfg.mode != "split_mkl" and "v" in data:
            return (data["v"],)
    cb = _codebook_from_cache(cache, cb_key)
    dset = _get_descriptors(cache, cfg, path)
    if cfg.mode != "baseline":
        smap = SaliencyMap(_get_saliency_values(cache, cfg, path))
        dset = attach_saliency(dset, smap)
    if cfg.mode == "baseline":
        vecs = (spm_encode(dset, cb, levels=cfg.levels, use_weights=False).values,)
    elif cfg.mode == "prune":
        pruned = prune_top_fraction(dset, PruneSpec(cfg.keep_fraction))
        vecs = (spm_encode(pruned, cb, levels=cfg.levels, use_weights=False).values,)
    elif cfg.mode == "weight":
        vecs = (spm_encode(dset, cb, levels=cfg.levels, use_weights=True).values,)
    else:
        sal, nonsal = split_by_threshold(dset, cfg.threshold)
        vecs = (
            spm_encode(sal, cb, levels=cfg.levels, use_weights=False).values,
            spm_encode(nonsal, cb, levels=cfg.levels, use_weights=False).values,
        )
    if cfg.mode == "split_mkl":
        cache.store(key, vs=vecs[0], vns=vecs[1])
    else:
        cache.store(key, v=vecs[0])
    return vecs


def _ensure_worker(task) -> None:
    cache_dir, cfg, path = task
    cache = ArtifactCache(cache_dir)
    _get_descriptors(cache, cfg, path)
    if cfg.mode != "baseline":
        _get_saliency_values(cache, cfg, path)


def _encode_worker(task) -> tuple[np.ndarray, ...]:
    cache_dir, cfg, path, cb_key = task
    return _encode_one(ArtifactCache(cache_dir), cfg, path, cb_key)


def _parallel_map(fn, tasks: list, jobs: int) -> list:
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        chunk = max(1, len(tasks) // (jobs * 4))
        return list(ex.map(fn, tasks, chunksize=chunk))


# ---------------------------------------------------------------------------
# Codebook per repetition


def _get_codebook(
    cache: ArtifactCache,
    cfg: ExperimentConfig,
    paths: list[str],
    train_ids: np.ndarray,
    rep: int,
) -> tuple[Codebook, str]:
    tag = "shared" if cfg.share_codebook else f"rep{rep}"
    source_paths = list(paths) if cfg.share_codebook else [paths[int(i)] for i in train_ids]
    key = _hash_key(
        "cb",
        _FMT_VERSION,
        cfg.codewords,
        cfg.restarts,
        cfg.seed,
        tag,
        cfg.codebook_sample,
        cfg.height,
        cfg.step,
        tuple(cfg.scales),
        _hash_key(*source_paths),
    )
    data = cache.load(key)
    if data is not None and {"centers", "energy", "seed"} <= set(data):
        cb = Codebook(centers=data["centers"], energy=float(data["energy"]), seed=int(data["seed"]))
        _CODEBOOK_MEMO[key] = cb
        return cb, key

    quota = max(1, -(-cfg.codebook_sample // len(source_paths)))  # ceil division
    parts = []
    for p in source_paths:
        dset = _get_descriptors(cache, cfg, p)
        n = len(dset)
        if n == 0:
            continue
        if n <= quota:
            sel = np.arange(n)
        else:
            rng = np.random.default_rng(_derived_seed(cfg.seed, "cbsample", p))
            sel = np.sort(rng.choice(n, size=quota, replace=False))
        parts.append(dset.vectors[sel].astype(np.float64))
    if not parts:
        raise DataError("no descriptors available to train a codebook")
    sample = np.concatenate(parts)[: cfg.codebook_sample]
    cb = train_codebook(
        sample,
        m=cfg.codewords,
        restarts=cfg.restarts,
        seed=_derived_seed(cfg.seed, "codebook", tag),
    )
    cache.store(
        key,
        centers=cb.centers,
        energy=np.float64(cb.energy),
        seed=np.int64(cb.seed),
    )
    _CODEBOOK_MEMO[key] = cb
    return cb, key


# ---------------------------------------------------------------------------
# The experiment itself


def _accuracy(pred: np.ndarray, truth: np.ndarray, per_class_mean: bool) -> float:
    if not per_class_mean:
        return float((pred == truth).mean())
    accs = []
    for c in np.unique(truth):
        mask = truth == c
        accs.append(float((pred[mask] == truth[mask]).mean()))
    return float(np.mean(accs))


def run_experiment(cfg: ExperimentConfig, keep_details: bool = False) -> ResultsTable:
    """Execute the configured regime over all splits and repetitions."""
    cfg.validate()
    index = scan_dataset(cfg.dataset_root)
    if len(index.classes) < 2:
        raise DataError("classification needs at least 2 classes")
    paths = [p for p, _ in index.items]
    labels = np.array([c for _, c in index.items], dtype=np.intp)

    rows: list[ResultRow] = []
    details: list[dict] = []
    with _cache_root(cfg) as cache_dir:
        cache = ArtifactCache(cache_dir)
        _parallel_map(_ensure_worker, [(cache_dir, cfg, p) for p in paths], cfg.jobs)

        for n_train in cfg.n_train:
            splits = make_splits(index, n_train, cfg.n_reps, cfg.seed)
            rep_accs: list[float] = []
            rep_alphas: list[float] = []
            rep_secs: list[float] = []
            for rep, (train_ids, test_ids) in enumerate(splits.repetitions):
                t0 = time.monotonic()
                cb, cb_key = _get_codebook(cache, cfg, paths, train_ids, rep)
                encoded = _parallel_map(
                    _encode_worker,
                    [(cache_dir, cfg, p, cb_key) for p in paths],
                    cfg.jobs,
                )
                y_tr = labels[train_ids]
                y_te = labels[test_ids]
                alpha_val: float | None = None
                detail: dict = {
                    "n_train": n_train,
                    "rep": rep,
                    "train_ids": train_ids,
                    "test_ids": test_ids,
                    "codebook": cb,
                }
                if cfg.mode == "split_mkl":
                    xs = np.stack([encoded[i][0] for i in range(len(paths))])
                    xns = np.stack([encoded[i][1] for i in range(len(paths))])
                    ks_tr = chi2_kernel_matrix(xs[train_ids])
                    kns_tr = chi2_kernel_matrix(xns[train_ids])
                    mkl = train_mkl(
                        ks_tr,
                        kns_tr,
                        y_tr,
                        C=cfg.svm_c,
                        seed=_derived_seed(cfg.seed, "mklfolds", n_train, rep),
                    )
                    ks_te = chi2_kernel_matrix(xs[test_ids], xs[train_ids], bandwidth=ks_tr.bandwidth)
                    kns_te = chi2_kernel_matrix(xns[test_ids], xns[train_ids], bandwidth=kns_tr.bandwidth)
                    k_star = combine_kernels(ks_te, kns_te, mkl.alpha)
                    pred, _ = predict(mkl.svm, k_star)
                    alpha_val = mkl.alpha
                    if keep_details:
                        detail.update(
                            spm_salient=xs,
                            spm_nonsalient=xns,
                            K_s_train=ks_tr,
                            K_ns_train=kns_tr,
                            alpha=mkl.alpha,
                            bandwidths=mkl.bandwidths,
                        )
                else:
                    x = np.stack([encoded[i][0] for i in range(len(paths))])
                    k_tr = chi2_kernel_matrix(x[train_ids])
                    model = train_svm(k_tr, y_tr, C=cfg.svm_c)
                    k_te = chi2_kernel_matrix(x[test_ids], x[train_ids], bandwidth=k_tr.bandwidth)
                    pred, _ = predict(model, k_te)
                    if keep_details:
                        detail.update(spm=x, K_train=k_tr, bandwidth=k_tr.bandwidth)
                acc = _accuracy(pred, y_te, cfg.per_class_mean)
                seconds = (time.monotonic() - t0) if cfg.timing else 0.0
                rows.append(
                    ResultRow(cfg.mode, cfg.saliency_model, n_train, rep, acc, alpha_val, seconds)
                )
                rep_accs.append(acc)
                rep_secs.append(seconds)
                if alpha_val is not None:
                    rep_alphas.append(alpha_val)
                if keep_details:
                    detail["accuracy"] = acc
                    details.append(detail)
            mean_alpha = float(np.mean(rep_alphas)) if rep_alphas else None
            rows.append(
                ResultRow(
                    cfg.mode,
                    cfg.saliency_model,
                    n_train,
                    "mean",
                    float(np.mean(rep_accs)),
                    mean_alpha,
                    float(np.mean(rep_secs)),
                )
            )
    return ResultsTable(rows=rows, config=cfg, details=details if keep_details else None)


# ---------------------------------------------------------------------------
# Output emission


def emit_results_csv(table: ResultsTable, path) -> None:
    """Write rows as CSV: mode,model,n_train,rep,accuracy,alpha,seconds."""
    if not table.rows:
        raise DataError("results table is empty")
    lines = ["mode,model,n_train,rep,accuracy,alpha,seconds"]
    for r in table.rows:
        alpha = f"{r.alpha:.6f}" if r.alpha is not None else ""
        lines.append(
            f"{r.mode},{r.model},{r.n_train},{r.rep},{r.accuracy:.6f},{alpha},{r.seconds:.6f}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def emit_plot_data(tables: list[ResultsTable], axis: str, path) -> None:
    """Write per-series (x, mean accuracy) columns for external plotting.

    ``axis`` selects the x variable: the kept descriptor fraction of a
    pruning sweep, or the number of training samples. One series is
    emitted per (mode, model) pair, sorted by x.
    """
    if axis not in ("keep_fraction", "n_train"):
        raise ValueError("axis must be 'keep_fraction' or 'n_train'")
    if not tables:
        raise DataError("no results tables given")
    series: dict[tuple[str, str], list[tuple[float, float]]] = {}
    for t in tables:
        mean_rows = [r for r in t.rows if r.rep == "mean"]
        if not mean_rows:
            raise DataError("results table has no aggregate rows")
        key = (t.config.mode, t.config.saliency_model)
        if axis == "keep_fraction":
            if t.config.keep_fraction is None:
                raise DataError("mixed axes: table carries no keep fraction")
            if len(mean_rows) != 1:
                raise DataError("mixed axes: keep-fraction sweep needs one n_train per table")
            series.setdefault(key, []).append((float(t.config.keep_fraction), mean_rows[0].accuracy))
        else:
            for r in mean_rows:
                series.setdefault(key, []).append((float(r.n_train), r.accuracy))
    blocks = []
    for (mode, model) in sorted(series):
        pts = sorted(series[(mode, model)])
        lines = [f"# series: mode={mode} model={model}"]
        lines.extend(f"{x:g} {acc:.6f}" for x, acc in pts)
        blocks.append("\n".join(lines))
    Path(path).write_text("\n\n".join(blocks) + "\n", encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# Config files


_CONFIG_KEYS = {
    "dataset": str,
    "mode": str,
    "model": str,
    "keep": float,
    "threshold": float,
    "ntrain": "int_list",
    "reps": int,
    "seed": int,
    "codewords": int,
    "restarts": int,
    "levels": int,
    "step": int,
    "scales": "int_list",
    "height": int,
    "svm_c": float,
    "cache": str,
    "jobs": int,
    "codebook_sample": int,
    "share_codebook": "bool",
    "per_class_mean": "bool",
    "timing": "bool",
}


def _parse_value(key: str, raw: str):
    kind = _CONFIG_KEYS[key]
    if kind is str:
        return raw
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind == "int_list":
        return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    if kind == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"invalid boolean for {key}: {raw!r}")
    raise AssertionError(kind)


def load_config_file(path) -> dict:
    """Parse a flat ``key = value`` file with ``#`` comments."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    values: dict = {}
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{p}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in text.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{p}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = _parse_value(key, raw)
        except ValueError as exc:
            raise ConfigError(f"{p}:{lineno}: bad value for {key}: {raw!r}") from exc
    return values


_KEY_TO_FIELD = {
    "dataset": "dataset_root",
    "mode": "mode",
    "model": "saliency_model",
    "keep": "keep_fraction",
    "threshold": "threshold",
    "ntrain": "n_train",
    "reps": "n_reps",
    "seed": "seed",
    "codewords": "codewords",
    "restarts": "restarts",
    "levels": "levels",
    "step": "step",
    "scales": "scales",
    "height": "height",
    "svm_c": "svm_c",
    "cache": "cache_dir",
    "jobs": "jobs",
    "codebook_sample": "codebook_sample",
    "share_codebook": "share_codebook",
    "per_class_mean": "per_class_mean",
    "timing": "timing",
}


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Merge config-file values with CLI overrides (overrides win)."""
    merged: dict = {}
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if value is None:
                continue
            field_name = _KEY_TO_FIELD.get(key, key)
            merged[field_name] = value
    if "dataset_root" not in merged:
        raise ConfigError("a dataset directory is required (--dataset or config 'dataset')")
    cfg = ExperimentConfig(**merged)
    cfg.validate()
    return cfg
