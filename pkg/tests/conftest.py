"""Shared fixtures: synthetic corpora and session caches."""

import numpy as np
import pytest
from PIL import Image


def synth_corpus(
    root,
    n_per_class=10,
    size=64,
    seed=0,
    patch=24,
    period=6,
    jitter=4,
    contrast=0.45,
    n_clutter=10,
):
    """Two-class texture corpus: oriented stripe patch near the center,
    shared random clutter in the background. Class 0 = horizontal stripes,
    class 1 = vertical. Fully determined by ``seed``."""
    for cid, cname in enumerate(("htex", "vtex")):
        cdir = root / cname
        cdir.mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            rng = np.random.default_rng((seed, cid, i))
            img = np.full((size, size), 0.5)
            for _ in range(n_clutter):
                y = int(rng.integers(0, size - 12))
                x = int(rng.integers(0, size - 12))
                h = int(rng.integers(4, 13))
                w = int(rng.integers(4, 13))
                img[y : y + h, x : x + w] += rng.uniform(-0.25, 0.25)
            img += rng.normal(0, 0.02, img.shape)
            cy = size // 2 + int(rng.integers(-jitter, jitter + 1))
            cx = size // 2 + int(rng.integers(-jitter, jitter + 1))
            yy, xx = np.mgrid[0:patch, 0:patch]
            wave = np.sin(2 * np.pi * (yy if cid == 0 else xx) / period)
            y0 = int(np.clip(cy - patch // 2, 0, size - patch))
            x0 = int(np.clip(cx - patch // 2, 0, size - patch))
            img[y0 : y0 + patch, x0 : x0 + patch] = 0.5 + contrast / 2 * wave
            img = np.clip(img, 0, 1)
            Image.fromarray(np.round(img * 255).astype(np.uint8), mode="L").save(
                cdir / f"img_{i:03d}.png"
            )


def write_uniform_maps(map_dir, dataset_root, value=255):
    """One flat 8-bit map per dataset image, paired by file stem."""
    map_dir.mkdir(parents=True, exist_ok=True)
    for p in sorted(dataset_root.rglob("*.png")):
        with Image.open(p) as img:
            w, h = img.size
        arr = np.full((h, w), value, dtype=np.uint8)
        Image.fromarray(arr, mode="L").save(map_dir / p.name)


TINY_PARAMS = dict(
    n_train=(6,),
    n_reps=2,
    seed=7,
    codewords=16,
    restarts=3,
    step=3,
    scales=(4, 6),
    height=64,
    timing=False,
    codebook_sample=20_000,
)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """20-image 64x64 corpus plus a warm shared cache and uniform maps."""
    base = tmp_path_factory.mktemp("tiny")
    data = base / "data"
    synth_corpus(data, n_per_class=10, size=64, seed=0)
    ones = base / "ones"
    write_uniform_maps(ones, data)
    cache = base / "cache"
    cache.mkdir()
    return {"root": data, "ones": ones, "cache": cache}


def tiny_config(tiny, **overrides):
    from salrec.pipeline import ExperimentConfig

    params = dict(
        dataset_root=str(tiny["root"]),
        saliency_model="gauss",
        cache_dir=str(tiny["cache"]),
        **TINY_PARAMS,
    )
    params.update(overrides)
    return ExperimentConfig(**params)
