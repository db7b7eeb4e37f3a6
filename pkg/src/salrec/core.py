"""Image decoding, geometric preprocessing, dataset indexing, and train/test splits."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError

# Extensions accepted when indexing a dataset directory.
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".pgm", ".ppm"}

# ITU-R 601 luminance weights.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class ImagePlane:
    """Decoded raster held as float64 intensities in [0, 1].

    ``data`` is ``(height, width)`` for single-channel images or
    ``(height, width, 3)`` for RGB. Arrays are marked read-only; every
    operation returns a new instance.
    """

    data: np.ndarray

    def __post_init__(self):
        d = self.data
        if not (d.ndim == 2 or (d.ndim == 3 and d.shape[2] == 3)):
            raise ValueError(f"unsupported image array shape {d.shape}")
        if d.shape[0] < 1 or d.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if float(d.min()) < 0.0 or float(d.max()) > 1.0:
            raise ValueError("image intensities must lie in [0, 1]")
        d.setflags(write=False)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else self.data.shape[2]


def load_image(path: str | Path) -> ImagePlane:
    """Decode a PNG/JPEG/PGM/PPM file into an ImagePlane.

    8-bit samples map to [0, 1] as v/255 (16-bit as v/65535). Grayscale
    files keep a single channel; anything else is converted to RGB.
    """
    p = Path(path)
    if not p.is_file():
        raise DataError(f"image file not found: {p}")
    try:
        with Image.open(p) as img:
            img.load()
            if img.mode == "L":
                arr = np.asarray(img, dtype=np.float64) / 255.0
            elif img.mode in ("I", "I;16"):
                arr = np.asarray(img, dtype=np.float64) / 65535.0
            else:
                if img.mode != "RGB":
                    img = img.convert("RGB")
                arr = np.asarray(img, dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DataError(f"cannot decode image: {p} ({exc})") from exc
    return ImagePlane(np.clip(arr, 0.0, 1.0))


def to_luminance(img: ImagePlane) -> ImagePlane:
    """Collapse RGB to a single luminance channel (ITU-R 601 weights)."""
    if img.channels == 1:
        return img
    if img.channels != 3:
        raise ValueError(f"unsupported channel count: {img.channels}")
    r, g, b = LUMA_WEIGHTS
    lum = img.data[..., 0] * r + img.data[..., 1] * g + img.data[..., 2] * b
    return ImagePlane(np.clip(lum, 0.0, 1.0))


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resample with half-pixel sample centres.

    Interpolation uses the form ``a + w*(b - a)`` so constant inputs are
    reproduced exactly.
    """
    in_h, in_w = arr.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return arr.copy()

    def _axis(n_in: int, n_out: int):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1.0)
        lo = np.floor(pos).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, wr = _axis(in_h, out_h)
    c0, c1, wc = _axis(in_w, out_w)
    wr = wr.reshape((-1,) + (1,) * (arr.ndim - 1))
    wc = wc.reshape((1, -1) + (1,) * (arr.ndim - 2))
    rows = arr[r0] + wr * (arr[r1] - arr[r0])
    out = rows[:, c0] + wc * (rows[:, c1] - rows[:, c0])
    return out


def resize_to_height(img: ImagePlane, target_height: int) -> ImagePlane:
    """Resize so height equals ``target_height``, keeping the aspect ratio.

    The new width is round(width * target_height / height), at least 1.
    """
    if target_height < 1:
        raise ValueError("target_height must be >= 1")
    if img.height == target_height:
        return img
    new_w = max(1, int(np.floor(img.width * target_height / img.height + 0.5)))
    out = resize_bilinear(img.data, target_height, new_w)
    return ImagePlane(np.clip(out, 0.0, 1.0))


@dataclass(frozen=True)
class DatasetIndex:
    """Labeled image corpus: class names plus (path, class-id) items."""

    classes: list[str]
    items: list[tuple[str, int]]

    def class_items(self, class_id: int) -> list[int]:
        return [i for i, (_, c) in enumerate(self.items) if c == class_id]


def scan_dataset(root: str | Path) -> DatasetIndex:
    """Index a ``<root>/<class_name>/<images>`` tree.

    Classes are sorted lexicographically (stable ids across machines);
    items are sorted by filename within each class. Hidden files and
    non-image extensions are skipped.
    """
    rootp = Path(root)
    if not rootp.is_dir():
        raise DataError(f"dataset root is not a directory: {rootp}")
    class_dirs = sorted(
        (d for d in rootp.iterdir() if d.is_dir() and not d.name.startswith(".")),
        key=lambda d: d.name,
    )
    if not class_dirs:
        raise DataError(f"dataset root contains no class directories: {rootp}")
    classes: list[str] = []
    items: list[tuple[str, int]] = []
    for cid, cdir in enumerate(class_dirs):
        files = sorted(
            f
            for f in cdir.iterdir()
            if f.is_file()
            and not f.name.startswith(".")
            and f.suffix.lower() in IMAGE_EXTENSIONS
        )
        if not files:
            raise DataError(f"class directory has no images: {cdir.name}")
        classes.append(cdir.name)
        items.extend((str(f), cid) for f in files)
    return DatasetIndex(classes=classes, items=items)


@dataclass(frozen=True)
class SplitSet:
    """Stratified train/test repetitions over a DatasetIndex.

    Each repetition is a pair of sorted item-id arrays (train, test);
    every class contributes exactly ``n_train_per_class`` training items.
    """

    repetitions: list[tuple[np.ndarray, np.ndarray]]
    n_train_per_class: int
    seed: int


def make_splits(index: DatasetIndex, n_train: int, n_reps: int, seed: int) -> SplitSet:
    """Draw ``n_reps`` independent stratified splits.

    Repetition ``r`` is drawn from a generator seeded with ``seed + r``,
    so individual repetitions can be re-run independently.
    """
    if n_train < 1:
        raise ValueError("n_train must be >= 1")
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    per_class = [index.class_items(c) for c in range(len(index.classes))]
    smallest = min(len(ids) for ids in per_class)
    if n_train >= smallest:
        raise DataError(
            f"n_train={n_train} must be smaller than the smallest class "
            f"({smallest} images)"
        )
    reps = []
    for r in range(n_reps):
        rng = np.random.default_rng(seed + r)
        train: list[int] = []
        test: list[int] = []
        for ids in per_class:
            perm = rng.permutation(len(ids))
            chosen = {ids[j] for j in perm[:n_train]}
            train.extend(sorted(chosen))
            test.extend(sorted(set(ids) - chosen))
        reps.append((np.array(sorted(train)), np.array(sorted(test))))
    return SplitSet(repetitions=reps, n_train_per_class=n_train, seed=seed)


def export_splits(splits: SplitSet, path: str | Path) -> None:
    """Write splits as text: one ``rep,item_id,train|test`` line per item."""
    lines = []
    for r, (train, test) in enumerate(splits.repetitions):
        marks = {int(i): "train" for i in train}
        marks.update({int(i): "test" for i in test})
        for item_id in sorted(marks):
            lines.append(f"{r},{item_id},{marks[item_id]}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
