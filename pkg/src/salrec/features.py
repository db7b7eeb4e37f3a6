"""Multi-scale dense gradient descriptors and saliency-driven selection.

Descriptors follow the standard 4x4-spatial-bin, 8-orientation-bin layout
with bilinear interpolation in space and orientation and a Gaussian window
over the support. Selection operations (attach weights, prune by rank,
split by threshold) never mutate their input set.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .core import ImagePlane
from .errors import DataError

DESCRIPTOR_DIM = 128

_N_SPATIAL = 4  # spatial bins per axis
_N_ORIENT = 8
_CLAMP = 0.2

_DSET_MAGIC = b"DSET"


@dataclass(frozen=True)
class DescriptorSet:
    """Dense local descriptors with positions, scales, and saliency weights.

    Entries are kept in canonical scan order (scale, then y, then x).
    ``weights`` default to 1 until a saliency map is attached.
    """

    xs: np.ndarray
    ys: np.ndarray
    scales: np.ndarray
    weights: np.ndarray
    vectors: np.ndarray
    image_dims: tuple[int, int]  # (width, height)
    weights_attached: bool = False

    def __post_init__(self):
        n = len(self.xs)
        if not (len(self.ys) == len(self.scales) == len(self.weights) == n == self.vectors.shape[0]):
            raise ValueError("descriptor arrays must share their first dimension")
        if n:
            w, h = self.image_dims
            if self.xs.min() < 0 or self.xs.max() >= w or self.ys.min() < 0 or self.ys.max() >= h:
                raise ValueError("descriptor positions must lie inside the image")
            if self.weights.min() < 0 or self.weights.max() > 1:
                raise ValueError("descriptor weights must lie in [0, 1]")
        for arr in (self.xs, self.ys, self.scales, self.weights, self.vectors):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.xs)


def _empty_set(dims: tuple[int, int]) -> DescriptorSet:
    z = np.zeros(0, dtype=np.float32)
    return DescriptorSet(
        xs=z,
        ys=z.copy(),
        scales=z.copy(),
        weights=z.copy(),
        vectors=np.zeros((0, DESCRIPTOR_DIM), dtype=np.float32),
        image_dims=dims,
    )


def _axis_weights(scale: int) -> np.ndarray:
    """Per-axis bin weights over the support: hat functions times a Gaussian window."""
    support = _N_SPATIAL * scale
    d = np.arange(support, dtype=np.float64)
    center = (support - 1) / 2.0
    window = np.exp(-((d - center) ** 2) / (2.0 * (2.0 * scale) ** 2))
    out = np.empty((_N_SPATIAL, support))
    for i in range(_N_SPATIAL):
        bin_center = center + (i - (_N_SPATIAL - 1) / 2.0) * scale
        hat = np.clip(1.0 - np.abs(d - bin_center) / scale, 0.0, None)
        out[i] = hat * window
    return out


def _orientation_planes(img: np.ndarray, scale: int) -> np.ndarray:
    """Gradient magnitude split into 8 orientation planes, shape (8, H, W)."""
    smooth = ndimage.gaussian_filter(img, sigma=scale / 6.0, mode="nearest")
    gy, gx = np.gradient(smooth)
    mag = np.hypot(gx, gy)
    theta = np.arctan2(gy, gx) % (2.0 * np.pi)
    t = theta / (2.0 * np.pi / _N_ORIENT)
    lo = np.floor(t).astype(np.intp) % _N_ORIENT
    frac = t - np.floor(t)
    planes = np.zeros((_N_ORIENT,) + img.shape)
    for o in range(_N_ORIENT):
        planes[o] += np.where(lo == o, mag * (1.0 - frac), 0.0)
        planes[o] += np.where((lo + 1) % _N_ORIENT == o, mag * frac, 0.0)
    return planes


def _descriptors_at_scale(img: np.ndarray, scale: int, step: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (xs, ys, vectors) for one scale, rows in (y, x) scan order."""
    h, w = img.shape
    support = _N_SPATIAL * scale
    ny = (h - support) // step + 1 if h >= support else 0
    nx = (w - support) // step + 1 if w >= support else 0
    if ny <= 0 or nx <= 0:
        return (np.zeros(0), np.zeros(0), np.zeros((0, DESCRIPTOR_DIM)))

    axis_w = _axis_weights(scale)  # (4, support)
    planes = _orientation_planes(img, scale)

    # First pass: correlate each orientation plane with the 4 row kernels,
    # sampled at the vertical grid positions.
    acc_rows = np.empty((_N_ORIENT, ny, w, _N_SPATIAL))
    for o in range(_N_ORIENT):
        windows = sliding_window_view(planes[o], support, axis=0)[::step][:ny]
        acc_rows[o] = (windows.reshape(-1, support) @ axis_w.T).reshape(ny, w, _N_SPATIAL)

    # Second pass: same along x, producing (8, ny, nx, 4y, 4x).
    desc = np.empty((ny, nx, _N_SPATIAL, _N_SPATIAL, _N_ORIENT))
    for o in range(_N_ORIENT):
        for j in range(_N_SPATIAL):
            windows = sliding_window_view(acc_rows[o, :, :, j], support, axis=1)[:, ::step][:, :nx]
            vals = (windows.reshape(-1, support) @ axis_w.T).reshape(ny, nx, _N_SPATIAL)
            desc[:, :, j, :, o] = vals

    vectors = desc.reshape(ny * nx, DESCRIPTOR_DIM)

    norms = np.linalg.norm(vectors, axis=1)
    nz = norms > 0
    vectors[nz] /= norms[nz, None]
    np.minimum(vectors, _CLAMP, out=vectors)
    norms = np.linalg.norm(vectors, axis=1)
    nz = norms > 0
    vectors[nz] /= norms[nz, None]

    offset = (support - 1) / 2.0
    xs = (np.arange(nx) * step + offset)[None, :].repeat(ny, axis=0).ravel()
    ys = (np.arange(ny) * step + offset)[:, None].repeat(nx, axis=1).ravel()
    return xs, ys, vectors


def dense_sift(img: ImagePlane, step: int = 2, scales: tuple[int, ...] = (4, 6, 8, 10)) -> DescriptorSet:
    """Extract dense descriptors on a ``step``-spaced grid at several bin sizes.

    For bin size s the support is 4s x 4s and only fully-contained windows
    produce a descriptor. The image is pre-smoothed per scale with sigma =
    s/6; vectors are L2-normalized, clamped at 0.2, and renormalized.
    Uniform windows yield the all-zero vector.
    """
    if img.channels != 1:
        raise ValueError("dense_sift expects a single-channel image (use to_luminance)")
    if step < 1:
        raise ValueError("step must be >= 1")
    if not scales:
        raise ValueError("scales must be non-empty")
    scale_list = sorted(set(int(s) for s in scales))
    if any(s < 1 for s in scale_list):
        raise ValueError("scales must be positive")

    dims = (img.width, img.height)
    parts_x, parts_y, parts_s, parts_v = [], [], [], []
    for s in scale_list:
        xs, ys, vecs = _descriptors_at_scale(img.data, s, step)
        if len(xs) == 0:
            continue
        parts_x.append(xs)
        parts_y.append(ys)
        parts_s.append(np.full(len(xs), s, dtype=np.float64))
        parts_v.append(vecs)
    if not parts_x:
        warnings.warn(f"image {dims} too small for every scale {scale_list}; empty descriptor set")
        return _empty_set(dims)
    n = sum(len(p) for p in parts_x)
    return DescriptorSet(
        xs=np.concatenate(parts_x).astype(np.float32),
        ys=np.concatenate(parts_y).astype(np.float32),
        scales=np.concatenate(parts_s).astype(np.float32),
        weights=np.ones(n, dtype=np.float32),
        vectors=np.concatenate(parts_v).astype(np.float32),
        image_dims=dims,
    )


def _bilinear_sample(values: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample a 2-D grid at float positions; pixel centers sit at integer coords."""
    h, w = values.shape
    x = np.clip(xs.astype(np.float64), 0.0, w - 1.0)
    y = np.clip(ys.astype(np.float64), 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    top = values[y0, x0] + fx * (values[y0, x1] - values[y0, x0])
    bot = values[y1, x0] + fx * (values[y1, x1] - values[y1, x0])
    return top + fy * (bot - top)


def attach_saliency(dset: DescriptorSet, smap) -> DescriptorSet:
    """Set each descriptor's weight to the saliency sampled at its center.

    Accepts a SaliencyMap or any 2-D grid of values in [0, 1]; sampling is
    bilinear with pixel centers at integer coordinates.
    """
    values = smap.values if hasattr(smap, "values") else np.asarray(smap, dtype=np.float64)
    h, w = values.shape
    if (w, h) != dset.image_dims:
        raise ValueError(
            f"saliency map {w}x{h} does not match image dims "
            f"{dset.image_dims[0]}x{dset.image_dims[1]}"
        )
    if len(dset) == 0:
        return replace(dset, weights_attached=True)
    sampled = _bilinear_sample(values, dset.xs, dset.ys)
    weights = np.clip(sampled, 0.0, 1.0).astype(np.float32)
    return replace(dset, weights=weights, weights_attached=True)


@dataclass(frozen=True)
class PruneSpec:
    """Keep the top fraction of descriptors ranked by saliency weight."""

    keep_fraction: float

    def __post_init__(self):
        if not (0.0 < self.keep_fraction <= 1.0):
            raise ValueError("keep_fraction must lie in (0, 1]")


def _robust_ceil(x: float) -> int:
    nearest = round(x)
    if abs(x - nearest) < 1e-9 * max(1.0, abs(x)):
        return int(nearest)
    return int(np.ceil(x))


def prune_top_fraction(dset: DescriptorSet, spec: PruneSpec) -> DescriptorSet:
    """Keep exactly ceil(p*N) highest-weight entries, ties broken by scan order."""
    if not dset.weights_attached:
        raise ValueError("prune requires attached saliency weights")
    n = len(dset)
    if n == 0:
        return dset
    k = _robust_ceil(spec.keep_fraction * n)
    k = min(max(k, 1), n)
    if k == n:
        return dset
    order = np.lexsort((np.arange(n), -dset.weights.astype(np.float64)))
    keep = np.sort(order[:k])
    return replace(
        dset,
        xs=dset.xs[keep],
        ys=dset.ys[keep],
        scales=dset.scales[keep],
        weights=dset.weights[keep],
        vectors=dset.vectors[keep],
    )


def split_by_threshold(dset: DescriptorSet, threshold: float) -> tuple[DescriptorSet, DescriptorSet]:
    """Partition into (salient, non-salient) by weight >= threshold."""
    if not dset.weights_attached:
        raise ValueError("split requires attached saliency weights")
    if not (0.0 <= threshold <= 1.0):
        raise ValueError("threshold must lie in [0, 1]")
    mask = dset.weights >= threshold
    def _take(m):
        return replace(
            dset,
            xs=dset.xs[m],
            ys=dset.ys[m],
            scales=dset.scales[m],
            weights=dset.weights[m],
            vectors=dset.vectors[m],
        )
    return _take(mask), _take(~mask)


# ---------------------------------------------------------------------------
# Binary dump format


def save_descriptors(dset: DescriptorSet, path) -> None:
    """Write the binary dump: magic, count, dim, then per-entry records.

    Each record is float32 x, y, scale, weight followed by the float32
    vector; everything little-endian.
    """
    n = len(dset)
    rows = np.empty((n, 4 + DESCRIPTOR_DIM), dtype="<f4")
    rows[:, 0] = dset.xs
    rows[:, 1] = dset.ys
    rows[:, 2] = dset.scales
    rows[:, 3] = dset.weights
    rows[:, 4:] = dset.vectors
    with open(path, "wb") as fh:
        fh.write(_DSET_MAGIC)
        fh.write(struct.pack("<II", n, DESCRIPTOR_DIM))
        fh.write(rows.tobytes())


def read_descriptor_records(path) -> np.ndarray:
    """Read a descriptor dump into an (N, 4+dim) float32 record array."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _DSET_MAGIC:
            raise DataError(f"not a descriptor dump (bad magic): {path}")
        n, dim = struct.unpack("<II", fh.read(8))
        payload = fh.read()
    expected = n * (4 + dim) * 4
    if len(payload) != expected:
        raise DataError(f"truncated descriptor dump: {path}")
    return np.frombuffer(payload, dtype="<f4").reshape(n, 4 + dim).copy()


def load_descriptors(path, image_dims: tuple[int, int]) -> DescriptorSet:
    """Load a dump back into a DescriptorSet (dims are not stored in the file)."""
    rows = read_descriptor_records(path)
    return DescriptorSet(
        xs=rows[:, 0].copy(),
        ys=rows[:, 1].copy(),
        scales=rows[:, 2].copy(),
        weights=rows[:, 3].copy(),
        vectors=rows[:, 4:].copy(),
        image_dims=image_dims,
        weights_attached=True,
    )
