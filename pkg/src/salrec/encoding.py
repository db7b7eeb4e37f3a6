"""Visual codebooks via restarted k-means and spatial-pyramid histogram encoding."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .features import DescriptorSet

_SBOF_MAGIC = b"SBOF"
_SPMV_MAGIC = b"SPMV"

_KMEANS_MAX_ITER = 100
_KMEANS_TOL = 1e-4
_ASSIGN_CHUNK = 8192


@dataclass(frozen=True)
class Codebook:
    """k-means centers over descriptor space plus the training energy."""

    centers: np.ndarray  # (m, dim) float64
    energy: float
    seed: int

    def __post_init__(self):
        if self.centers.ndim != 2 or self.centers.shape[0] < 2:
            raise ValueError("codebook needs at least 2 centers")
        if len(np.unique(self.centers, axis=0)) != self.centers.shape[0]:
            raise ValueError("codebook centers must be distinct")
        if self.energy < 0:
            raise ValueError("energy must be non-negative")
        self.centers.setflags(write=False)

    @property
    def m(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


def _assign_chunked(X: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-center labels and squared distances, ties to the lowest index."""
    n = X.shape[0]
    labels = np.empty(n, dtype=np.intp)
    dists = np.empty(n)
    c_sq = np.einsum("ij,ij->i", centers, centers)
    for lo in range(0, n, _ASSIGN_CHUNK):
        chunk = X[lo : lo + _ASSIGN_CHUNK]
        d = chunk @ centers.T
        d *= -2.0
        d += c_sq[None, :]
        d += np.einsum("ij,ij->i", chunk, chunk)[:, None]
        np.maximum(d, 0.0, out=d)
        labels[lo : lo + _ASSIGN_CHUNK] = np.argmin(d, axis=1)
        dists[lo : lo + _ASSIGN_CHUNK] = d[np.arange(d.shape[0]), labels[lo : lo + _ASSIGN_CHUNK]]
    return labels, dists


def _kmeans_plusplus(X: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((m, X.shape[1]))
    first = int(rng.integers(n))
    centers[0] = X[first]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for k in range(1, m):
        total = d2.sum()
        if total <= 0:
            # degenerate sample: fall back to the first unused points
            used = {tuple(c) for c in centers[:k]}
            for row in X:
                if tuple(row) not in used:
                    centers[k] = row
                    break
            else:
                centers[k] = X[k % n]
            d2 = np.minimum(d2, np.sum((X - centers[k]) ** 2, axis=1))
            continue
        idx = int(rng.choice(n, p=d2 / total))
        centers[k] = X[idx]
        d2 = np.minimum(d2, np.sum((X - centers[k]) ** 2, axis=1))
    return centers


def _lloyd(X: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, float, list[float]]:
    """Lloyd iterations with farthest-point reseeding of empty clusters."""
    m = centers.shape[0]
    trace: list[float] = []
    for _ in range(_KMEANS_MAX_ITER):
        labels, dists = _assign_chunked(X, centers)
        trace.append(float(dists.sum()))
        new_centers = np.zeros_like(centers)
        counts = np.bincount(labels, minlength=m)
        for d in range(X.shape[1]):
            new_centers[:, d] = np.bincount(labels, weights=X[:, d], minlength=m)
        nonzero = counts > 0
        new_centers[nonzero] /= counts[nonzero, None]
        if not nonzero.all():
            taken: set[int] = set()
            farthest = np.argsort(-dists, kind="stable")
            for k in np.flatnonzero(~nonzero):
                for idx in farthest:
                    if int(idx) not in taken:
                        new_centers[k] = X[idx]
                        taken.add(int(idx))
                        break
        movement = float(np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max())
        centers = new_centers
        if movement < _KMEANS_TOL:
            break
    _, dists = _assign_chunked(X, centers)
    energy = float(dists.sum())
    trace.append(energy)
    return centers, energy, trace


def train_codebook(
    descriptors: np.ndarray,
    m: int = 600,
    restarts: int = 5,
    seed: int = 0,
    with_history: bool = False,
):
    """Run k-means ``restarts`` times and keep the lowest-energy codebook.

    Each restart is initialized with k-means++ from sub-seed ``seed + r``;
    Lloyd iterations stop when the largest center movement drops below
    1e-4 or after 100 rounds.
    """
    X = np.asarray(descriptors, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("descriptors must be a 2-D sample array")
    if not np.isfinite(X).all():
        raise ValueError("descriptor sample contains non-finite values")
    if X.shape[0] < m:
        raise ValueError(f"sample of {X.shape[0]} descriptors is smaller than m={m}")

    best: tuple[float, np.ndarray] | None = None
    history = []
    for r in range(restarts):
        rng = np.random.default_rng(seed + r)
        init = _kmeans_plusplus(X, m, rng)
        centers, energy, trace = _lloyd(X, init)
        history.append({"energy": energy, "trace": trace})
        if best is None or energy < best[0]:
            best = (energy, centers)
    cb = Codebook(centers=best[1], energy=best[0], seed=seed)
    if with_history:
        return cb, history
    return cb


def assign_batch(cb: Codebook, vectors: np.ndarray) -> np.ndarray:
    """Nearest-codeword index for each row; ties go to the lowest index."""
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != cb.dim:
        raise ValueError(f"vectors must be (n, {cb.dim})")
    labels, _ = _assign_chunked(X, cb.centers)
    return labels


def assign(cb: Codebook, vector: np.ndarray) -> int:
    """Nearest-codeword index for a single vector."""
    return int(assign_batch(cb, np.asarray(vector, dtype=np.float64)[None, :])[0])


@dataclass(frozen=True)
class SpmVector:
    """Concatenated multi-level codeword histogram for one image."""

    values: np.ndarray
    levels: int
    normalized: bool

    def __post_init__(self):
        if self.values.ndim != 1:
            raise ValueError("SPM vector must be 1-D")
        if self.values.size and float(self.values.min()) < 0:
            raise ValueError("SPM vector entries must be non-negative")
        self.values.setflags(write=False)


def spm_cells(levels: int) -> int:
    return sum(4**l for l in range(levels))


def _level_weights(levels: int) -> list[float]:
    # level 0 shares the weight of level 1; the finest level gets 1/2
    if levels == 1:
        return [1.0]
    return [2.0 ** (-(levels - 1))] + [2.0 ** (l - levels) for l in range(1, levels)]


def _spm_histogram(dset: DescriptorSet, cb: Codebook, levels: int, use_weights: bool) -> np.ndarray:
    """Raw (unnormalized) pyramid histogram; total mass = sum of contributions."""
    m = cb.m
    out = np.zeros(spm_cells(levels) * m)
    if len(dset) == 0:
        return out
    words = assign_batch(cb, dset.vectors.astype(np.float64))
    amounts = dset.weights.astype(np.float64) if use_weights else np.ones(len(dset))
    w_img, h_img = dset.image_dims
    xs = dset.xs.astype(np.float64)
    ys = dset.ys.astype(np.float64)
    offset = 0
    for l, lw in enumerate(_level_weights(levels)):
        grid = 2**l
        cx = np.clip(np.floor(xs * grid / w_img).astype(np.intp), 0, grid - 1)
        cy = np.clip(np.floor(ys * grid / h_img).astype(np.intp), 0, grid - 1)
        idx = (cy * grid + cx) * m + words
        hist = np.bincount(idx, weights=amounts, minlength=grid * grid * m)
        out[offset : offset + grid * grid * m] = hist * lw
        offset += grid * grid * m
    return out


def spm_encode(dset: DescriptorSet, cb: Codebook, levels: int = 3, use_weights: bool = False) -> SpmVector:
    """Spatial-pyramid encoding with level weights 1/4, 1/4, 1/2 (for 3 levels).

    Each descriptor contributes its weight (or 1) to the bin of its
    codeword in each level's containing cell; the concatenation is
    L1-normalized. Empty or all-zero-weight input yields the zero vector.
    """
    if dset.vectors.shape[1] != cb.dim and len(dset):
        raise ValueError(f"descriptor dim {dset.vectors.shape[1]} != codebook dim {cb.dim}")
    if levels < 1:
        raise ValueError("levels must be >= 1")
    raw = _spm_histogram(dset, cb, levels, use_weights)
    total = raw.sum()
    if total > 0:
        raw /= total
    return SpmVector(values=raw, levels=levels, normalized=True)


# ---------------------------------------------------------------------------
# Binary formats


def save_codebook(cb: Codebook, path) -> None:
    """Write the codebook file: magic, m, dim, seed, energy, float32 centers."""
    with open(path, "wb") as fh:
        fh.write(_SBOF_MAGIC)
        fh.write(struct.pack("<IIQd", cb.m, cb.dim, cb.seed, cb.energy))
        fh.write(cb.centers.astype("<f4").tobytes())


def load_codebook(path) -> Codebook:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _SBOF_MAGIC:
            raise DataError(f"not a codebook file (bad magic): {path}")
        m, dim, seed, energy = struct.unpack("<IIQd", fh.read(24))
        payload = fh.read()
    if len(payload) != m * dim * 4:
        raise DataError(f"truncated codebook file: {path}")
    centers = np.frombuffer(payload, dtype="<f4").reshape(m, dim).astype(np.float64)
    return Codebook(centers=centers, energy=energy, seed=seed)


def save_spm_vector(vec: SpmVector, path) -> None:
    """Write an encoded vector: magic, u32 length, float32 values."""
    with open(path, "wb") as fh:
        fh.write(_SPMV_MAGIC)
        fh.write(struct.pack("<I", vec.values.size))
        fh.write(vec.values.astype("<f4").tobytes())


def load_spm_vector(path, levels: int = 3) -> SpmVector:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _SPMV_MAGIC:
            raise DataError(f"not an SPM vector file (bad magic): {path}")
        (length,) = struct.unpack("<I", fh.read(4))
        payload = fh.read()
    if len(payload) != length * 4:
        raise DataError(f"truncated SPM vector file: {path}")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    total = values.sum()
    normalized = bool(abs(total - 1.0) < 1e-6 or total == 0.0)
    return SpmVector(values=values, levels=levels, normalized=normalized)
