"""Bottom-up saliency maps: center-surround conspicuity, center bias, external maps.

Three sources of saliency are supported and all produce the same currency,
a per-pixel map normalized so its maximum is 1 (identically-zero maps stay
zero): a native multi-channel center-surround model, a centered Gaussian
modeling photographer's bias, and 8-bit grayscale map files computed by
external tools.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .core import ImagePlane, resize_bilinear
from .errors import DataError

# Center-surround scale pairs: center level c against surround level c + delta.
_CENTER_LEVELS = (2, 3, 4)
_SURROUND_DELTAS = (3, 4)
_PYRAMID_LEVELS = 9
_OUTPUT_LEVEL = 4  # across-scale sums are accumulated at this pyramid level
_MIN_SIDE = 2 ** (_PYRAMID_LEVELS - 1)  # shortest side needed for a full pyramid

# Gabor bank constants (conventional values; even phase only).
_GABOR_WAVELENGTH = 7.0
_GABOR_SIGMA = 2.8
_GABOR_ORIENTATIONS = (0.0, 45.0, 90.0, 135.0)

_LOCAL_MAX_THRESHOLD = 0.05


@dataclass(frozen=True)
class SaliencyMap:
    """Per-pixel salience in [0, 1], max exactly 1 unless identically zero."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise ValueError("saliency map must be a 2-D array")
        vmax = float(v.max()) if v.size else 0.0
        vmin = float(v.min()) if v.size else 0.0
        if vmin < 0.0 or vmax > 1.0:
            raise ValueError("saliency values must lie in [0, 1]")
        if vmax != 1.0 and vmax != 0.0:
            raise ValueError("saliency map must have max 1 (or be all zero)")
        v.setflags(write=False)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def normalize_max1(raw: np.ndarray) -> SaliencyMap:
    """Divide by the maximum so the peak is exactly 1; zero maps pass through."""
    arr = np.asarray(raw, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError("saliency values must be finite")
    if arr.size and float(arr.min()) < 0.0:
        raise ValueError("saliency values must be non-negative")
    mx = float(arr.max()) if arr.size else 0.0
    if mx > 0.0:
        arr = arr / mx
    return SaliencyMap(arr)


def gaussian_center_saliency(width: int, height: int) -> SaliencyMap:
    """Centered Gaussian blob with sigma = dimension/4 on each axis.

    Models the tendency of photographs to place subjects near the frame
    center. The map is max-normalized, so for even dimensions (where no
    pixel sits exactly at the continuous center) the peak pixels are
    lifted to exactly 1.
    """
    if width < 1 or height < 1:
        raise ValueError("width and height must be >= 1")
    cx = (width - 1) / 2.0
    cy = (height - 1) / 2.0
    sx = width / 4.0
    sy = height / 4.0
    dx2 = ((np.arange(width) - cx) ** 2) / (2.0 * sx * sx)
    dy2 = ((np.arange(height) - cy) ** 2) / (2.0 * sy * sy)
    raw = np.exp(-(dy2[:, None] + dx2[None, :]))
    return normalize_max1(raw)


def load_external_saliency(path: str | Path, target: tuple[int, int]) -> SaliencyMap:
    """Read an 8-bit grayscale map file, resize to ``target`` (w, h), normalize.

    Supports maps produced by external saliency tools; files must be
    single-channel 8-bit PNG or PGM.
    """
    p = Path(path)
    if not p.is_file():
        raise DataError(f"saliency map file not found: {p}")
    try:
        with Image.open(p) as img:
            img.load()
            if img.mode != "L":
                raise DataError(f"saliency map must be 8-bit grayscale: {p} (mode {img.mode})")
            arr = np.asarray(img, dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DataError(f"cannot decode saliency map: {p} ({exc})") from exc
    w, h = target
    arr = np.clip(resize_bilinear(arr, h, w), 0.0, 1.0)
    return normalize_max1(arr)


# ---------------------------------------------------------------------------
# Center-surround model


def peak_normalize(arr: np.ndarray) -> np.ndarray:
    """Map-promotion operator: favor maps with one strong isolated peak.

    Scales the map to [0, 1] and multiplies by (1 - mean of competing
    local maxima)^2, where competing maxima are 8-neighborhood maxima at
    or above 0.05, excluding the global peak itself. A single-peak map is
    passed through at full strength; a map of many equal peaks is
    suppressed.
    """
    arr = np.asarray(arr, dtype=np.float64)
    mx = float(arr.max()) if arr.size else 0.0
    if mx <= 0.0:
        return np.zeros_like(arr)
    scaled = arr / mx
    is_peak = (ndimage.maximum_filter(scaled, size=3, mode="constant", cval=0.0) == scaled)
    is_peak &= scaled >= _LOCAL_MAX_THRESHOLD
    flat = is_peak.ravel()
    flat_vals = scaled.ravel()
    global_idx = int(np.argmax(flat_vals))
    peak_idx = np.flatnonzero(flat)
    peak_idx = peak_idx[peak_idx != global_idx]
    mean_other = float(flat_vals[peak_idx].mean()) if peak_idx.size else 0.0
    return scaled * (1.0 - mean_other) ** 2


_BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _downsample(arr: np.ndarray) -> np.ndarray:
    smooth = ndimage.correlate1d(arr, _BINOMIAL, axis=0, mode="reflect")
    smooth = ndimage.correlate1d(smooth, _BINOMIAL, axis=1, mode="reflect")
    return smooth[::2, ::2]


def _pyramid(arr: np.ndarray, levels: int = _PYRAMID_LEVELS) -> list[np.ndarray]:
    pyr = [arr]
    for _ in range(levels - 1):
        pyr.append(_downsample(pyr[-1]))
    return pyr


@lru_cache(maxsize=1)
def _gabor_bank() -> tuple[np.ndarray, ...]:
    radius = int(np.ceil(3.0 * _GABOR_SIGMA))
    coords = np.arange(-radius, radius + 1, dtype=np.float64)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    bank = []
    for deg in _GABOR_ORIENTATIONS:
        theta = np.deg2rad(deg)
        xr = xx * np.cos(theta) + yy * np.sin(theta)
        yr = -xx * np.sin(theta) + yy * np.cos(theta)
        env = np.exp(-(xr**2 + yr**2) / (2.0 * _GABOR_SIGMA**2))
        kernel = env * np.cos(2.0 * np.pi * xr / _GABOR_WAVELENGTH)
        kernel -= kernel.mean()  # zero DC response
        bank.append(kernel)
    return tuple(bank)


def _pad_min_side(arr: np.ndarray, target: int) -> tuple[np.ndarray, int, int]:
    """Reflect-pad axes 0/1 until both reach ``target``; returns (padded, top, left)."""
    top = left = 0
    extra = ((0, 0),) * (arr.ndim - 2)
    while min(arr.shape[:2]) < target:
        need_y = max(0, target - arr.shape[0])
        need_x = max(0, target - arr.shape[1])
        # np.pad reflect requires pad < dim; grow in chunks
        py = min((need_y + 1) // 2, max(arr.shape[0] - 1, 1)) if need_y else 0
        px = min((need_x + 1) // 2, max(arr.shape[1] - 1, 1)) if need_x else 0
        mode = "reflect" if min(arr.shape[:2]) > 1 else "edge"
        arr = np.pad(arr, ((py, py), (px, px)) + extra, mode=mode)
        top += py
        left += px
    return arr, top, left


def _resample_levels(arr: np.ndarray, out_shape: tuple[int, int], level_diff: int) -> np.ndarray:
    """Bilinear resample between pyramid levels.

    Dyadic decimation keeps even indices, so a level-k sample i sits at
    source position 2^k * i; mapping destination index j at level Ld to
    source index j * 2^(Ld - Ls) keeps maps origin-aligned (a half-pixel
    image convention would shift peaks by (2^k - 1)/2 pixels).
    """
    factor = 2.0**level_diff
    out_h, out_w = out_shape

    def _axis(n_in: int, n_out: int):
        pos = np.clip(np.arange(n_out) * factor, 0.0, n_in - 1.0)
        lo = np.floor(pos).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, wr = _axis(arr.shape[0], out_h)
    c0, c1, wc = _axis(arr.shape[1], out_w)
    rows = arr[r0] + wr[:, None] * (arr[r1] - arr[r0])
    return rows[:, c0] + wc[None, :] * (rows[:, c1] - rows[:, c0])


def _center_surround(pyr: list[np.ndarray]) -> list[tuple[np.ndarray, int]]:
    """|center - upsampled surround| for all (c, c+delta) pairs, tagged by level."""
    maps = []
    for c in _CENTER_LEVELS:
        for d in _SURROUND_DELTAS:
            s = c + d
            up = _resample_levels(pyr[s], pyr[c].shape, c - s)
            maps.append((np.abs(pyr[c] - up), c))
    return maps


def _opponency_cs(pyr_a: list[np.ndarray], pyr_b: list[np.ndarray]) -> list[tuple[np.ndarray, int]]:
    """Double-opponent center-surround: |(A_c - B_c) - (B_s - A_s) upsampled|."""
    maps = []
    for c in _CENTER_LEVELS:
        for d in _SURROUND_DELTAS:
            s = c + d
            center = pyr_a[c] - pyr_b[c]
            surround = _resample_levels(pyr_b[s] - pyr_a[s], pyr_a[c].shape, c - s)
            maps.append((np.abs(center - surround), c))
    return maps


def _sum_at_output(maps: list[tuple[np.ndarray, int]], shape: tuple[int, int]) -> np.ndarray:
    total = np.zeros(shape)
    for m, level in maps:
        total += _resample_levels(peak_normalize(m), shape, _OUTPUT_LEVEL - level)
    return total


def itti_saliency(img: ImagePlane) -> SaliencyMap:
    """Multi-channel center-surround saliency.

    Builds a 9-level dyadic Gaussian pyramid over intensity, broadband
    color opponency channels (zero for grayscale input), and even-phase
    Gabor responses at four orientations. Center-surround differences are
    taken at center levels {2,3,4} against surrounds 3 and 4 levels
    coarser, promoted with :func:`peak_normalize`, summed at pyramid
    level 4 per channel, and the per-channel conspicuity maps are
    promoted again and averaged. Images with a short side below 256 px
    are reflect-padded so the full pyramid exists; the result is cropped
    back, upsampled bilinearly, and max-normalized.
    """
    padded, top, left = _pad_min_side(img.data, _MIN_SIDE)
    if padded.ndim == 3:
        rp, gp, bp = padded[..., 0], padded[..., 1], padded[..., 2]
        intensity = (rp + gp + bp) / 3.0
    else:
        rp = gp = bp = None
        intensity = padded
    ph, pw = intensity.shape

    int_pyr = _pyramid(intensity)
    out_shape = int_pyr[_OUTPUT_LEVEL].shape

    # Intensity conspicuity
    con_int = _sum_at_output(_center_surround(int_pyr), out_shape)

    # Color conspicuity: broadband R, G, B, Y channels, negatives clipped
    if rp is not None:
        cr = np.clip(rp - (gp + bp) / 2.0, 0.0, None)
        cg = np.clip(gp - (rp + bp) / 2.0, 0.0, None)
        cb = np.clip(bp - (rp + gp) / 2.0, 0.0, None)
        cy = np.clip((rp + gp) / 2.0 - np.abs(rp - gp) / 2.0 - bp, 0.0, None)
        rg_maps = _opponency_cs(_pyramid(cr), _pyramid(cg))
        by_maps = _opponency_cs(_pyramid(cb), _pyramid(cy))
        con_col = _sum_at_output(rg_maps, out_shape) + _sum_at_output(by_maps, out_shape)
    else:
        con_col = np.zeros(out_shape)

    # Orientation conspicuity: per-orientation sums promoted before adding
    con_ori = np.zeros(out_shape)
    for kernel in _gabor_bank():
        ori_pyr = [
            np.abs(ndimage.correlate(level, kernel, mode="nearest"))
            for level in int_pyr
        ]
        per_theta = _sum_at_output(_center_surround(ori_pyr), out_shape)
        con_ori += peak_normalize(per_theta)

    combined = (
        peak_normalize(con_int) + peak_normalize(con_col) + peak_normalize(con_ori)
    ) / 3.0

    full = _resample_levels(combined, (ph, pw), -_OUTPUT_LEVEL)
    cropped = full[top : top + img.height, left : left + img.width]
    return normalize_max1(np.clip(cropped, 0.0, None))


# ---------------------------------------------------------------------------
# Model ids


def parse_model_id(model_str: str) -> tuple[str, str | None]:
    """Split a model string into (kind, external map directory or None).

    Accepted forms: ``itti``, ``gauss``, ``external:<dir>``.
    """
    if model_str in ("itti", "gauss"):
        return model_str, None
    if model_str.startswith("external:"):
        directory = model_str.split(":", 1)[1]
        if not directory:
            raise ValueError("external model needs a directory: external:<dir>")
        return "external", directory
    raise ValueError(f"unknown saliency model: {model_str!r}")


def external_map_path(directory: str | Path, image_path: str | Path) -> Path:
    """Locate the map file paired with an image: ``<dir>/<stem>.png`` or ``.pgm``."""
    stem = Path(image_path).stem
    for ext in (".png", ".pgm"):
        candidate = Path(directory) / (stem + ext)
        if candidate.is_file():
            return candidate
    raise DataError(
        f"no external saliency map for {image_path} under {directory} "
        f"(expected {stem}.png or {stem}.pgm)"
    )


def compute_saliency(model: str, img: ImagePlane, image_path: str | Path | None = None) -> SaliencyMap:
    """Dispatch on a model string; external maps are paired by file stem."""
    kind, directory = parse_model_id(model)
    if kind == "itti":
        return itti_saliency(img)
    if kind == "gauss":
        return gaussian_center_saliency(img.width, img.height)
    if image_path is None:
        raise ValueError("external saliency requires the source image path")
    map_path = external_map_path(directory, image_path)
    return load_external_saliency(map_path, (img.width, img.height))
