from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy import ndimage
from skimage.morphology import disk

from .errors import DataError
from .imagecore import ChannelPair, merge_channels


logger = logging.getLogger(__name__)

HIST_BINS = 256


@dataclass(frozen=True)
class BaselineConfig:
    merge_ratio: float = 0.5
    denoise_sigma: float = 1.0
    tophat_radius: int = 30
    min_component_size: int = 3
    connectivity: int = 8
    footprint: str = "disk"      # "disk" | "square"
    min_contrast: float = 0.05   # class-mean gap below which the scene counts as carbide-free

    def __post_init__(self) -> None:
        if not 0.0 <= self.merge_ratio <= 1.0:
            raise DataError(f"merge_ratio must lie in [0, 1], got {self.merge_ratio}")
        if self.denoise_sigma <= 0:
            raise DataError(f"denoise_sigma must be > 0, got {self.denoise_sigma}")
        if self.tophat_radius < 1:
            raise DataError(f"tophat_radius must be >= 1, got {self.tophat_radius}")
        if self.min_component_size < 1:
            raise DataError(f"min_component_size must be >= 1, got {self.min_component_size}")
        if self.connectivity not in (4, 8):
            raise DataError(f"connectivity must be 4 or 8, got {self.connectivity}")
        if self.footprint not in ("disk", "square"):
            raise DataError(f"footprint must be 'disk' or 'square', got {self.footprint!r}")
        if self.min_contrast < 0:
            raise DataError(f"min_contrast must be >= 0, got {self.min_contrast}")


def connectivity_structure(connectivity: int) -> np.ndarray:
    if connectivity == 8:
        return np.ones((3, 3), dtype=bool)
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    raise DataError(f"connectivity must be 4 or 8, got {connectivity}")


# -----------------------------
# Denoising
# -----------------------------

def gaussian_kernel(sigma: float) -> np.ndarray:
    """1-D kernel with radius ceil(3*sigma), normalized to unit sum."""
    if sigma <= 0:
        raise DataError(f"sigma must be > 0, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian with replicate borders; output clamped to [0, 1]."""
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(np.asarray(img, dtype=np.float64), k, axis=0, mode="nearest")
    out = ndimage.correlate1d(out, k, axis=1, mode="nearest")
    return np.clip(out, 0.0, 1.0)


# -----------------------------
# Morphology
# -----------------------------

def structuring_element(radius: int, shape: str = "disk") -> np.ndarray:
    """Exact discrete disk {dx^2 + dy^2 <= r^2}, or the (2r+1)^2 square."""
    if radius < 1:
        raise DataError(f"radius must be >= 1, got {radius}")
    if shape == "disk":
        return disk(radius).astype(bool)
    if shape == "square":
        return np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    raise DataError(f"Unknown structuring element {shape!r}")


def _chord_half_widths(footprint: np.ndarray) -> List[int]:
    """Half-width of the centered horizontal run in every footprint row."""
    r = footprint.shape[1] // 2
    widths = []
    for row in footprint:
        cols = np.flatnonzero(row)
        half = int(max(r - cols[0], cols[-1] - r)) if cols.size else -1
        widths.append(half)
    return widths


def _chord_filter(
    img: np.ndarray,
    footprint: np.ndarray,
    line_filter: Callable[..., np.ndarray],
    combine: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray],
    fill: float,
) -> np.ndarray:
    """
    Min/max over a row-convex symmetric footprint, decomposed into horizontal
    chords. Each distinct chord width costs one O(1)-per-pixel running extremum
    (scipy's 1-D filters), and rows are combined by shifted slices, so the cost
    per pixel is O(radius) instead of O(radius^2). Pixels outside the image are
    ignored; replicate padding along a row is equivalent for contiguous chords.
    """
    h = img.shape[0]
    r = footprint.shape[0] // 2
    widths = _chord_half_widths(footprint)
    out = np.full(img.shape, fill, dtype=img.dtype)
    for half in sorted(set(w for w in widths if w >= 0)):
        rows = line_filter(img, size=2 * half + 1, axis=1, mode="nearest")
        for k, w in enumerate(widths):
            if w != half:
                continue
            dy = k - r
            if abs(dy) >= h:
                continue
            if dy >= 0:
                combine(out[:h - dy], rows[dy:], out=out[:h - dy])
            else:
                combine(out[-dy:], rows[:h + dy], out=out[-dy:])
    return out


def grey_erosion(img: np.ndarray, footprint: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return _chord_filter(img, footprint, ndimage.minimum_filter1d, np.minimum, np.inf)


def grey_dilation(img: np.ndarray, footprint: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return _chord_filter(img, footprint, ndimage.maximum_filter1d, np.maximum, -np.inf)


def grey_opening(img: np.ndarray, footprint: np.ndarray) -> np.ndarray:
    return grey_dilation(grey_erosion(img, footprint), footprint)


def white_tophat(img: np.ndarray, radius: int, shape: str = "disk") -> np.ndarray:
    """img - opening(img); non-negative and never above the input."""
    img = np.asarray(img, dtype=np.float64)
    if radius > min(img.shape) / 2:
        logger.warning(
            "Top-hat radius %d exceeds half the image size %s; background estimate covers the whole image",
            radius, img.shape,
        )
    opened = grey_opening(img, structuring_element(radius, shape))
    return np.maximum(img - opened, 0.0)


# -----------------------------
# Thresholding
# -----------------------------

def intensity_bins(img: np.ndarray) -> np.ndarray:
    """256-bin index of every pixel over [0, 1]; bin k holds [k/256, (k+1)/256), the last bin is closed."""
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * HIST_BINS), 0, HIST_BINS - 1).astype(np.int64)


def otsu_threshold_from_histogram(counts: np.ndarray) -> int:
    """
    Index k of the first bin of the upper class, minimizing the weighted
    intra-class variance. Exact integer arithmetic on bin centers 2i+1, so
    ties resolve to the lowest k deterministically.
    """
    counts = [int(c) for c in counts]
    if sum(1 for c in counts if c > 0) < 2:
        raise DataError("Otsu threshold undefined: fewer than two occupied histogram bins")
    total_n = sum(counts)
    total_a = sum(c * (2 * i + 1) for i, c in enumerate(counts))

    best_k = -1
    best_num, best_den = 0, 1
    n0 = a0 = 0
    for k in range(1, len(counts)):
        n0 += counts[k - 1]
        a0 += counts[k - 1] * (2 * k - 1)
        n1 = total_n - n0
        if n0 == 0 or n1 == 0:
            continue
        a1 = total_a - a0
        # Maximize a0^2/n0 + a1^2/n1 (equivalent to minimizing within-class variance).
        num = a0 * a0 * n1 + a1 * a1 * n0
        den = n0 * n1
        if best_k < 0 or num * best_den > best_num * den:
            best_k, best_num, best_den = k, num, den
    return best_k


def otsu_threshold(img: np.ndarray) -> float:
    """Bin-boundary threshold t = k/256; foreground is img >= t."""
    counts = np.bincount(intensity_bins(img).ravel(), minlength=HIST_BINS)
    return otsu_threshold_from_histogram(counts) / HIST_BINS


# -----------------------------
# Binary post-processing
# -----------------------------

def fill_holes(mask: np.ndarray) -> np.ndarray:
    """Background not 4-connected to the border becomes foreground."""
    return ndimage.binary_fill_holes(np.asarray(mask, dtype=bool))


def remove_small(mask: np.ndarray, min_size: int = 3, connectivity: int = 8) -> np.ndarray:
    """Erase connected components with fewer than min_size pixels."""
    if min_size < 1:
        raise DataError(f"min_size must be >= 1, got {min_size}")
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=connectivity_structure(connectivity))
    if n == 0:
        return mask.copy()
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_size
    keep[0] = False
    return keep[labels]


# -----------------------------
# Pipelines
# -----------------------------

def baseline_stages(pair: ChannelPair, cfg: BaselineConfig) -> Dict[str, np.ndarray]:
    """Every intermediate of the classical pipeline, keyed by stage name."""
    merged = merge_channels(pair, cfg.merge_ratio).data
    blurred = gaussian_blur(merged, cfg.denoise_sigma)
    background_free = white_tophat(blurred, cfg.tophat_radius, cfg.footprint)

    try:
        t = otsu_threshold(background_free)
    except DataError:
        logger.info("Top-hat image has a single occupied bin; no carbides segmented")
        empty = np.zeros(merged.shape, dtype=bool)
        return {"merged": merged, "blurred": blurred, "tophat": background_free,
                "thresholded": empty, "filled": empty, "mask": empty}

    thresholded = background_free >= t
    fg = background_free[thresholded]
    bg = background_free[~thresholded]
    if fg.mean() - bg.mean() < cfg.min_contrast:
        logger.info("Otsu classes differ by %.4f < min_contrast %.4f; treating scene as carbide-free",
                    fg.mean() - bg.mean(), cfg.min_contrast)
        thresholded = np.zeros(merged.shape, dtype=bool)

    filled = fill_holes(thresholded)
    mask = remove_small(filled, cfg.min_component_size, cfg.connectivity)
    logger.debug("Baseline threshold %.4f, foreground fraction %.4f", t, mask.mean())
    return {"merged": merged, "blurred": blurred, "tophat": background_free,
            "thresholded": thresholded, "filled": filled, "mask": mask}


def baseline_segment(pair: ChannelPair, cfg: Optional[BaselineConfig] = None) -> np.ndarray:
    """merge -> blur -> white top-hat -> Otsu (contrast-gated) -> fill holes -> remove small components."""
    return baseline_stages(pair, cfg or BaselineConfig())["mask"]


def draft_mask(pair: ChannelPair, ratio: float = 0.5, threshold: Optional[float] = None) -> np.ndarray:
    """
    Annotation starting point: the merged channels thresholded at a fixed gray
    value, or at Otsu when none is given. Meant for manual correction.
    """
    merged = merge_channels(pair, ratio).data
    t = otsu_threshold(merged) if threshold is None else float(threshold)
    return merged >= t
