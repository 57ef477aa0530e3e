"""Weak-label production and correction, Otsu thresholding and edge weights."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateInputError
from .raster import CLOUD, DRY, WATER, ClassMask, Raster, check_same_shape

DEFAULT_CLOUD_RADIUS = 3
DEFAULT_OCC_THRESHOLD = 0.5
DEFAULT_W_INNER = 10.0
DEFAULT_W_OUTER = 5.0


# ---------------------------------------------------------------------------
# binary morphology, 3x3 square structuring element

def _shift_reduce(mask: np.ndarray, border: bool, op) -> np.ndarray:
    padded = np.pad(mask, 1, constant_values=border)
    h, w = mask.shape
    out = padded[1:h + 1, 1:w + 1].copy()
    for dr in range(3):
        for dc in range(3):
            if dr == 1 and dc == 1:
                continue
            op(out, padded[dr:dr + h, dc:dc + w], out=out)
    return out


def dilate(mask: np.ndarray, iterations: int = 1, border_value: bool = False) -> np.ndarray:
    """Binary dilation with a 3x3 square, repeated ``iterations`` times.

    Pixels outside the grid take ``border_value``.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    out = np.asarray(mask, dtype=bool)
    for _ in range(iterations):
        out = _shift_reduce(out, border_value, np.logical_or)
    return out.copy() if iterations == 0 else out


def erode(mask: np.ndarray, iterations: int = 1, border_value: bool = False) -> np.ndarray:
    """Binary erosion with a 3x3 square; the dual of :func:`dilate`."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    out = np.asarray(mask, dtype=bool)
    for _ in range(iterations):
        out = _shift_reduce(out, border_value, np.logical_and)
    return out.copy() if iterations == 0 else out


# ---------------------------------------------------------------------------
# weak labels

def dilate_cloud_mask(mask: ClassMask, radius: int = DEFAULT_CLOUD_RADIUS) -> ClassMask:
    """Grow CLOUD by ``radius`` pixels (Chebyshev distance) to cover shadows."""
    if radius < 0:
        raise ConfigError("radius must be >= 0")
    grown = dilate(mask.codes == CLOUD, radius)
    codes = np.where(grown, CLOUD, mask.codes).astype(np.uint8)
    return ClassMask(codes, mask.resolution_m)


def weak_label_from_ndwi(ndwi: Raster, cloud: ClassMask) -> ClassMask:
    """Threshold NDWI at 0: strictly positive is WATER. Cloud/invalid codes win."""
    index = ndwi.band("NDWI") if "NDWI" in ndwi.names else ndwi.data[0]
    check_same_shape(index, cloud)
    codes = np.where(index > 0, WATER, DRY).astype(np.uint8)
    ignored = cloud.codes >= CLOUD
    codes[ignored] = cloud.codes[ignored]
    return ClassMask(codes, cloud.resolution_m)


def improve_weak_label(weak: ClassMask, occ: Raster,
                       threshold: float = DEFAULT_OCC_THRESHOLD) -> ClassMask:
    """Mark DRY pixels as WATER where long-term water occurrence exceeds ``threshold``.

    Only DRY pixels can change, so the water set never shrinks.
    """
    prob = occ.band("occurrence") if "occurrence" in occ.names else occ.data[0]
    check_same_shape(weak, prob)
    codes = weak.codes.copy()
    codes[(codes == DRY) & (np.clip(prob, 0.0, 1.0) > threshold)] = WATER
    return ClassMask(codes, weak.resolution_m)


# ---------------------------------------------------------------------------
# Otsu

def otsu_threshold(band: Raster | np.ndarray, n_bins: int = 256) -> float:
    """Histogram threshold maximising the between-class variance.

    The histogram spans [min, max] of the finite values in ``n_bins`` equal
    bins; candidate thresholds are the interior bin edges and the value
    returned is the edge separating the two classes. Ties go to the lowest
    edge.
    """
    values = band.data[0] if isinstance(band, Raster) else np.asarray(band)
    values = values[np.isfinite(values)].astype(np.float64)
    if values.size == 0:
        raise DegenerateInputError("no finite values to threshold")
    lo, hi = values.min(), values.max()
    if lo == hi:
        raise DegenerateInputError("constant band has no threshold")
    counts, edges = np.histogram(values, bins=n_bins, range=(lo, hi))
    k = otsu_bin_split(counts, (edges[:-1] + edges[1:]) / 2)
    return float(edges[k])


def otsu_bin_split(counts: np.ndarray, centers: np.ndarray) -> int:
    """Index k maximising between-class variance for classes bins[:k] | bins[k:]."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    p = counts / total
    omega = np.cumsum(p)[:-1]
    mu = np.cumsum(p * centers)[:-1]
    mu_t = float(np.sum(p * centers))
    den = omega * (1.0 - omega)
    num = (mu_t * omega - mu) ** 2
    var = np.divide(num, den, out=np.zeros_like(num), where=den > 1e-15)
    best = var.max()
    # float-noise level differences count as ties
    return int(np.flatnonzero(var >= best * (1 - 1e-12))[0]) + 1


def otsu_segment(s1: Raster, band_name: str = "VV", n_bins: int = 256) -> ClassMask:
    """Label pixels darker than the Otsu threshold as WATER, the rest DRY."""
    values = s1.band(band_name)
    t = otsu_threshold(values, n_bins)
    codes = np.where(values < t, WATER, DRY).astype(np.uint8)
    return ClassMask(codes, s1.resolution_m)


# ---------------------------------------------------------------------------
# edges and weights

@dataclass(frozen=True)
class EdgeMaps:
    inner: np.ndarray
    outer: np.ndarray


def edge_maps(label: ClassMask, iterations: int = 1) -> EdgeMaps:
    """Inner edge = water minus eroded water; outer edge = dilated water minus water.

    Cloud and invalid pixels belong to neither.
    """
    water = label.codes == WATER
    valid = label.codes < CLOUD
    inner = water & ~erode(water, iterations) & valid
    outer = dilate(water, iterations) & ~water & valid
    return EdgeMaps(inner, outer)


def weight_map(label: ClassMask, w_inner: float = DEFAULT_W_INNER,
               w_outer: float = DEFAULT_W_OUTER, iterations: int = 1) -> np.ndarray:
    """Per-pixel loss weights: inner edge, outer edge, 1 elsewhere, 0 on ignored pixels."""
    if w_inner < 0 or w_outer < 0:
        raise ValueError("edge weights must be non-negative")
    edges = edge_maps(label, iterations)
    w = np.ones(label.shape, np.float32)
    w[edges.outer] = w_outer
    w[edges.inner] = w_inner
    w[label.codes >= CLOUD] = 0.0
    return w

