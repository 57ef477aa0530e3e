"""Confusion counting, pooled IoU, calibration error, the 10 m inference
protocol, PNG rendering and report files."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import DegenerateInputError, SchemaError
from .model import SegNet, forward, predict_probs, softmax_probs
from .raster import (CLOUD, DRY, INVALID, WATER, ClassMask, Raster, check_same_shape,
                     resample)

PROB_THRESHOLD = 0.5
TARGET_RESOLUTION_M = 16.0
REPORT_FIELDS = ("split", "n_images", "tp", "fp", "fn", "tn", "iou", "ece")

COLORS = {
    DRY: (0, 128, 0),
    WATER: (0, 0, 255),
    CLOUD: (255, 255, 255),
    INVALID: (0, 0, 0),
}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _codes(x) -> np.ndarray:
    return x.codes if isinstance(x, ClassMask) else np.asarray(x)


def confusion(pred: ClassMask | np.ndarray, truth: ClassMask | np.ndarray) -> ConfusionCounts:
    """Water-vs-dry counts over pixels whose truth is DRY or WATER."""
    p, t = _codes(pred), _codes(truth)
    check_same_shape(p, t)
    scored = t < CLOUD
    pw = (p == WATER) & scored
    tw = (t == WATER) & scored
    tp = np.count_nonzero(pw & tw)
    fp = np.count_nonzero(pw & ~tw)
    fn = np.count_nonzero(~pw & tw)
    tn = np.count_nonzero(scored) - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def pooled_iou(counts: Iterable[ConfusionCounts]) -> float:
    """sum(TP) / sum(TP + FP + FN) across images (micro average)."""
    total = sum(counts, ConfusionCounts())
    den = total.tp + total.fp + total.fn
    if den == 0:
        raise DegenerateInputError("IoU undefined: no water predicted or present")
    return total.tp / den


def probs_to_mask(water_prob: np.ndarray, threshold: float = PROB_THRESHOLD) -> np.ndarray:
    return np.where(water_prob > threshold, WATER, DRY).astype(np.uint8)


def ece(water_prob: np.ndarray, truth: ClassMask | np.ndarray, n_bins: int = 10) -> float:
    """Expected calibration error of the predicted class over scored pixels.

    Confidence is the probability of the predicted class; bins split [0, 1]
    into ``n_bins`` equal intervals, the last one closed.
    """
    t = _codes(truth)
    check_same_shape(water_prob, t)
    scored = t < CLOUD
    if not scored.any():
        raise DegenerateInputError("no scored pixels for calibration error")
    p = np.asarray(water_prob, np.float64)[scored]
    pred_water = p > PROB_THRESHOLD
    conf = np.where(pred_water, p, 1 - p)
    correct = pred_water == (t[scored] == WATER)
    bins = np.minimum((conf * n_bins).astype(int), n_bins - 1)
    n = conf.size
    err = 0.0
    for b in range(n_bins):
        sel = bins == b
        if sel.any():
            err += sel.sum() / n * abs(correct[sel].mean() - conf[sel].mean())
    return float(err)


# ---------------------------------------------------------------------------
# inference

def infer_10m(net: SegNet, s1_10m: Raster, target_resolution_m: float = TARGET_RESOLUTION_M
              ) -> np.ndarray:
    """Run a model trained at 16 m on a finer-resolution normalised SAR raster.

    The raster is bilinearly downsampled to the training resolution, passed
    through the network, and the class probabilities are bilinearly
    upsampled back and renormalised per pixel. Returns (H, W, 2).
    """
    h, w = s1_10m.shape
    out_w = int(round(w * s1_10m.resolution_m / target_resolution_m))
    out_h = int(round(h * s1_10m.resolution_m / target_resolution_m))
    if out_w < 16 or out_h < 16 or out_w % 16 or out_h % 16:
        raise SchemaError(f"downsampled grid {out_h}x{out_w} is not a multiple of 16")
    small = resample(s1_10m, out_w, out_h, "bilinear")
    x = small.hwc()
    if x.shape[-1] != net.config.in_channels:
        raise SchemaError(f"raster has {x.shape[-1]} bands, network expects {net.config.in_channels}")
    probs = softmax_probs(forward(net, x)[0])
    up = resample(Raster.from_hwc(("p_dry", "p_water"), probs, small.resolution_m), w, h,
                  "bilinear").hwc().astype(np.float64)
    return up / up.sum(axis=-1, keepdims=True)


def evaluate_samples(net: SegNet, samples: Sequence, bands: str = "S1"):
    """Per-image confusion counts and water probabilities for labelled samples."""
    if not samples:
        return [], []
    x = np.stack([s.inputs(bands) for s in samples])
    probs = predict_probs(net, x)[..., 1]
    counts = [confusion(probs_to_mask(p), s.label) for p, s in zip(probs, samples)]
    return counts, list(probs)


def pooled_ece(probs: Sequence[np.ndarray], truths: Sequence[ClassMask], n_bins: int = 10) -> float:
    """Calibration error with all images pooled into one pixel set."""
    p = np.concatenate([np.ravel(x) for x in probs])[None]
    t = np.concatenate([np.ravel(_codes(m)) for m in truths])[None]
    return ece(p, t, n_bins)


# ---------------------------------------------------------------------------
# outputs

def render_png(mask_or_probs, path: str | Path) -> None:
    """Write a class mask (colour coded) or water probabilities (blue ramp) as RGB PNG."""
    if isinstance(mask_or_probs, ClassMask) or np.issubdtype(np.asarray(mask_or_probs).dtype, np.integer):
        codes = _codes(mask_or_probs)
        if codes.ndim != 2 or codes.max(initial=0) > INVALID:
            raise SchemaError("mask must be a 2-D grid of class codes")
        palette = np.array([COLORS[c] for c in range(4)], np.uint8)
        rgb = palette[codes]
    else:
        p = np.asarray(mask_or_probs, np.float64)
        if p.ndim == 3 and p.shape[-1] == 2:
            p = p[..., 1]
        if p.ndim != 2:
            raise SchemaError("probabilities must be (H, W) or (H, W, 2)")
        rgb = np.zeros(p.shape + (3,), np.uint8)
        rgb[..., 2] = np.round(np.clip(p, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")


def report_row(split: str, counts: Sequence[ConfusionCounts], ece_value: float) -> dict:
    total = sum(counts, ConfusionCounts())
    try:
        iou = pooled_iou(counts)
    except DegenerateInputError:
        iou = float("nan")
    return {"split": split, "n_images": len(counts), "tp": total.tp, "fp": total.fp,
            "fn": total.fn, "tn": total.tn, "iou": f"{iou:.6f}", "ece": f"{ece_value:.6f}"}


def write_report(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
