"""Losses over two-class logits. Each returns the value and its gradient
with respect to the logits; pixels with zero weight never contribute."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DegenerateInputError, SchemaError
from .model import softmax_probs
from .raster import CLOUD, WATER, ClassMask, check_same_shape

TVERSKY_ALPHA = 0.7
TVERSKY_BETA = 0.3
TVERSKY_GAMMA = 0.75


class LossOutput(NamedTuple):
    value: float
    grad_logits: np.ndarray


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def weighted_ce(logits: np.ndarray, label: ClassMask, weights: np.ndarray) -> LossOutput:
    """Cross-entropy weighted per pixel and normalised by the total weight."""
    check_same_shape(logits, label, weights)
    w = np.where(label.codes >= CLOUD, 0.0, np.asarray(weights, dtype=np.float64))
    total = w.sum()
    if not total > 0:
        raise DegenerateInputError("all pixel weights are zero")
    onehot = np.stack([label.codes != WATER, label.codes == WATER], axis=-1)
    onehot &= (w > 0)[..., None]
    logp = _log_softmax(logits.astype(np.float64))
    value = -(w * (onehot * logp).sum(axis=-1)).sum() / total
    grad = (w / total)[..., None] * (np.exp(logp) - onehot)
    return LossOutput(float(value), grad.astype(logits.dtype))


def distill_kd(teacher_probs: np.ndarray, student_logits: np.ndarray,
               valid: np.ndarray | None = None) -> LossOutput:
    """Soft cross-entropy -sum_k p_t log p_s averaged over valid pixels.

    Differs from KL(p_t || p_s) only by the teacher entropy, so the gradient
    is the same: (p_s - p_t) / n_valid.
    """
    check_same_shape(teacher_probs, student_logits)
    if teacher_probs.shape != student_logits.shape:
        raise SchemaError(
            f"teacher {teacher_probs.shape} and student {student_logits.shape} shapes differ")
    valid = np.ones(student_logits.shape[:-1], bool) if valid is None else np.asarray(valid, bool)
    n = np.count_nonzero(valid)
    if n == 0:
        raise DegenerateInputError("no valid pixels for distillation")
    pt = teacher_probs.astype(np.float64)
    logp = _log_softmax(student_logits.astype(np.float64))
    per_pixel = -(pt * logp).sum(axis=-1)
    value = per_pixel[valid].sum() / n
    grad = (np.exp(logp) - pt) * (valid / n)[..., None]
    return LossOutput(float(value), grad.astype(student_logits.dtype))


def tversky_focal(logits: np.ndarray, label: ClassMask, alpha: float = TVERSKY_ALPHA,
                  beta: float = TVERSKY_BETA, gamma: float = TVERSKY_GAMMA) -> LossOutput:
    """(1 - TI)^gamma with the Tversky index of soft water probabilities.

    TI = TP / (TP + alpha*FP + beta*FN). When nothing is predicted and nothing
    is true the index is taken as 1.
    """
    if alpha <= 0 or beta <= 0 or gamma <= 0:
        raise ConfigError("tversky alpha, beta and gamma must be positive")
    check_same_shape(logits, label)
    valid = label.codes < CLOUD
    if not valid.any():
        raise DegenerateInputError("no scored pixels for the Tversky loss")
    p = softmax_probs(logits.astype(np.float64))[..., 1] * valid
    g = (label.codes == WATER).astype(np.float64)
    tp = (p * g).sum()
    fp = (p * (1 - g)).sum()
    fn = ((1 - p) * g * valid).sum()
    den = tp + alpha * fp + beta * fn
    grad = np.zeros(logits.shape, np.float64)
    if den == 0:
        return LossOutput(0.0, grad.astype(logits.dtype))
    ti = tp / den
    loss = (1 - ti) ** gamma
    if ti < 1:
        # d TI / d p per pixel, chained through p = softmax(z)[1]
        dti_dp = (g * den - tp * (g + alpha * (1 - g) - beta * g)) / den ** 2
        dl_dp = -gamma * (1 - ti) ** (gamma - 1) * dti_dp
        s = p * (1 - p) * dl_dp * valid
        grad[..., 1] = s
        grad[..., 0] = -s
    return LossOutput(float(loss), grad.astype(logits.dtype))
