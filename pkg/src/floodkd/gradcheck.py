"""Finite-difference checks for the network and the losses.

Analytic gradients are computed in float32, the central-difference
reference in float64 with step ``eps``. The error of a tensor is
``max|analytic - numeric| / max(max|analytic|, max|numeric|)``.

With its ReLU pattern fixed the network is affine in any single weight, so
a perturbation that flips some unit's activation is detected and replaced
by the one-sided difference on the side that keeps the pattern.
"""
from __future__ import annotations

import time

import numpy as np

from .losses import distill_kd, tversky_focal, weighted_ce
from .model import SegNetConfig, backward, forward, init, softmax_probs
from .raster import CLOUD, ClassMask, INVALID

EPS = 1e-3
TOLERANCE = 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, np.float64)
    n = np.asarray(numeric, np.float64)
    scale = max(np.abs(a).max(initial=0), np.abs(n).max(initial=0))
    if scale == 0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def _central(f, x: np.ndarray, eps: float) -> np.ndarray:
    g = np.zeros(x.shape)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        g.flat[i] = (fp - fm) / (2 * eps)
    return g


def _kink_aware(f, x: np.ndarray, eps: float, max_shrink: int = 6) -> np.ndarray:
    """Like ``_central`` for ``f`` returning (value, activation pattern)."""
    g = np.zeros(x.shape)
    flat = x.reshape(-1)
    f0, k0 = f()
    for i in range(flat.size):
        old = flat[i]
        h = eps
        for _ in range(max_shrink):
            flat[i] = old + h
            fp, kp = f()
            flat[i] = old - h
            fm, km = f()
            flat[i] = old
            if kp == k0 and km == k0:
                g.flat[i] = (fp - fm) / (2 * h)
                break
            if kp == k0:
                g.flat[i] = (fp - f0) / h
                break
            if km == k0:
                g.flat[i] = (f0 - fm) / h
                break
            h /= 10
        else:
            g.flat[i] = (fp - fm) / (2 * h)
    return g


def _pattern(trace) -> bytes:
    return b"".join(np.packbits(v[2]).tobytes() for k, v in sorted(trace.cache.items())
                    if isinstance(v, tuple) and len(v) >= 3 and isinstance(v[2], np.ndarray))


def model_gradcheck(seed: int, size: int = 16, base_width: int = 2,
                    skip_strides=(4, 2), in_channels: int = 3, eps: float = EPS) -> float:
    """Worst relative error over all network parameters for one random case."""
    rng = np.random.default_rng(seed)
    cfg = SegNetConfig(in_channels, base_width, tuple(skip_strides), seed)
    net32 = init(cfg)
    x = rng.standard_normal((1, size, size, in_channels)).astype(np.float32)
    g_out = rng.standard_normal((1, size, size, 2)).astype(np.float32)
    _, trace = forward(net32, x)
    analytic = backward(net32, trace, g_out)

    net64 = net32.astype(np.float64)
    x64, g64 = x.astype(np.float64), g_out.astype(np.float64)

    def f():
        logits, tr = forward(net64, x64)
        return float((logits * g64).sum()), _pattern(tr)

    return max(relative_error(analytic[k], _kink_aware(f, p, eps))
               for k, p in net64.params.items())


def _random_case(rng, size):
    logits = (2 * rng.standard_normal((size, size, 2))).astype(np.float32)
    codes = rng.choice([0, 1, CLOUD, INVALID], size=(size, size), p=[0.45, 0.45, 0.05, 0.05])
    return logits, ClassMask(codes.astype(np.uint8))


def loss_gradcheck(name: str, seed: int, size: int = 8, eps: float = EPS) -> float:
    rng = np.random.default_rng(seed)
    logits, label = _random_case(rng, size)
    if name == "weighted_ce":
        w = rng.choice([1.0, 5.0, 10.0], size=(size, size))

        def fn(z):
            return weighted_ce(z, label, w)
    elif name == "distill_kd":
        pt = softmax_probs(2 * rng.standard_normal((size, size, 2)))
        valid = label.codes != INVALID

        def fn(z):
            return distill_kd(pt, z, valid)
    elif name == "tversky_focal":
        def fn(z):
            return tversky_focal(z, label)
    else:
        raise ValueError(f"unknown loss {name!r}")
    analytic = fn(logits).grad_logits
    z64 = logits.astype(np.float64)
    numeric = _central(lambda: fn(z64).value, z64, eps)
    return relative_error(analytic, numeric)


SUITES = ("model", "weighted_ce", "distill_kd", "tversky_focal")
SUITE_SKIPS = ((4, 2), (4, 2, 1), (4,))


def suite_case(seed: int) -> dict:
    """Network variant checked for a given seed.

    Width 1 keeps the coordinate-wise differences cheap; seeds alternate
    between the student (2) and teacher (6) input widths and cycle through
    the decoder skip sets so every code path is exercised.
    """
    return {"base_width": 1, "in_channels": 2 if seed % 2 == 0 else 6,
            "skip_strides": SUITE_SKIPS[seed % len(SUITE_SKIPS)]}


def run_suite(n_seeds: int = 20, size: int = 16) -> dict[str, dict]:
    """Max relative error and wall time per suite."""
    out = {}
    for suite in SUITES:
        t0 = time.perf_counter()
        if suite == "model":
            errs = [model_gradcheck(s, size, **suite_case(s)) for s in range(n_seeds)]
        else:
            errs = [loss_gradcheck(suite, s, size) for s in range(n_seeds)]
        out[suite] = {"max_rel_error": max(errs), "seconds": time.perf_counter() - t0}
    return out
