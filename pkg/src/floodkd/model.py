"""Small convolutional encoder-decoder with exact manual backpropagation.

Layout (``w`` = base width, ``d = 2w`` decoder width)::

    enc1  3x3/2  in  -> w     stride 2
    enc2  3x3/2  w   -> 2w    stride 4
    enc3  3x3/2  2w  -> 4w    stride 8
    enc4  3x3/2  4w  -> 4w    stride 16
    ctx   3x3/1  4w  -> 4w    stride 16
    dec{s} for s in skip_strides (descending):
          bilinear upsample to stride s, concat encoder features at s,
          3x3/1 -> d
    head  1x1    d   -> 2, bilinear upsample to the input size

All convolutions use zero "same" padding; every layer except the head is
followed by ReLU. Arrays are NHWC float32.
"""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError, SchemaError, TruncatedFileError

ENCODER_STRIDES = (2, 2, 2, 2)
ALLOWED_SKIPS = (4, 2, 1)


@dataclass(frozen=True)
class SegNetConfig:
    in_channels: int = 2
    base_width: int = 8
    skip_strides: tuple[int, ...] = (4, 2)
    seed: int = 0
    encoder_strides: tuple[int, ...] = ENCODER_STRIDES

    def __post_init__(self):
        object.__setattr__(self, "skip_strides", tuple(int(s) for s in self.skip_strides))
        object.__setattr__(self, "encoder_strides", tuple(self.encoder_strides))
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.base_width < 1:
            raise ConfigError(f"base_width must be >= 1, got {self.base_width}")
        if not self.skip_strides:
            raise ConfigError("skip_strides must be non-empty")
        if any(s not in ALLOWED_SKIPS for s in self.skip_strides):
            raise ConfigError(f"skip_strides must be drawn from {ALLOWED_SKIPS}, got {self.skip_strides}")
        if list(self.skip_strides) != sorted(set(self.skip_strides), reverse=True):
            raise ConfigError(f"skip_strides must be unique and descending, got {self.skip_strides}")
        if self.encoder_strides != ENCODER_STRIDES:
            raise ConfigError(f"encoder_strides are fixed at {ENCODER_STRIDES}")

    def channels_at(self, stride: int) -> int:
        w = self.base_width
        return {1: self.in_channels, 2: w, 4: 2 * w, 8: 4 * w, 16: 4 * w}[stride]

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        """Kernel shapes (k, k, in, out) keyed by layer name, in parameter order."""
        w, d = self.base_width, 2 * self.base_width
        shapes = {
            "enc1": (3, 3, self.in_channels, w),
            "enc2": (3, 3, w, 2 * w),
            "enc3": (3, 3, 2 * w, 4 * w),
            "enc4": (3, 3, 4 * w, 4 * w),
            "ctx": (3, 3, 4 * w, 4 * w),
        }
        prev = 4 * w
        for s in self.skip_strides:
            shapes[f"dec{s}"] = (3, 3, prev + self.channels_at(s), d)
            prev = d
        shapes["head"] = (1, 1, d, 2)
        return shapes


class SegNet:
    """Parameter container. ``params`` maps ``"<layer>.w"``/``"<layer>.b"`` to arrays."""

    def __init__(self, config: SegNetConfig, params: dict[str, np.ndarray]):
        self.config = config
        expected = param_shapes(config)
        if list(params) != list(expected):
            raise ConfigError(f"parameter names {list(params)} do not match {list(expected)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigError(f"{name}: shape {params[name].shape}, expected {shape}")
        self.params = params
        self.version = 0

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def touch(self) -> None:
        """Record an in-place parameter update; outstanding traces become stale."""
        self.version += 1

    def copy(self) -> "SegNet":
        return SegNet(self.config, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "SegNet":
        return SegNet(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def checksum(self) -> str:
        return hashlib.sha256(checkpoint_bytes(self)).hexdigest()

    def all_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params.values())


def param_shapes(config: SegNetConfig) -> dict[str, tuple[int, ...]]:
    out = {}
    for name, shape in config.layer_shapes().items():
        out[f"{name}.w"] = shape
        out[f"{name}.b"] = (shape[-1],)
    return out


def init(config: SegNetConfig, dtype=np.float32) -> SegNet:
    """Fan-in scaled uniform kernels, U(-sqrt(6/fan_in), sqrt(6/fan_in)); zero biases."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".w"):
            fan_in = shape[0] * shape[1] * shape[2]
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        else:
            params[name] = np.zeros(shape, dtype)
    return SegNet(config, params)


# ---------------------------------------------------------------------------
# primitive layers

def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1):
    """'same'-padded convolution via im2col. Returns (out, cols)."""
    k = w.shape[0]
    n, h, wd, c = x.shape
    p = k // 2
    ho, wo = (h + 2 * p - k) // stride + 1, (wd + 2 * p - k) // stride + 1
    if k == 1 and stride == 1:
        cols = x
    else:
        xp = np.zeros((n, h + 2 * p, wd + 2 * p, c), x.dtype)
        xp[:, p:p + h, p:p + wd] = x
        cols = np.empty((n, ho, wo, k * k * c), x.dtype)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            cols[..., idx * c:(idx + 1) * c] = \
                xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    out = cols.reshape(-1, k * k * c) @ w.reshape(k * k * c, -1) + b
    return out.reshape(n, ho, wo, -1), cols


def conv_backward(dout: np.ndarray, cols: np.ndarray, w: np.ndarray, in_shape, stride: int = 1,
                  need_input_grad: bool = True):
    k = w.shape[0]
    n, h, wd, c = in_shape
    f = w.shape[-1]
    d2 = dout.reshape(-1, f)
    dw = (cols.reshape(-1, k * k * c).T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_input_grad:
        return None, dw, db
    dcols = (d2 @ w.reshape(k * k * c, f).T).reshape(*dout.shape[:3], k * k * c)
    if k == 1 and stride == 1:
        return dcols, dw, db
    p = k // 2
    ho, wo = dout.shape[1:3]
    dxp = np.zeros((n, h + 2 * p, wd + 2 * p, c), dout.dtype)
    for idx in range(k * k):
        i, j = divmod(idx, k)
        dxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
            dcols[..., idx * c:(idx + 1) * c]
    return dxp[:, p:p + h, p:p + wd], dw, db


@lru_cache(maxsize=64)
def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) linear-interpolation weights with pixel-centre alignment."""
    m = np.zeros((n_out, n_in))
    x = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
    i0 = np.floor(x).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = x - i0
    np.add.at(m, (np.arange(n_out), i0), 1 - t)
    np.add.at(m, (np.arange(n_out), i1), t)
    m.flags.writeable = False
    return m


def upsample_forward(x: np.ndarray, h: int, w: int) -> np.ndarray:
    ah = interp_matrix(x.shape[1], h).astype(x.dtype)
    aw = interp_matrix(x.shape[2], w).astype(x.dtype)
    y = np.matmul(ah, x.transpose(0, 3, 1, 2))        # n, c, h, w_in
    y = np.matmul(y, aw.T)                            # n, c, h, w
    return np.ascontiguousarray(y.transpose(0, 2, 3, 1))


def upsample_backward(dy: np.ndarray, h_in: int, w_in: int) -> np.ndarray:
    ah = interp_matrix(h_in, dy.shape[1]).astype(dy.dtype)
    aw = interp_matrix(w_in, dy.shape[2]).astype(dy.dtype)
    g = np.matmul(dy.transpose(0, 3, 1, 2), aw)       # n, c, h, w_in
    g = np.matmul(ah.T, g)                            # n, c, h_in, w_in
    return np.ascontiguousarray(g.transpose(0, 2, 3, 1))


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the last axis, stabilised by max subtraction."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# network forward / backward

@dataclass
class ForwardTrace:
    net_id: int
    version: int
    batched: bool
    input_shape: tuple[int, ...]
    cache: dict = field(repr=False)


_ENCODER = (("enc1", 2), ("enc2", 4), ("enc3", 8), ("enc4", 16))


def forward(net: SegNet, x: np.ndarray, train_mode: bool = False):
    """Logits (…, H, W, 2) for an (H, W, C) image or an (N, H, W, C) batch.

    ``train_mode`` is accepted for interface symmetry; the network has no
    layers that behave differently during training.
    """
    cfg = net.config
    x = np.asarray(x)
    batched = x.ndim == 4
    if not batched:
        if x.ndim != 3:
            raise SchemaError(f"input must be (H, W, C) or (N, H, W, C), got {x.shape}")
        x = x[None]
    n, h, w, c = x.shape
    if c != cfg.in_channels:
        raise SchemaError(f"input has {c} channels, network expects {cfg.in_channels}")
    if h % 16 or w % 16 or h == 0 or w == 0:
        raise SchemaError(f"input height and width must be positive multiples of 16, got {h}x{w}")
    x = x.astype(net.dtype, copy=False)
    P = net.params
    cache: dict = {}
    feats = {1: x}
    cur = x
    for name, stride in _ENCODER:
        z, cols = conv_forward(cur, P[f"{name}.w"], P[f"{name}.b"], 2)
        cache[name] = (cols, cur.shape, z > 0)
        cur = np.maximum(z, 0)
        feats[stride] = cur
    z, cols = conv_forward(cur, P["ctx.w"], P["ctx.b"], 1)
    cache["ctx"] = (cols, cur.shape, z > 0)
    cur = np.maximum(z, 0)
    cur_stride = 16
    for s in cfg.skip_strides:
        up = upsample_forward(cur, h // s, w // s)
        cat = np.concatenate([up, feats[s]], axis=-1)
        z, cols = conv_forward(cat, P[f"dec{s}.w"], P[f"dec{s}.b"], 1)
        cache[f"dec{s}"] = (cols, cat.shape, z > 0, cur.shape, up.shape[-1])
        cur = np.maximum(z, 0)
        cur_stride = s
    z, cols = conv_forward(cur, P["head.w"], P["head.b"], 1)
    cache["head"] = (cols, cur.shape)
    logits = upsample_forward(z, h, w) if cur_stride > 1 else z
    cache["head_shape"] = z.shape
    trace = ForwardTrace(id(net), net.version, batched, x.shape, cache)
    return (logits if batched else logits[0]), trace


def backward(net: SegNet, trace: ForwardTrace, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradient of sum(logits * grad_logits) with respect to every parameter."""
    if trace.net_id != id(net) or trace.version != net.version:
        raise ContractError("forward trace does not belong to the current network state")
    g = np.asarray(grad_logits, dtype=net.dtype)
    if not trace.batched:
        g = g[None]
    n, h, w, _ = trace.input_shape
    if g.shape != (n, h, w, 2):
        raise SchemaError(f"grad_logits shape {g.shape} does not match logits {(n, h, w, 2)}")
    cfg = net.config
    P = net.params
    C = trace.cache
    grads: dict[str, np.ndarray] = {}

    zh = C["head_shape"]
    if zh[1] != h:
        g = upsample_backward(g, zh[1], zh[2])
    cols, in_shape = C["head"]
    g, grads["head.w"], grads["head.b"] = conv_backward(g, cols, P["head.w"], in_shape, 1)

    skip_grads: dict[int, np.ndarray] = {}
    for s in reversed(cfg.skip_strides):
        cols, cat_shape, active, prev_shape, n_up = C[f"dec{s}"]
        g = g * active
        dcat, grads[f"dec{s}.w"], grads[f"dec{s}.b"] = conv_backward(
            g, cols, P[f"dec{s}.w"], cat_shape, 1, need_input_grad=True)
        if s > 1:
            skip_grads[s] = dcat[..., n_up:]
        g = upsample_backward(dcat[..., :n_up], prev_shape[1], prev_shape[2])

    cols, in_shape, active = C["ctx"]
    g, grads["ctx.w"], grads["ctx.b"] = conv_backward(g * active, cols, P["ctx.w"], in_shape, 1)
    for name, stride in reversed(_ENCODER):
        if stride in skip_grads:
            g = g + skip_grads[stride]
        cols, in_shape, active = C[name]
        g, grads[f"{name}.w"], grads[f"{name}.b"] = conv_backward(
            g * active, cols, P[f"{name}.w"], in_shape, 2, need_input_grad=name != "enc1")
    return {k: grads[k] for k in P}


def predict_probs(net: SegNet, x: np.ndarray, chunk: int = 16) -> np.ndarray:
    """Softmax probabilities for a batch, evaluated in chunks."""
    x = np.asarray(x)
    if x.ndim == 3:
        return softmax_probs(forward(net, x)[0])
    parts = [softmax_probs(forward(net, x[i:i + chunk])[0]) for i in range(0, len(x), chunk)]
    return np.concatenate(parts) if parts else np.zeros(x.shape[:3] + (2,), net.dtype)


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"FSNW"


def _config_block(cfg: SegNetConfig) -> bytes:
    return (struct.pack("<IIQB", cfg.in_channels, cfg.base_width, cfg.seed & (2**64 - 1),
                        len(cfg.skip_strides))
            + bytes(cfg.skip_strides)
            + struct.pack("<B", len(cfg.encoder_strides)) + bytes(cfg.encoder_strides))


def checkpoint_bytes(net: SegNet) -> bytes:
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(_config_block(net.config))
    buf.write(struct.pack("<I", len(net.params)))
    for name, arr in net.params.items():
        enc = name.encode("ascii")
        buf.write(struct.pack("<B", len(enc)) + enc)
        buf.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f4").tobytes(order="C"))
    return buf.getvalue()


def save_checkpoint(net: SegNet, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


def load_checkpoint(path: str | Path, expected: SegNetConfig | None = None) -> SegNet:
    """Read an FSNW checkpoint; raise ConfigError if it disagrees with ``expected``."""
    data = Path(path).read_bytes()
    f = io.BytesIO(data)

    def take(n):
        b = f.read(n)
        if len(b) != n:
            raise TruncatedFileError(f"{path}: truncated checkpoint")
        return b

    if take(4) != _CKPT_MAGIC:
        raise FormatError(f"{path}: not an FSNW checkpoint")
    in_ch, width, seed, n_skip = struct.unpack("<IIQB", take(17))
    skips = tuple(take(n_skip))
    (n_enc,) = struct.unpack("<B", take(1))
    enc = tuple(take(n_enc))
    try:
        cfg = SegNetConfig(in_ch, width, skips, seed, enc)
    except ConfigError as e:
        raise FormatError(f"{path}: invalid config block ({e})") from None
    if expected is not None and _arch(expected) != _arch(cfg):
        raise ConfigError(f"{path}: checkpoint config {cfg} does not match expected {expected}")
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (ln,) = struct.unpack("<B", take(1))
        name = take(ln).decode("ascii")
        (nd,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{nd}I", take(4 * nd))
        size = int(np.prod(shape)) if nd else 1
        params[name] = np.frombuffer(take(4 * size), "<f4").reshape(shape).astype(np.float32)
    if f.read(1):
        raise FormatError(f"{path}: trailing bytes")
    return SegNet(cfg, params)


def _arch(cfg: SegNetConfig):
    return cfg.in_channels, cfg.base_width, cfg.skip_strides, cfg.encoder_strides
