"""Multi-band rasters, class masks and the operations defined on them.

Rasters hold float32 bands in band-major order (C, H, W). Class masks hold one
uint8 code per pixel. Both are immutable once built.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, SchemaError, TruncatedFileError

DRY, WATER, CLOUD, INVALID = 0, 1, 2, 3
CLASS_CODES = (DRY, WATER, CLOUD, INVALID)
IGNORE_CODES = (CLOUD, INVALID)

S1_BANDS = ("VV", "VH")
S2_BANDS = ("B2", "B3", "B4", "B8")

# clip ranges used for normalisation; SAR in dB, optical in raw DN
S1_CLIP = {"VV": (-20.0, 0.0), "VH": (-30.0, 0.0)}
S2_CLIP = (0.0, 3000.0)

_RASTER_MAGIC = b"FSR1"
_MASK_MAGIC = b"FSM1"
_VERSION = 1
_HEADER = struct.Struct("<4sHIIIf")


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Raster:
    """Named float32 bands sharing one grid.

    ``data`` has shape (bands, height, width).
    """

    names: tuple[str, ...]
    data: np.ndarray
    resolution_m: float = 10.0

    def __post_init__(self):
        names = tuple(self.names)
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise SchemaError(f"raster data must be 3-D (bands, h, w), got {data.shape}")
        if len(names) != data.shape[0]:
            raise SchemaError(f"{len(names)} band names for {data.shape[0]} bands")
        if len(names) == 0:
            raise SchemaError("raster needs at least one band")
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate band names: {names}")
        if data.shape[1] < 1 or data.shape[2] < 1:
            raise SchemaError(f"empty raster grid {data.shape[1:]}")
        if not self.resolution_m > 0:
            raise SchemaError(f"resolution must be positive, got {self.resolution_m}")
        if data is self.data:
            data = data.copy()
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "resolution_m", float(self.resolution_m))

    @classmethod
    def from_bands(cls, bands: dict[str, np.ndarray] | Iterable[tuple[str, np.ndarray]],
                   resolution_m: float = 10.0) -> "Raster":
        items = list(bands.items()) if isinstance(bands, dict) else list(bands)
        if not items:
            raise SchemaError("raster needs at least one band")
        shapes = {np.shape(a) for _, a in items}
        if len(shapes) != 1:
            raise SchemaError(f"bands have differing shapes: {sorted(shapes)}")
        return cls(tuple(n for n, _ in items), np.stack([np.asarray(a) for _, a in items]),
                   resolution_m)

    @classmethod
    def from_hwc(cls, names: Sequence[str], image: np.ndarray,
                 resolution_m: float = 10.0) -> "Raster":
        return cls(tuple(names), np.moveaxis(np.asarray(image), -1, 0), resolution_m)

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    def band(self, name: str) -> np.ndarray:
        try:
            return self.data[self.names.index(name)]
        except ValueError:
            raise SchemaError(f"raster has no band {name!r} (bands: {self.names})") from None

    def require(self, *names: str) -> None:
        missing = [n for n in names if n not in self.names]
        if missing:
            raise SchemaError(f"raster is missing bands {missing} (bands: {self.names})")

    def select(self, names: Sequence[str]) -> "Raster":
        self.require(*names)
        return Raster(tuple(names), np.stack([self.band(n) for n in names]), self.resolution_m)

    def hwc(self, names: Sequence[str] | None = None) -> np.ndarray:
        """Return a (H, W, C) float32 copy of the requested bands."""
        src = self if names is None else self.select(names)
        return np.ascontiguousarray(np.moveaxis(src.data, 0, -1))

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return (self.names == other.names and self.resolution_m == other.resolution_m
                and self.data.shape == other.data.shape
                and np.array_equal(self.data, other.data))


@dataclass(frozen=True, eq=False)
class ClassMask:
    """Per-pixel class codes: DRY=0, WATER=1, CLOUD=2, INVALID=3."""

    codes: np.ndarray
    resolution_m: float = 10.0

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if codes.ndim != 2 or codes.shape[0] < 1 or codes.shape[1] < 1:
            raise SchemaError(f"class mask must be a non-empty 2-D grid, got {codes.shape}")
        if codes.dtype != np.uint8:
            if not np.all((codes >= 0) & (codes <= 3)):
                raise SchemaError("class codes must be in {0, 1, 2, 3}")
            codes = codes.astype(np.uint8)
        elif codes.size and codes.max() > INVALID:
            raise SchemaError("class codes must be in {0, 1, 2, 3}")
        codes = np.array(codes, dtype=np.uint8, copy=True, order="C")
        object.__setattr__(self, "codes", _frozen(codes))
        object.__setattr__(self, "resolution_m", float(self.resolution_m))

    @classmethod
    def full(cls, height: int, width: int, code: int = DRY,
             resolution_m: float = 10.0) -> "ClassMask":
        return cls(np.full((height, width), code, np.uint8), resolution_m)

    @property
    def height(self) -> int:
        return self.codes.shape[0]

    @property
    def width(self) -> int:
        return self.codes.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    @property
    def water(self) -> np.ndarray:
        return self.codes == WATER

    @property
    def ignored(self) -> np.ndarray:
        return self.codes >= CLOUD

    def __eq__(self, other):
        if not isinstance(other, ClassMask):
            return NotImplemented
        return self.codes.shape == other.codes.shape and np.array_equal(self.codes, other.codes)


def check_same_shape(*items) -> tuple[int, int]:
    shapes = {tuple(getattr(x, "shape", np.shape(x)))[:2] for x in items}
    if len(shapes) != 1:
        raise SchemaError(f"shape mismatch: {sorted(shapes)}")
    return shapes.pop()


# ---------------------------------------------------------------------------
# file formats

def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"truncated {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def write_raster(raster: Raster, path: str | Path) -> None:
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_RASTER_MAGIC, _VERSION, raster.width, raster.height,
                             len(raster.names), raster.resolution_m))
        for name in raster.names:
            encoded = name.encode("ascii")
            if len(encoded) > 255:
                raise SchemaError(f"band name too long: {name!r}")
            f.write(struct.pack("<B", len(encoded)) + encoded)
        f.write(raster.data.astype("<f4", copy=False).tobytes(order="C"))


def _read_header(f, magic: bytes):
    head = f.read(_HEADER.size)
    if len(head) < 4 or head[:4] != magic:
        raise FormatError(f"bad magic {head[:4]!r}, expected {magic!r}")
    if len(head) != _HEADER.size:
        raise TruncatedFileError("truncated header")
    _, version, width, height, count, res = _HEADER.unpack(head)
    if version != _VERSION:
        raise FormatError(f"unsupported version {version}")
    if width < 1 or height < 1:
        raise FormatError(f"invalid grid size {width}x{height}")
    if not res > 0:
        raise FormatError(f"invalid resolution {res}")
    return width, height, count, res


def read_raster(path: str | Path) -> Raster:
    with open(path, "rb") as f:
        width, height, count, res = _read_header(f, _RASTER_MAGIC)
        if count < 1:
            raise FormatError("raster file declares zero bands")
        names = []
        for _ in range(count):
            (n,) = struct.unpack("<B", _read_exact(f, 1, "band table"))
            raw = _read_exact(f, n, "band table")
            try:
                names.append(raw.decode("ascii"))
            except UnicodeDecodeError:
                raise FormatError(f"non-ASCII band name {raw!r}") from None
        if len(set(names)) != len(names):
            raise FormatError(f"duplicate band names {names}")
        nbytes = 4 * count * width * height
        payload = _read_exact(f, nbytes, "payload")
        if f.read(1):
            raise FormatError("trailing bytes after payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(count, height, width)
    return Raster(tuple(names), data.astype(np.float32), res)


def write_mask(mask: ClassMask, path: str | Path) -> None:
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MASK_MAGIC, _VERSION, mask.width, mask.height, 1,
                             mask.resolution_m))
        f.write(mask.codes.tobytes(order="C"))


def read_mask(path: str | Path) -> ClassMask:
    with open(path, "rb") as f:
        width, height, count, res = _read_header(f, _MASK_MAGIC)
        if count != 1:
            raise FormatError(f"mask file must declare one band, got {count}")
        payload = _read_exact(f, width * height, "payload")
        if f.read(1):
            raise FormatError("trailing bytes after payload")
    codes = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    if codes.max() > INVALID:
        raise FormatError("mask payload holds codes outside {0..3}")
    return ClassMask(codes, res)


# ---------------------------------------------------------------------------
# normalisation and indices

def _scale(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return ((np.clip(x, lo, hi) - lo) / (hi - lo)).astype(np.float32)


def normalize_s1(raster: Raster) -> Raster:
    """Clip VV to [-20, 0] dB and VH to [-30, 0] dB, then map each to [0, 1]."""
    raster.require(*S1_BANDS)
    return Raster(S1_BANDS, np.stack([_scale(raster.band(b), *S1_CLIP[b]) for b in S1_BANDS]),
                  raster.resolution_m)


def normalize_s2(raster: Raster) -> Raster:
    """Clip B2, B3, B4, B8 to [0, 3000] and map to [0, 1]."""
    raster.require(*S2_BANDS)
    return Raster(S2_BANDS, np.stack([_scale(raster.band(b), *S2_CLIP) for b in S2_BANDS]),
                  raster.resolution_m)


def ndwi(s2: Raster) -> Raster:
    """(B3 - B8) / (B3 + B8), defined as 0 where both bands are 0."""
    s2.require("B3", "B8")
    g = s2.band("B3").astype(np.float64)
    n = s2.band("B8").astype(np.float64)
    den = g + n
    out = np.divide(g - n, den, out=np.zeros_like(den), where=den != 0)
    return Raster(("NDWI",), np.clip(out, -1.0, 1.0)[None], s2.resolution_m)


# ---------------------------------------------------------------------------
# resampling

def _source_coords(n_in: int, n_out: int) -> np.ndarray:
    # pixel-centre alignment
    x = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    return np.clip(x, 0.0, n_in - 1)


def _lerp_axis(a: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = a.shape[axis]
    if n_in == n_out:
        return a
    x = _source_coords(n_in, n_out)
    i0 = np.floor(x).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    shape = [1] * a.ndim
    shape[axis] = n_out
    t = (x - i0).reshape(shape).astype(a.dtype)
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i1, axis=axis)
    # a + t*(b - a) keeps constant fields exact
    return lo + t * (hi - lo)


def _nearest_axis(a: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = a.shape[axis]
    if n_in == n_out:
        return a
    idx = np.minimum(((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.intp), n_in - 1)
    return np.take(a, idx, axis=axis)


def resize_array(a: np.ndarray, out_h: int, out_w: int, method: str = "bilinear",
                 axes: tuple[int, int] = (0, 1)) -> np.ndarray:
    """Resize along two spatial axes with pixel-centre alignment."""
    if out_h < 1 or out_w < 1:
        raise SchemaError(f"output size must be positive, got {out_h}x{out_w}")
    if method == "bilinear":
        fn = _lerp_axis
        a = a if np.issubdtype(a.dtype, np.floating) else a.astype(np.float32)
    elif method == "nearest":
        fn = _nearest_axis
    else:
        raise SchemaError(f"unknown resampling method {method!r}")
    return fn(fn(a, axes[0], out_h), axes[1], out_w)


def resample(raster: Raster, out_w: int, out_h: int, method: str = "bilinear") -> Raster:
    data = resize_array(raster.data, out_h, out_w, method, axes=(1, 2))
    return Raster(raster.names, data, raster.resolution_m * raster.width / out_w)


def resample_mask(mask: ClassMask, out_w: int, out_h: int) -> ClassMask:
    codes = resize_array(mask.codes, out_h, out_w, "nearest")
    return ClassMask(codes, mask.resolution_m * mask.width / out_w)


# ---------------------------------------------------------------------------
# tiling

def cloud_fraction(mask: ClassMask) -> float:
    """Share of CLOUD among non-INVALID pixels; 0 when nothing is valid."""
    valid = np.count_nonzero(mask.codes != INVALID)
    if valid == 0:
        return 0.0
    return np.count_nonzero(mask.codes == CLOUD) / valid


def tile(raster: Raster, mask: ClassMask, size: int = 320, max_cloud: float = 0.8):
    """Cut a raster and its mask into a non-overlapping grid anchored at (0, 0).

    Edge tiles are padded (bands with 0, mask with INVALID). Tiles whose
    cloud fraction exceeds ``max_cloud`` are dropped. Returns a list of
    ``(tile, tile_mask, (row, col))`` with the pixel origin of each tile.
    """
    if size < 1:
        raise SchemaError(f"tile size must be >= 1, got {size}")
    h, w = check_same_shape(raster, mask)
    out = []
    for r0 in range(0, h, size):
        for c0 in range(0, w, size):
            r1, c1 = min(r0 + size, h), min(c0 + size, w)
            codes = np.full((size, size), INVALID, np.uint8)
            codes[:r1 - r0, :c1 - c0] = mask.codes[r0:r1, c0:c1]
            tmask = ClassMask(codes, mask.resolution_m)
            if cloud_fraction(tmask) > max_cloud:
                continue
            data = np.zeros((len(raster.names), size, size), np.float32)
            data[:, :r1 - r0, :c1 - c0] = raster.data[:, r0:r1, c0:c1]
            out.append((Raster(raster.names, data, raster.resolution_m), tmask, (r0, c0)))
    return out
