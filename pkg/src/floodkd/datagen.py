"""Synthetic paired scenes, weak-label corruption, manifests, pairing,
balanced batching and training augmentation."""
from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError, SchemaError
from .raster import (CLOUD, DRY, INVALID, S1_BANDS, S2_BANDS, WATER, ClassMask, Raster,
                     normalize_s1, normalize_s2, read_mask, read_raster, resize_array)
from .seeding import make_rng

SOURCES = ("handlabel", "weak_sen1floods11-like", "weak_floods208-like")
MANIFEST_FIELDS = ("scene_id", "source", "s1_path", "s2_path", "label_path",
                   "occurrence_path", "timestamp", "cloud_fraction")
RESOLUTION_M = 16.0


@dataclass(frozen=True)
class SceneParams:
    water_fraction: float = 0.18
    river_width: float = 4.0         # px
    flood_reach: float = 14.0        # px, how far flood lobes extend from the river
    n_streams: int = 2               # thin permanent tributaries
    stream_width: float = 2.0        # px
    cloud_cover: float = 0.15        # mean cloud fraction; per-scene cover ~ U(0, 2*mean)
    shadow_fraction: float = 0.04    # dark SAR look-alikes on land
    speckle_looks: float = 4.0       # 0 disables speckle
    terrain_db: float = 1.5          # land backscatter texture amplitude, dB
    sar_blur: float = 0.0            # px, Gaussian point-spread width of the SAR sensor
    flood_db: float = 3.0            # dB by which flood water is brighter than permanent water
    s2_noise: float = 60.0           # optical noise amplitude, DN

    def validate(self) -> "SceneParams":
        checks = [
            (0.0 <= self.water_fraction < 1.0, "water_fraction must be in [0, 1)"),
            (self.river_width > 0, "river_width must be > 0"),
            (self.flood_reach >= 0, "flood_reach must be >= 0"),
            (self.n_streams >= 0, "n_streams must be >= 0"),
            (self.stream_width > 0, "stream_width must be > 0"),
            (0.0 <= self.cloud_cover < 0.5, "cloud_cover must be in [0, 0.5)"),
            (0.0 <= self.shadow_fraction < 0.5, "shadow_fraction must be in [0, 0.5)"),
            (self.speckle_looks >= 0, "speckle_looks must be >= 0"),
            (self.terrain_db >= 0, "terrain_db must be >= 0"),
            (self.sar_blur >= 0, "sar_blur must be >= 0"),
            # flood water must stay darker than land
            (0.0 <= self.flood_db < 8.0, "flood_db must be in [0, 8)"),
            # larger optical noise could flip the NDWI sign of water/land
            (0.0 <= self.s2_noise <= 250.0, "s2_noise must be in [0, 250]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    @classmethod
    def noise_free(cls, **kw) -> "SceneParams":
        return cls(speckle_looks=0.0, s2_noise=0.0, terrain_db=0.0, **kw)


@dataclass(frozen=True, eq=False)
class SceneBundle:
    s1: Raster              # VV, VH in dB
    s2: Raster              # B2, B3, B4, B8 in DN
    truth: ClassMask        # DRY / WATER only
    occurrence: Raster      # single band "occurrence"
    cloud: ClassMask        # CLOUD where S2 is occluded, DRY elsewhere
    seed: int
    permanent: np.ndarray = field(repr=False)   # permanent river pixels


def _smooth_field(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    f -= f.min()
    span = f.max()
    return f / span if span > 0 else f


def _centerline(rng: np.random.Generator, size: int) -> np.ndarray:
    line = np.zeros((size, size), bool)
    t = np.linspace(0, size - 1, 8 * size)
    amp1, amp2 = rng.uniform(0.08, 0.2) * size, rng.uniform(0.0, 0.06) * size
    lam1, lam2 = rng.uniform(0.6, 1.4) * size, rng.uniform(0.2, 0.4) * size
    ph1, ph2 = rng.uniform(0, 2 * np.pi, 2)
    off = rng.uniform(0.3, 0.7) * size
    y = off + amp1 * np.sin(2 * np.pi * t / lam1 + ph1) + amp2 * np.sin(2 * np.pi * t / lam2 + ph2)
    rows = np.clip(np.round(y).astype(int), 0, size - 1)
    cols = np.round(t).astype(int)
    line[rows, cols] = True
    return line.T if rng.random() < 0.5 else line


def _quantile_mask(field_: np.ndarray, fraction: float) -> np.ndarray:
    if fraction <= 0:
        return np.zeros(field_.shape, bool)
    return field_ > np.quantile(field_, 1.0 - fraction)


def _sar_db(db: np.ndarray, blur: float, looks: float, rng: np.random.Generator) -> np.ndarray:
    """Blur in the linear power domain, then apply L-look gamma speckle."""
    if blur <= 0 and looks <= 0:
        return db
    linear = 10.0 ** (db / 10.0)
    if blur > 0:
        linear = ndimage.gaussian_filter(linear, blur, mode="nearest")
    if looks > 0:
        linear = linear * rng.gamma(looks, 1.0 / looks, size=db.shape)
    return 10.0 * np.log10(np.maximum(linear, 1e-10))


def generate_scene(seed: int, size: int = 64, params: SceneParams | None = None) -> SceneBundle:
    """Render a river scene with optional flood lobes, clouds and SAR look-alikes.

    Water is dark in both SAR bands and has B3 > B8 in the optical bands, land
    has B8 >> B3, so the NDWI sign recovers the truth wherever the optical
    image is cloud free. Speckle is multiplicative gamma noise applied in the
    linear power domain.
    """
    params = (params or SceneParams()).validate()
    if size < 32:
        raise ConfigError(f"scene size must be >= 32, got {size}")
    rng = np.random.default_rng(seed)

    line = _centerline(rng, size)
    dist = ndimage.distance_transform_edt(~line)
    wet_noise = _smooth_field(rng, size, size / 10)
    texture = _smooth_field(rng, size, 2.0)
    occ_noise = _smooth_field(rng, size, 3.0)

    streams = np.zeros((size, size), bool)
    for _ in range(params.n_streams):
        streams |= _centerline(rng, size)
    if params.water_fraction > 0:
        permanent = dist <= params.river_width / 2
        if params.n_streams:
            permanent |= ndimage.distance_transform_edt(~streams) <= params.stream_width / 2
        score = params.flood_reach * wet_noise ** 2 - dist
        water = permanent | _quantile_mask(score, params.water_fraction)
    else:
        permanent = np.zeros((size, size), bool)
        water = permanent.copy()
    flood = water & ~permanent
    land = ~water
    shadow = land & _quantile_mask(_smooth_field(rng, size, 2.5), params.shadow_fraction)

    # SAR, dB
    tex = params.terrain_db * (2 * texture - 1)
    # wind and emergent vegetation roughen flood water relative to the channel
    rough = np.where(flood, params.flood_db, 0.0)
    vv = np.where(water, -19.0 + rough + 0.3 * tex, -8.0 + tex)
    vh = np.where(water, -27.0 + rough + 0.3 * tex, -15.0 + tex)
    vv = np.where(shadow, -18.0 + 0.3 * tex, vv)
    vh = np.where(shadow, -26.0 + 0.3 * tex, vh)
    vv = _sar_db(vv, params.sar_blur, params.speckle_looks, rng)
    vh = _sar_db(vh, params.sar_blur, params.speckle_looks, rng)

    # clouds occlude the optical image only
    cover = min(rng.uniform(0, 2 * params.cloud_cover), 0.9) if params.cloud_cover > 0 else 0.0
    clouds = _quantile_mask(_smooth_field(rng, size, size / 8), cover)

    # optical, DN
    land_dn = np.array([500.0, 700.0, 600.0, 2300.0])
    water_dn = np.array([800.0, 900.0, 500.0, 350.0])
    base = np.where(water[..., None], water_dn, land_dn)
    noise = params.s2_noise * rng.uniform(-1, 1, size=(size, size, 4))
    s2 = base + noise
    cloud_dn = 2700.0 + 300.0 * rng.random((size, size, 4))
    s2 = np.where(clouds[..., None], cloud_dn, s2)

    occ = np.where(permanent, 0.6 + 0.35 * occ_noise,
                   np.where(flood, 0.05 + 0.25 * occ_noise, 0.1 * occ_noise))

    truth = ClassMask(np.where(water, WATER, DRY).astype(np.uint8), RESOLUTION_M)
    cloud = ClassMask(np.where(clouds, CLOUD, DRY).astype(np.uint8), RESOLUTION_M)
    return SceneBundle(
        s1=Raster(S1_BANDS, np.stack([vv, vh]), RESOLUTION_M),
        s2=Raster(S2_BANDS, np.moveaxis(s2, -1, 0), RESOLUTION_M),
        truth=truth,
        occurrence=Raster(("occurrence",), np.clip(occ, 0, 1)[None], RESOLUTION_M),
        cloud=cloud,
        seed=seed,
        permanent=permanent,
    )


# ---------------------------------------------------------------------------
# weak-label corruption

CORRUPTION_MODES = ("river_dropout", "overflood", "speckle_noise")


def _connected_dropout(water: np.ndarray, n_remove: int, rng: np.random.Generator) -> np.ndarray:
    """Remove ``n_remove`` water pixels as breadth-first grown 8-connected blobs."""
    h, w = water.shape
    remaining = water.copy()
    removed = np.zeros_like(water)
    left = n_remove
    while left > 0:
        candidates = np.flatnonzero(remaining)
        start = int(candidates[rng.integers(len(candidates))])
        queue = deque([divmod(start, w)])
        remaining.flat[start] = False
        while queue and left > 0:
            r, c = queue.popleft()
            removed[r, c] = True
            left -= 1
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < h and 0 <= cc < w and remaining[rr, cc]:
                        remaining[rr, cc] = False
                        queue.append((rr, cc))
    return removed


def corrupt_weak_label(truth: ClassMask, mode: str, severity: float, seed: int,
                       max_flood_iterations: int = 8) -> ClassMask:
    """Inject gross label errors into a water mask.

    ``river_dropout`` deletes a connected share ``severity`` of the water
    pixels, ``overflood`` grows water into dry land by
    ``round(severity * max_flood_iterations)`` dilation steps and
    ``speckle_noise`` flips each valid pixel with probability ``severity``.
    CLOUD and INVALID pixels are never touched.
    """
    if not 0.0 <= severity <= 1.0:
        raise ConfigError(f"severity must be in [0, 1], got {severity}")
    if mode not in CORRUPTION_MODES:
        raise ConfigError(f"unknown corruption mode {mode!r}; expected one of {CORRUPTION_MODES}")
    rng = np.random.default_rng(seed)
    codes = truth.codes.copy()
    water = codes == WATER
    if mode == "river_dropout":
        n = int(round(severity * np.count_nonzero(water)))
        if n:
            codes[_connected_dropout(water, n, rng)] = DRY
    elif mode == "overflood":
        from .labeling import dilate
        grown = dilate(water, int(round(severity * max_flood_iterations)))
        codes[grown & (codes == DRY)] = WATER
    else:
        flip = (rng.random(codes.shape) < severity) & (codes < CLOUD)
        codes[flip] = np.where(codes[flip] == WATER, DRY, WATER)
    return ClassMask(codes, truth.resolution_m)


# ---------------------------------------------------------------------------
# pairing

MAX_PAIR_GAP = timedelta(hours=12)
MAX_PAIR_CLOUD = 0.12


def pair_filter(s1_ts: datetime, candidates: Sequence[tuple[datetime, float]],
                max_gap: timedelta = MAX_PAIR_GAP, max_cloud: float = MAX_PAIR_CLOUD
                ) -> Optional[int]:
    """Pick the optical acquisition to pair with a SAR acquisition.

    Candidates more than 12 h away or with more than 12 % cloud are skipped;
    of the rest the closest in time wins (earlier timestamp on a tie). Returns
    None when nothing qualifies, meaning the data point is discarded.
    """
    best = None
    for i, (ts, cloud) in enumerate(candidates):
        gap = abs(ts - s1_ts)
        if gap > max_gap or cloud > max_cloud:
            continue
        key = (gap, ts, i)
        if best is None or key < best:
            best = key
    return None if best is None else best[2]


# ---------------------------------------------------------------------------
# balanced batches

def _endless_shuffle(items: Sequence, rng: np.random.Generator) -> Iterator:
    while True:
        for i in rng.permutation(len(items)):
            yield items[i]


def balanced_batches(source_a: Sequence, source_b: Sequence, batch: int, seed: int,
                     epochs: int | None = None) -> Iterator[list]:
    """Yield batches holding ``batch // 2`` records from each source.

    Each source is consumed in seeded shuffled order and reshuffled whenever
    it is exhausted. An epoch is one pass over the longer source; with
    ``epochs=None`` the iterator never ends.
    """
    if batch < 2 or batch % 2:
        raise ConfigError(f"balanced batch size must be even and >= 2, got {batch}")
    if not source_a or not source_b:
        raise ConfigError("both sources must be non-empty")
    half = batch // 2
    stream_a = _endless_shuffle(source_a, make_rng(seed, "balanced", "a"))
    stream_b = _endless_shuffle(source_b, make_rng(seed, "balanced", "b"))
    per_epoch = math.ceil(max(len(source_a), len(source_b)) / half)
    done = 0
    while epochs is None or done < epochs * per_epoch:
        yield [next(stream_a) for _ in range(half)] + [next(stream_b) for _ in range(half)]
        done += 1


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentConfig:
    flip_h: bool = True
    flip_v: bool = True
    crop_scale_range: tuple[float, float] = (0.7, 1.0)
    jitter_sigma: float = 0.02

    def validate(self) -> "AugmentConfig":
        lo, hi = self.crop_scale_range
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"crop_scale_range must satisfy 0 < min <= max <= 1, got {(lo, hi)}")
        if self.jitter_sigma < 0:
            raise ConfigError("jitter_sigma must be >= 0")
        return self

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(False, False, (1.0, 1.0), 0.0)


def augment(images: Sequence[np.ndarray], mask: np.ndarray | None, config: AugmentConfig,
            seed: int, photometric: Sequence[bool] | None = None):
    """Apply one random crop-resize and flip geometry to every (H, W, C) image and the mask.

    Images are resampled bilinearly and the mask by nearest neighbour. Crops
    use independent per-axis scales, which distorts the aspect ratio before
    resizing back. Additive Gaussian jitter then hits the images flagged in
    ``photometric`` (default: all), which are clamped back to [0, 1].
    """
    config.validate()
    rng = np.random.default_rng(seed)
    h, w = images[0].shape[:2] if images else mask.shape
    lo, hi = config.crop_scale_range
    sh, sw = rng.uniform(lo, hi, 2)
    ch, cw = max(1, int(round(h * sh))), max(1, int(round(w * sw)))
    r0 = int(rng.integers(0, h - ch + 1))
    c0 = int(rng.integers(0, w - cw + 1))
    fh = config.flip_h and rng.random() < 0.5
    fv = config.flip_v and rng.random() < 0.5
    photometric = [True] * len(images) if photometric is None else list(photometric)

    def geometry(a: np.ndarray, method: str) -> np.ndarray:
        if (ch, cw) != (h, w):
            a = resize_array(a[r0:r0 + ch, c0:c0 + cw], h, w, method)
        if fh:
            a = a[:, ::-1]
        if fv:
            a = a[::-1]
        return np.ascontiguousarray(a)

    out = []
    for img, jitter in zip(images, photometric):
        a = geometry(img, "bilinear")
        if jitter and config.jitter_sigma > 0:
            noise = rng.normal(0.0, config.jitter_sigma, size=(1, 1, a.shape[-1]) if a.ndim == 3 else 1)
            a = np.clip(a + noise, 0.0, 1.0).astype(img.dtype)
        out.append(a)
    return out, (None if mask is None else geometry(mask, "nearest"))


# ---------------------------------------------------------------------------
# manifests and in-memory samples

@dataclass(frozen=True)
class SampleRecord:
    scene_id: str
    source: str
    s1_path: str
    s2_path: str
    label_path: str
    occurrence_path: str
    timestamp: str
    cloud_fraction: float


def cloud_path_for(s2_path: str | Path) -> Path:
    """Cloud masks live next to the optical raster: ``<stem>.cloud.fsm``."""
    p = Path(s2_path)
    return p.with_name(p.stem + ".cloud.fsm")


def write_manifest(path: str | Path, records: Sequence[SampleRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for r in records:
            writer.writerow([r.scene_id, r.source, r.s1_path, r.s2_path, r.label_path,
                             r.occurrence_path, r.timestamp, repr(float(r.cloud_fraction))])


def read_manifest(path: str | Path, check_files: bool = True) -> list[SampleRecord]:
    """Parse a manifest; relative paths are resolved against its directory."""
    path = Path(path)
    base = path.parent
    try:
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            rows = list(reader)
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    if header is None or tuple(header) != MANIFEST_FIELDS:
        raise SchemaError(f"{path}: bad manifest header {header}")
    records, seen = [], set()
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(MANIFEST_FIELDS):
            raise SchemaError(f"{path}:{lineno}: expected {len(MANIFEST_FIELDS)} fields")
        rec = dict(zip(MANIFEST_FIELDS, row))
        if rec["scene_id"] in seen:
            raise SchemaError(f"{path}:{lineno}: duplicate scene_id {rec['scene_id']!r}")
        seen.add(rec["scene_id"])
        if rec["source"] not in SOURCES:
            raise SchemaError(f"{path}:{lineno}: unknown source {rec['source']!r}")
        parse_timestamp(rec["timestamp"])
        for key in ("s1_path", "s2_path", "label_path", "occurrence_path"):
            p = Path(rec[key])
            rec[key] = str(p if p.is_absolute() else base / p)
            if check_files and not Path(rec[key]).exists():
                raise DataError(f"{path}:{lineno}: missing file {rec[key]}")
        frac = float(rec["cloud_fraction"])
        if not 0.0 <= frac <= 1.0:
            raise SchemaError(f"{path}:{lineno}: cloud_fraction out of [0, 1]")
        rec["cloud_fraction"] = frac
        records.append(SampleRecord(**rec))
    return records


def parse_timestamp(text: str) -> datetime:
    try:
        ts = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError:
        raise SchemaError(f"bad ISO-8601 timestamp {text!r}") from None
    return ts if ts.tzinfo else ts.replace(tzinfo=timezone.utc)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(eq=False)
class Sample:
    """Normalised model inputs for one scene, (H, W, C) float32."""

    scene_id: str
    s1: np.ndarray
    s2: np.ndarray
    label: ClassMask | None = None
    source: str = "handlabel"

    @property
    def valid(self) -> np.ndarray:
        if self.label is None:
            return np.ones(self.s1.shape[:2], bool)
        return self.label.codes != INVALID

    def inputs(self, bands: str) -> np.ndarray:
        if bands == "S1":
            return self.s1
        if bands == "S1+S2":
            return np.concatenate([self.s1, self.s2], axis=-1)
        raise ConfigError(f"unknown input bands {bands!r}; expected 'S1' or 'S1+S2'")

    def with_label(self, label: ClassMask | None) -> "Sample":
        return replace(self, label=label)


def sample_from_bundle(bundle: SceneBundle, label: ClassMask | None = None,
                       scene_id: str | None = None, source: str = "handlabel") -> Sample:
    return Sample(
        scene_id=scene_id or f"scene-{bundle.seed}",
        s1=normalize_s1(bundle.s1).hwc(),
        s2=normalize_s2(bundle.s2).hwc(),
        label=bundle.truth if label is None else label,
        source=source,
    )


def load_samples(records: Sequence[SampleRecord], with_labels: bool = True) -> list[Sample]:
    out = []
    for r in records:
        label = read_mask(r.label_path) if with_labels else None
        out.append(Sample(r.scene_id, normalize_s1(read_raster(r.s1_path)).hwc(),
                          normalize_s2(read_raster(r.s2_path)).hwc(), label, r.source))
    return out
