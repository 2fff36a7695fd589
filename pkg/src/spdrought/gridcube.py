"""Gridded spatiotemporal dataset: types, binary format, synthetic generator.

A dataset is a land-masked grid carrying, per pixel, nine static predictors
(eight numeric plus a categorical land-cover id), eleven weekly dynamic
predictors, and three weekly drought indices (surface soil moisture,
evaporative stress index, solar-induced fluorescence). Ocean pixels carry
NaN dynamics and indices.

The on-disk format (DSG1) is little-endian and bit-exact: float payloads
are 32-bit with all NaNs canonicalized to the quiet pattern 0x7FC00000,
and the file ends with a CRC-64/XZ of everything before it.

The synthetic generator stands in for the real remote-sensing products at
desk scale: per-pixel seasonal sinusoids plus spatially correlated noise,
with drought events planted as contiguous spatiotemporal blocks in which
precipitation is suppressed and the three indices are lowered with 0-, 1-,
and 2-week lags.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .crc64 import crc64
from .rng import SplitMix64

MAGIC = b"DSG1"
FORMAT_VERSION = 1
QUIET_NAN_BITS = np.uint32(0x7FC00000)

N_DYNAMIC = 11
N_INDICES = 3
N_STATIC_NUMERIC = 8
MAX_LAND_COVER_CLASSES = 97

DYNAMIC_NAMES = (
    "temperature",
    "radiation",
    "vpd",
    "precipitation",
    "wind_speed",
    "pet",
    "pdsi",
    "surface_pressure",
    "sm_root",
    "vod",
    "lai",
)
INDEX_NAMES = ("sm", "esi", "sif")
STATIC_NUMERIC_NAMES = (
    "elevation",
    "canopy_height",
    "sm_mean",
    "sm_std",
    "esi_mean",
    "esi_std",
    "sif_mean",
    "sif_std",
)
PRECIPITATION = DYNAMIC_NAMES.index("precipitation")
WIND_SPEED = DYNAMIC_NAMES.index("wind_speed")


class FormatError(Exception):
    """Base class for DSG1 decoding failures."""


class BadMagic(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class ChecksumMismatch(FormatError):
    pass


class InvariantViolation(FormatError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Grid geometry and land mask.

    ``weeks`` must be a positive multiple of ``weeks_per_year`` so that
    climatology operations (weekly means across years) are well defined.
    """

    rows: int
    cols: int
    weeks: int
    weeks_per_year: int = 52
    land_mask: np.ndarray = field(default=None)  # bool (rows, cols)

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise InvariantViolation("grid extents must be positive")
        if self.weeks <= 0 or self.weeks % self.weeks_per_year != 0:
            raise InvariantViolation("weeks must be a positive multiple of weeks_per_year")
        mask = np.asarray(self.land_mask, dtype=bool)
        if mask.shape != (self.rows, self.cols):
            raise InvariantViolation("land_mask shape does not match grid extents")
        if not mask.any():
            raise InvariantViolation("grid has no land pixels")
        object.__setattr__(self, "land_mask", mask)

    @property
    def years(self) -> int:
        return self.weeks // self.weeks_per_year


@dataclass(frozen=True, eq=False)
class StaticFeatures:
    """Per-pixel static predictors: 8 numeric channels + land-cover id."""

    numeric: np.ndarray  # float32 (rows, cols, 8)
    land_cover: np.ndarray  # integer (rows, cols), ids in [0, n_classes)
    n_classes: int

    def __post_init__(self):
        object.__setattr__(self, "numeric", np.asarray(self.numeric, dtype=np.float32))
        object.__setattr__(self, "land_cover", np.asarray(self.land_cover, dtype=np.int64))
        if not 1 <= self.n_classes <= MAX_LAND_COVER_CLASSES:
            raise InvariantViolation(f"n_classes must be in [1, {MAX_LAND_COVER_CLASSES}]")
        if self.numeric.shape[-1] != N_STATIC_NUMERIC:
            raise InvariantViolation("expected 8 numeric static channels")
        if (self.land_cover < 0).any() or (self.land_cover >= self.n_classes).any():
            raise InvariantViolation("land_cover id out of range")
        stds = self.numeric[..., 3::2]
        if (stds[np.isfinite(stds)] < 0).any():
            raise InvariantViolation("index std statics must be non-negative")


@dataclass(frozen=True, eq=False)
class DynamicCube:
    """Weekly dynamic predictors, float32 (rows, cols, weeks, 11); NaN allowed."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float32)
        if vals.shape[-1] != N_DYNAMIC:
            raise InvariantViolation("expected 11 dynamic predictor channels")
        if np.isinf(vals).any():
            raise InvariantViolation("dynamic predictors must be finite or NaN")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True, eq=False)
class IndexCube:
    """Weekly drought indices, float32 (rows, cols, weeks, 3); NaN allowed."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float32)
        if vals.shape[-1] != N_INDICES:
            raise InvariantViolation("expected 3 drought-index channels")
        if np.isinf(vals).any():
            raise InvariantViolation("drought indices must be finite or NaN")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True, eq=False)
class Dataset:
    spec: GridSpec
    statics: StaticFeatures
    dynamics: DynamicCube
    indices: IndexCube

    def __post_init__(self):
        shape = (self.spec.rows, self.spec.cols)
        if self.statics.numeric.shape != shape + (N_STATIC_NUMERIC,):
            raise InvariantViolation("static numeric extents inconsistent with spec")
        if self.statics.land_cover.shape != shape:
            raise InvariantViolation("land_cover extents inconsistent with spec")
        if self.dynamics.values.shape != shape + (self.spec.weeks, N_DYNAMIC):
            raise InvariantViolation("dynamics extents inconsistent with spec")
        if self.indices.values.shape != shape + (self.spec.weeks, N_INDICES):
            raise InvariantViolation("indices extents inconsistent with spec")
        ocean = ~self.spec.land_mask
        if ocean.any():
            if not np.isnan(self.dynamics.values[ocean]).all():
                raise InvariantViolation("ocean pixels must carry NaN dynamics")
            if not np.isnan(self.indices.values[ocean]).all():
                raise InvariantViolation("ocean pixels must carry NaN indices")


def datasets_bit_equal(a: Dataset, b: Dataset) -> bool:
    """Bitwise equality after NaN canonicalization (the round-trip contract)."""
    if (a.spec.rows, a.spec.cols, a.spec.weeks, a.spec.weeks_per_year) != (
        b.spec.rows,
        b.spec.cols,
        b.spec.weeks,
        b.spec.weeks_per_year,
    ):
        return False
    if a.statics.n_classes != b.statics.n_classes:
        return False
    if not np.array_equal(a.spec.land_mask, b.spec.land_mask):
        return False
    if not np.array_equal(a.statics.land_cover, b.statics.land_cover):
        return False
    for x, y in (
        (a.statics.numeric, b.statics.numeric),
        (a.dynamics.values, b.dynamics.values),
        (a.indices.values, b.indices.values),
    ):
        if _canonical_bits(x).tobytes() != _canonical_bits(y).tobytes():
            return False
    return True


# ---------------------------------------------------------------------------
# DSG1 codec
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4s9I")


def _canonical_bits(values: np.ndarray) -> np.ndarray:
    """float32 payload as uint32 bits with every NaN mapped to 0x7FC00000."""
    vals = np.ascontiguousarray(values, dtype="<f4")
    bits = vals.view(np.uint32).copy()
    bits[np.isnan(vals)] = QUIET_NAN_BITS
    return bits


def encode_dataset(ds: Dataset) -> bytes:
    """Serialize to DSG1 bytes; deterministic for a given dataset."""
    spec = ds.spec
    out = bytearray()
    out += _HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        spec.rows,
        spec.cols,
        spec.weeks,
        spec.weeks_per_year,
        N_DYNAMIC,
        N_INDICES,
        N_STATIC_NUMERIC,
        ds.statics.n_classes,
    )
    out += spec.land_mask.astype(np.uint8).tobytes()
    out += ds.statics.land_cover.astype("<u2").tobytes()
    out += _canonical_bits(ds.statics.numeric).astype("<u4").tobytes()
    out += _canonical_bits(ds.dynamics.values).astype("<u4").tobytes()
    out += _canonical_bits(ds.indices.values).astype("<u4").tobytes()
    out += struct.pack("<Q", crc64(out))
    return bytes(out)


def decode_dataset(data: bytes) -> Dataset:
    """Parse DSG1 bytes back into a validated :class:`Dataset`.

    Raises :class:`BadMagic`, :class:`TruncatedPayload`,
    :class:`ChecksumMismatch`, or :class:`InvariantViolation`.
    """
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic("not a DSG1 stream")
    if len(data) < _HEADER.size:
        raise TruncatedPayload("header truncated")
    (_, version, rows, cols, weeks, wpy, m, k, n_num, n_classes) = _HEADER.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported DSG1 version {version}")
    if m != N_DYNAMIC or k != N_INDICES or n_num != N_STATIC_NUMERIC:
        raise InvariantViolation("unexpected channel counts in header")

    n_pix = rows * cols
    sizes = [
        n_pix,  # land mask, u8
        n_pix * 2,  # land cover, u16
        n_pix * N_STATIC_NUMERIC * 4,
        n_pix * weeks * N_DYNAMIC * 4,
        n_pix * weeks * N_INDICES * 4,
    ]
    total = _HEADER.size + sum(sizes) + 8
    if len(data) < total:
        raise TruncatedPayload(f"need {total} bytes, have {len(data)}")
    if len(data) > total:
        raise FormatError(f"{len(data) - total} trailing bytes after checksum")

    (stored_crc,) = struct.unpack_from("<Q", data, total - 8)
    if crc64(memoryview(data)[: total - 8]) != stored_crc:
        raise ChecksumMismatch("CRC-64/XZ mismatch")

    off = _HEADER.size
    mask_raw = np.frombuffer(data, dtype=np.uint8, count=n_pix, offset=off)
    off += sizes[0]
    if not np.isin(mask_raw, (0, 1)).all():
        raise InvariantViolation("land mask bytes must be 0 or 1")
    cover = np.frombuffer(data, dtype="<u2", count=n_pix, offset=off).astype(np.int64)
    off += sizes[1]
    statics = np.frombuffer(data, dtype="<f4", count=n_pix * N_STATIC_NUMERIC, offset=off)
    off += sizes[2]
    dynamics = np.frombuffer(data, dtype="<f4", count=n_pix * weeks * N_DYNAMIC, offset=off)
    off += sizes[3]
    indices = np.frombuffer(data, dtype="<f4", count=n_pix * weeks * N_INDICES, offset=off)

    spec = GridSpec(rows, cols, weeks, wpy, mask_raw.reshape(rows, cols).astype(bool))
    return Dataset(
        spec=spec,
        statics=StaticFeatures(
            numeric=statics.reshape(rows, cols, N_STATIC_NUMERIC),
            land_cover=cover.reshape(rows, cols),
            n_classes=n_classes,
        ),
        dynamics=DynamicCube(dynamics.reshape(rows, cols, weeks, N_DYNAMIC)),
        indices=IndexCube(indices.reshape(rows, cols, weeks, N_INDICES)),
    )


def write_dataset(ds: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_dataset(ds))


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Desk-scale synthetic dataset parameters."""

    rows: int = 24
    cols: int = 24
    years: int = 11
    ocean_frac: float = 0.3
    n_events: int = 4
    nan_frac: float = 0.02
    n_classes: int = 8
    smooth_radius: int = 2
    weeks_per_year: int = 52

    @property
    def weeks(self) -> int:
        return self.years * self.weeks_per_year

    def validate(self) -> None:
        if self.rows < 1 or self.cols < 1 or self.years < 1:
            raise ConfigError("rows, cols, years must be positive")
        if not 0.0 <= self.ocean_frac < 1.0:
            raise ConfigError("ocean_frac must be in [0, 1)")
        if self.n_events < 0 or not 0.0 <= self.nan_frac < 1.0:
            raise ConfigError("n_events must be >= 0 and nan_frac in [0, 1)")
        if not 1 <= self.n_classes <= MAX_LAND_COVER_CLASSES:
            raise ConfigError("n_classes out of range")


@dataclass(frozen=True)
class EventBlock:
    """A planted drought event: a contiguous (rows, cols, weeks) block."""

    row0: int
    row1: int  # exclusive
    col0: int
    col1: int
    week0: int
    week1: int  # exclusive


def _box_smooth(fields: np.ndarray, radius: int) -> np.ndarray:
    """Mean over a (2r+1)^2 box, truncated at grid edges.

    Works on the last two axes; implemented with integral images so the
    result is an exact, platform-independent function of the input.
    """
    rows, cols = fields.shape[-2:]
    s = np.zeros(fields.shape[:-2] + (rows + 1, cols + 1), dtype=np.float64)
    s[..., 1:, 1:] = fields.cumsum(axis=-2).cumsum(axis=-1)
    lo_r = np.maximum(np.arange(rows) - radius, 0)
    hi_r = np.minimum(np.arange(rows) + radius + 1, rows)
    lo_c = np.maximum(np.arange(cols) - radius, 0)
    hi_c = np.minimum(np.arange(cols) + radius + 1, cols)
    total = (
        s[..., hi_r[:, None], hi_c[None, :]]
        - s[..., lo_r[:, None], hi_c[None, :]]
        - s[..., hi_r[:, None], lo_c[None, :]]
        + s[..., lo_r[:, None], lo_c[None, :]]
    )
    counts = (hi_r - lo_r)[:, None] * (hi_c - lo_c)[None, :]
    return total / counts


def _smooth_field01(rng: SplitMix64, rows: int, cols: int, radius: int) -> np.ndarray:
    """One spatially correlated field rescaled to [0, 1]."""
    f = _box_smooth(rng.normal(rows * cols).reshape(rows, cols), radius)
    lo, hi = f.min(), f.max()
    return (f - lo) / (hi - lo) if hi > lo else np.zeros_like(f)


# per-channel (base level, seasonal amplitude); wind_speed is pure noise so a
# feature-importance run has a known uninformative channel to compare against
_DYNAMIC_SEASONAL = {
    "temperature": (0.55, 0.30),
    "radiation": (0.55, 0.30),
    "vpd": (0.45, 0.20),
    "precipitation": (0.50, 0.20),
    "wind_speed": (0.50, 0.00),
    "pet": (0.55, 0.28),
    "pdsi": (0.50, 0.10),
    "surface_pressure": (0.60, 0.08),
    "sm_root": (0.50, 0.18),
    "vod": (0.55, 0.15),
    "lai": (0.50, 0.30),
}
_INDEX_SEASONAL = {"sm": (0.55, 0.18), "esi": (0.55, 0.15), "sif": (0.50, 0.22)}
_INDEX_PRECIP_GAIN = {"sm": 0.9, "esi": 0.8, "sif": 0.7}
_INDEX_EVENT_LAG = {"sm": 0, "esi": 1, "sif": 2}
_INDEX_EVENT_DROP = {"sm": 0.25, "esi": 0.20, "sif": 0.18}
_NOISE_SMOOTH = 0.05
_NOISE_WHITE = 0.04


def _trailing_mean(series: np.ndarray, width: int, lag: int) -> np.ndarray:
    """Mean of series over weeks [t-lag-width+1, t-lag], zero-padded at the start."""
    weeks = series.shape[-1]
    padded = np.concatenate(
        [np.zeros(series.shape[:-1] + (width + lag,), dtype=series.dtype), series], axis=-1
    )
    c = padded.cumsum(axis=-1)
    t = np.arange(weeks)
    return (c[..., t + width] - c[..., t]) / width


def generate_synthetic(cfg: SynthConfig, seed: int, return_events: bool = False):
    """Deterministic synthetic dataset; pure function of (cfg, seed).

    With ``return_events=True`` also returns the list of planted
    :class:`EventBlock` ground truth (empty when ``cfg.n_events == 0``).
    """
    cfg.validate()
    rows, cols, weeks, wpy = cfg.rows, cfg.cols, cfg.weeks, cfg.weeks_per_year
    root = SplitMix64(seed)

    # land mask: threshold a smoothed field at the requested ocean fraction
    mask_field = _smooth_field01(root.substream("land-mask"), rows, cols, cfg.smooth_radius)
    if cfg.ocean_frac == 0.0:
        land = np.ones((rows, cols), dtype=bool)
    else:
        land = mask_field > np.quantile(mask_field, cfg.ocean_frac)
        if not land.any():
            land.flat[int(np.argmax(mask_field))] = True

    cover_rng = root.substream("land-cover")
    class_fields = np.stack(
        [_smooth_field01(cover_rng, rows, cols, cfg.smooth_radius) for _ in range(cfg.n_classes)]
    )
    land_cover = np.argmax(class_fields, axis=0).astype(np.int64)
    land_cover[~land] = 0

    static_rng = root.substream("statics")
    elevation = _smooth_field01(static_rng, rows, cols, cfg.smooth_radius)
    canopy = _smooth_field01(static_rng, rows, cols, cfg.smooth_radius)
    # elevation modulates index seasonal amplitude so static inputs carry signal
    amp_scale = 0.7 + 0.6 * elevation

    week_of_year = np.arange(weeks) % wpy
    season = np.sin(2.0 * np.pi * week_of_year / wpy)  # (weeks,)

    def channel_noise(rng: SplitMix64) -> np.ndarray:
        smooth = _box_smooth(
            rng.normal(weeks * rows * cols).reshape(weeks, rows, cols), cfg.smooth_radius
        )
        white = rng.normal(weeks * rows * cols).reshape(weeks, rows, cols)
        return np.transpose(_NOISE_SMOOTH * smooth + _NOISE_WHITE * white, (1, 2, 0))

    dyn_rng = root.substream("dynamics")
    dynamics = np.empty((rows, cols, weeks, N_DYNAMIC), dtype=np.float64)
    phase_jitter = {}
    for c, name in enumerate(DYNAMIC_NAMES):
        base, amp = _DYNAMIC_SEASONAL[name]
        jitter = 0.6 * (_smooth_field01(dyn_rng, rows, cols, cfg.smooth_radius) - 0.5)
        phase_jitter[name] = jitter
        seasonal = np.sin(2.0 * np.pi * week_of_year[None, None, :] / wpy + jitter[..., None])
        dynamics[..., c] = base + amp * seasonal + channel_noise(dyn_rng)

    clean_precip_seasonal = (
        _DYNAMIC_SEASONAL["precipitation"][0]
        + _DYNAMIC_SEASONAL["precipitation"][1]
        * np.sin(
            2.0 * np.pi * week_of_year[None, None, :] / wpy
            + phase_jitter["precipitation"][..., None]
        )
    )

    # plant drought events before computing the indices so the precipitation
    # suppression propagates through the coupling
    event_rng = root.substream("events")
    events: list[EventBlock] = []
    for _ in range(cfg.n_events):
        er = max(3, rows // 3)
        ec = max(3, cols // 3)
        r0 = event_rng.integers(max(1, rows - er + 1))
        c0 = event_rng.integers(max(1, cols - ec + 1))
        duration = 8 + event_rng.integers(9)
        latest = weeks - duration - 4
        w0 = min(wpy, latest) + event_rng.integers(max(1, latest - min(wpy, latest) + 1))
        events.append(EventBlock(r0, min(r0 + er, rows), c0, min(c0 + ec, cols), w0, w0 + duration))

    for ev in events:
        blk = (slice(ev.row0, ev.row1), slice(ev.col0, ev.col1), slice(ev.week0, ev.week1))
        dynamics[blk + (PRECIPITATION,)] *= 0.15

    precip_anom = dynamics[..., PRECIPITATION] - clean_precip_seasonal
    temp_anom = dynamics[..., 0] - (
        _DYNAMIC_SEASONAL["temperature"][0]
        + _DYNAMIC_SEASONAL["temperature"][1]
        * np.sin(
            2.0 * np.pi * week_of_year[None, None, :] / wpy
            + phase_jitter["temperature"][..., None]
        )
    )

    idx_rng = root.substream("indices")
    indices = np.empty((rows, cols, weeks, N_INDICES), dtype=np.float64)
    for k, name in enumerate(INDEX_NAMES):
        base, amp = _INDEX_SEASONAL[name]
        lag = _INDEX_EVENT_LAG[name]
        jitter = 0.4 * (_smooth_field01(idx_rng, rows, cols, cfg.smooth_radius) - 0.5)
        seasonal = np.sin(2.0 * np.pi * week_of_year[None, None, :] / wpy + jitter[..., None])
        coupled = _INDEX_PRECIP_GAIN[name] * _trailing_mean(precip_anom, 4, lag)
        vals = base + amp * amp_scale[..., None] * seasonal + coupled + channel_noise(idx_rng)
        if name == "esi":
            vals = vals - 0.2 * temp_anom
        indices[..., k] = vals

    for ev in events:
        for k, name in enumerate(INDEX_NAMES):
            lag = _INDEX_EVENT_LAG[name]
            w0, w1 = min(ev.week0 + lag, weeks), min(ev.week1 + lag, weeks)
            indices[ev.row0 : ev.row1, ev.col0 : ev.col1, w0:w1, k] -= _INDEX_EVENT_DROP[name]

    dynamics = np.clip(dynamics, 0.02, 0.98)
    indices = np.clip(indices, 0.02, 0.98)

    if cfg.nan_frac > 0:
        nan_rng = root.substream("nan")
        dyn_gaps = nan_rng.uniform(dynamics.size).reshape(dynamics.shape) < cfg.nan_frac
        idx_gaps = nan_rng.uniform(indices.size).reshape(indices.shape) < cfg.nan_frac
        dynamics[dyn_gaps] = np.nan
        indices[idx_gaps] = np.nan

    numeric = np.empty((rows, cols, N_STATIC_NUMERIC), dtype=np.float64)
    numeric[..., 0] = elevation
    numeric[..., 1] = canopy
    with np.errstate(invalid="ignore"):
        for k in range(N_INDICES):
            numeric[..., 2 + 2 * k] = np.nanmean(indices[..., k], axis=-1)
            numeric[..., 3 + 2 * k] = np.nanstd(indices[..., k], axis=-1)

    ocean = ~land
    dynamics[ocean] = np.nan
    indices[ocean] = np.nan
    numeric[ocean] = np.nan

    ds = Dataset(
        spec=GridSpec(rows, cols, weeks, wpy, land),
        statics=StaticFeatures(
            numeric=numeric.astype(np.float32),
            land_cover=land_cover,
            n_classes=cfg.n_classes,
        ),
        dynamics=DynamicCube(dynamics.astype(np.float32)),
        indices=IndexCube(indices.astype(np.float32)),
    )
    return (ds, events) if return_events else ds
