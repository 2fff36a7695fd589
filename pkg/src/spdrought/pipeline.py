"""Preprocessing and evaluation protocol.

Implements the training protocol's data plumbing: max-normalization of
every dynamic predictor and drought index, weekly-climatology imputation
of gaps, 5x5-block spatial train/test splitting, and sliding-window
enumeration over the weekly axis. ``prepare`` bundles these into the
land-pixel-major arrays the trainer consumes, keeping the original
observation mask of the indices so the loss can skip unobserved targets.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import gridcube
from .gridcube import ConfigError, Dataset, GridSpec
from .rng import SplitMix64

DEFAULT_CONTEXT = 100
DEFAULT_HORIZON = 26
DEFAULT_STRIDE = 26
DEFAULT_BLOCK = 5
DEFAULT_TRAIN_FRAC = 0.8


@dataclass(frozen=True)
class Window:
    """A (context, horizon) index pair over the weekly axis."""

    context_start: int
    context_len: int = DEFAULT_CONTEXT
    horizon_len: int = DEFAULT_HORIZON

    def __post_init__(self):
        if self.context_start < 0 or self.context_len < 1 or self.horizon_len < 1:
            raise ConfigError("window extents must be positive")

    @property
    def horizon_start(self) -> int:
        return self.context_start + self.context_len

    @property
    def end(self) -> int:
        return self.horizon_start + self.horizon_len


def enumerate_windows(weeks: int, context: int, horizon: int, stride: int) -> list[Window]:
    """Windows at starts 0, stride, 2*stride, ... while they fit in ``weeks``."""
    if context < 1 or horizon < 1 or stride < 1:
        raise ConfigError("context, horizon, stride must be >= 1")
    out = []
    start = 0
    while start + context + horizon <= weeks:
        out.append(Window(start, context, horizon))
        start += stride
    return out


@dataclass(frozen=True)
class SplitAssignment:
    """Block-level spatial partition of land pixels into train and test."""

    block_size: int
    train_pixels: np.ndarray  # int (n, 2) row/col
    test_pixels: np.ndarray
    seed: int

    def to_text(self) -> str:
        lines = [f"# block_size={self.block_size} seed={self.seed}"]
        for r, c in self.train_pixels:
            lines.append(f"train {r} {c}")
        for r, c in self.test_pixels:
            lines.append(f"test {r} {c}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SplitAssignment":
        block_size, seed = 0, 0
        train, test = [], []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    key, _, val = tok.partition("=")
                    if key == "block_size":
                        block_size = int(val)
                    elif key == "seed":
                        seed = int(val)
                continue
            kind, r, c = line.split()
            (train if kind == "train" else test).append((int(r), int(c)))
        return cls(
            block_size=block_size,
            train_pixels=np.array(train, dtype=np.int64).reshape(-1, 2),
            test_pixels=np.array(test, dtype=np.int64).reshape(-1, 2),
            seed=seed,
        )


def _round_half_away(x: float) -> int:
    return int(np.floor(x + 0.5)) if x >= 0 else -int(np.floor(-x + 0.5))


def block_split(spec: GridSpec, block: int, train_frac: float, seed: int) -> SplitAssignment:
    """Tile the grid into block x block tiles and deal them train/test.

    Edge tiles may be partial and take part in the lottery like full ones.
    Ocean pixels are excluded from both pixel lists. Deterministic in
    ``seed`` via the package splitmix64 generator.
    """
    if block < 1:
        raise ConfigError("block must be >= 1")
    if not 0.0 < train_frac < 1.0:
        raise ConfigError("train_frac must be in (0, 1)")
    n_tile_rows = -(-spec.rows // block)
    n_tile_cols = -(-spec.cols // block)
    n_tiles = n_tile_rows * n_tile_cols
    if n_tiles < 2:
        raise ConfigError("need at least 2 tiles to split")

    order = SplitMix64(seed).permutation(n_tiles)
    n_train = _round_half_away(train_frac * n_tiles)
    train_tiles = set(order[:n_train].tolist())

    rows_idx, cols_idx = np.nonzero(spec.land_mask)
    tile_of_pixel = (rows_idx // block) * n_tile_cols + (cols_idx // block)
    in_train = np.isin(tile_of_pixel, list(train_tiles))
    pixels = np.stack([rows_idx, cols_idx], axis=1)
    return SplitAssignment(
        block_size=block,
        train_pixels=pixels[in_train],
        test_pixels=pixels[~in_train],
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MaxTable:
    """Per-variable maxima used for normalization and de-normalization.

    A variable whose land values are all NaN or whose maximum is 0 cannot
    be scaled; it is left unchanged and listed in ``degenerate``.
    """

    dynamics_max: np.ndarray  # (11,)
    indices_max: np.ndarray  # (3,)
    degenerate: tuple[str, ...] = ()

    def to_text(self) -> str:
        lines = []
        for name, val in zip(gridcube.DYNAMIC_NAMES, self.dynamics_max):
            flag = " degenerate" if f"dynamic:{name}" in self.degenerate else ""
            lines.append(f"dynamic {name} {float(val)!r}{flag}")
        for name, val in zip(gridcube.INDEX_NAMES, self.indices_max):
            flag = " degenerate" if f"index:{name}" in self.degenerate else ""
            lines.append(f"index {name} {float(val)!r}{flag}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MaxTable":
        dyn = np.ones(gridcube.N_DYNAMIC)
        idx = np.ones(gridcube.N_INDICES)
        degenerate = []
        for line in text.splitlines():
            parts = line.split()
            if len(parts) < 3:
                continue
            kind, name, val = parts[0], parts[1], float(parts[2])
            if kind == "dynamic":
                dyn[gridcube.DYNAMIC_NAMES.index(name)] = val
            else:
                idx[gridcube.INDEX_NAMES.index(name)] = val
            if len(parts) > 3 and parts[3] == "degenerate":
                degenerate.append(f"{'dynamic' if kind == 'dynamic' else 'index'}:{name}")
        return cls(dyn, idx, tuple(degenerate))


def _max_normalize(values: np.ndarray, land: np.ndarray, names, kind: str):
    """Divide each channel by its NaN-ignoring max over land pixels."""
    scaled = values.astype(np.float32, copy=True)
    maxima = np.ones(values.shape[-1], dtype=np.float64)
    degenerate = []
    land_vals = values[land]  # (n_land, weeks, C)
    for c in range(values.shape[-1]):
        channel = land_vals[..., c]
        finite = np.isfinite(channel)
        mx = float(channel[finite].max()) if finite.any() else float("nan")
        if not np.isfinite(mx) or mx == 0.0:
            degenerate.append(f"{kind}:{names[c]}")
            maxima[c] = np.nan if not np.isfinite(mx) else 0.0
        else:
            maxima[c] = mx
            scaled[..., c] = (values[..., c] / np.float32(mx)).astype(np.float32)
    return scaled, maxima, degenerate


def normalize_by_max(ds: Dataset) -> tuple[Dataset, MaxTable]:
    """Scale every dynamic predictor and drought index by its global max.

    Maxima are taken over land pixels ignoring NaNs; NaNs are preserved.
    Degenerate variables (all-NaN or max 0) are left unscaled and flagged
    in the returned table.
    """
    land = ds.spec.land_mask
    dyn, dyn_max, deg_d = _max_normalize(
        ds.dynamics.values, land, gridcube.DYNAMIC_NAMES, "dynamic"
    )
    idx, idx_max, deg_i = _max_normalize(ds.indices.values, land, gridcube.INDEX_NAMES, "index")
    table = MaxTable(dyn_max, idx_max, tuple(deg_d + deg_i))
    out = Dataset(
        spec=ds.spec,
        statics=ds.statics,
        dynamics=gridcube.DynamicCube(dyn),
        indices=gridcube.IndexCube(idx),
    )
    return out, table


def denormalize(values: np.ndarray, maxima: np.ndarray) -> np.ndarray:
    """Invert :func:`normalize_by_max` with the stored max table."""
    scale = np.where(np.isfinite(maxima) & (maxima != 0), maxima, 1.0)
    return values * scale.astype(values.dtype)


def normalize_by_quantile(ds: Dataset, q: float = 0.98) -> tuple[Dataset, MaxTable]:
    """Optional per-variable quantile scaling (off by default everywhere).

    Same contract as :func:`normalize_by_max` but divides by the land-wide
    ``q`` quantile instead of the maximum; values above the quantile then
    exceed 1. Kept as an alternative scaling rule; the protocol uses
    :func:`normalize_by_max`.
    """
    land = ds.spec.land_mask

    def qmax(values, names, kind):
        scaled = values.astype(np.float32, copy=True)
        maxima = np.ones(values.shape[-1], dtype=np.float64)
        degenerate = []
        for c in range(values.shape[-1]):
            channel = values[land][..., c]
            finite = channel[np.isfinite(channel)]
            s = float(np.quantile(finite, q)) if finite.size else float("nan")
            if not np.isfinite(s) or s == 0.0:
                degenerate.append(f"{kind}:{names[c]}")
                maxima[c] = np.nan if not np.isfinite(s) else 0.0
            else:
                maxima[c] = s
                scaled[..., c] = (values[..., c] / np.float32(s)).astype(np.float32)
        return scaled, maxima, degenerate

    dyn, dyn_max, deg_d = qmax(ds.dynamics.values, gridcube.DYNAMIC_NAMES, "dynamic")
    idx, idx_max, deg_i = qmax(ds.indices.values, gridcube.INDEX_NAMES, "index")
    out = Dataset(
        spec=ds.spec,
        statics=ds.statics,
        dynamics=gridcube.DynamicCube(dyn),
        indices=gridcube.IndexCube(idx),
    )
    return out, MaxTable(dyn_max, idx_max, tuple(deg_d + deg_i))


# ---------------------------------------------------------------------------
# Imputation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ImputeReport:
    """Slots (pixel..., calendar week, variable) that had no sample in any year."""

    zero_filled: np.ndarray  # (n, cube.ndim - 1) multi-indices with week -> calendar week
    n_filled: int  # total NaNs replaced (climatology or zero)


def impute_weekly_climatology(cube: np.ndarray, weeks_per_year: int):
    """Fill NaNs with the across-year mean at the same calendar week.

    ``cube`` has shape (..., weeks, channels) with weeks a multiple of
    ``weeks_per_year``. Observed values are untouched. Slots whose every
    year is NaN are filled with 0.0 and reported.
    """
    weeks = cube.shape[-2]
    if weeks % weeks_per_year != 0:
        raise ConfigError("weeks must be a multiple of weeks_per_year")
    years = weeks // weeks_per_year
    lead = cube.shape[:-2]
    nvar = cube.shape[-1]
    by_year = cube.reshape(lead + (years, weeks_per_year, nvar))

    with np.errstate(invalid="ignore"):
        counts = np.isfinite(by_year).sum(axis=-3)
        sums = np.nansum(by_year, axis=-3)
        clim = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)

    gaps = np.isnan(cube)
    clim_full = np.broadcast_to(
        clim[..., None, :, :], lead + (years, weeks_per_year, nvar)
    ).reshape(cube.shape)
    out = np.where(gaps, clim_full.astype(cube.dtype), cube)

    dead = counts == 0  # (..., weeks_per_year, nvar)
    report = ImputeReport(
        zero_filled=np.argwhere(dead),
        n_filled=int(gaps.sum()),
    )
    return out, report


# ---------------------------------------------------------------------------
# Prepared bundle for training
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PreparedData:
    """Land-pixel-major arrays ready for the model.

    ``series`` stacks the 3 normalized indices first, then the 11
    normalized dynamics, all gap-filled. ``target`` repeats the index
    channels and ``target_valid`` marks where they were actually observed
    before imputation (the loss skips the rest).
    """

    spec: GridSpec
    land_rc: np.ndarray  # (L, 2) row, col
    land_id: np.ndarray  # (rows, cols) -> land index or -1
    series: np.ndarray  # float32 (L, weeks, 14)
    target: np.ndarray  # float32 (L, weeks, 3)
    target_valid: np.ndarray  # bool (L, weeks, 3)
    statics_numeric: np.ndarray  # float32 (L, 8)
    land_cover: np.ndarray  # int64 (L,)
    attention_statics: np.ndarray  # float32 (L, 9)
    n_classes: int
    max_table: MaxTable
    impute_report: ImputeReport = field(repr=False, default=None)

    @property
    def n_land(self) -> int:
        return self.land_rc.shape[0]

    @property
    def weeks(self) -> int:
        return self.series.shape[1]

    def land_index_of(self, pixels: np.ndarray) -> np.ndarray:
        """Map (n, 2) row/col pairs to land indices (-1 if ocean)."""
        return self.land_id[pixels[:, 0], pixels[:, 1]]


def prepare(ds: Dataset) -> PreparedData:
    """Normalize, mask, and impute a raw dataset for training.

    The index observation mask is recorded before imputation; index
    channels then get the same gap filling as the dynamic predictors so
    the fused input series is NaN-free.
    """
    norm, table = normalize_by_max(ds)
    land = ds.spec.land_mask
    rows_idx, cols_idx = np.nonzero(land)
    land_rc = np.stack([rows_idx, cols_idx], axis=1).astype(np.int64)
    land_id = np.full((ds.spec.rows, ds.spec.cols), -1, dtype=np.int64)
    land_id[rows_idx, cols_idx] = np.arange(land_rc.shape[0])

    idx_land = norm.indices.values[land]  # (L, weeks, 3)
    dyn_land = norm.dynamics.values[land]  # (L, weeks, 11)
    target_valid = np.isfinite(idx_land)

    wpy = ds.spec.weeks_per_year
    idx_filled, idx_report = impute_weekly_climatology(idx_land, wpy)
    dyn_filled, dyn_report = impute_weekly_climatology(dyn_land, wpy)

    series = np.concatenate([idx_filled, dyn_filled], axis=-1).astype(np.float32)

    numeric = ds.statics.numeric[land].astype(np.float32)
    if not np.isfinite(numeric).all():
        raise gridcube.InvariantViolation("land pixels must have finite numeric statics")
    cover = ds.statics.land_cover[land].astype(np.int64)
    scale = max(ds.statics.n_classes - 1, 1)
    attention = np.concatenate(
        [numeric, (cover[:, None] / scale).astype(np.float32)], axis=1
    ).astype(np.float32)

    return PreparedData(
        spec=ds.spec,
        land_rc=land_rc,
        land_id=land_id,
        series=series,
        target=idx_filled.astype(np.float32),
        target_valid=target_valid,
        statics_numeric=numeric,
        land_cover=cover,
        attention_statics=attention,
        n_classes=ds.statics.n_classes,
        max_table=table,
        impute_report=ImputeReport(
            zero_filled=np.concatenate([idx_report.zero_filled, dyn_report.zero_filled], axis=0),
            n_filled=idx_report.n_filled + dyn_report.n_filled,
        ),
    )
