"""Percentile-based drought detection and scoring from soil moisture.

Each weekly soil-moisture value is compared against the 30th percentile of
the same calendar week's values across years (the pixel's climatology).
Values strictly below the threshold count as drought. Predicted and
observed series are both classified against thresholds computed from the
observed record, then compared with accuracy and precision, drought being
the positive class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .pipeline import PreparedData, SplitAssignment, Window
from .rasterout import write_raster
from .trainer import EmptySplit, StagedData, TrainConfig

DEFAULT_PERCENTILE = 0.3
SM_INDEX = 0


class InsufficientSamples(ValueError):
    pass


class EmptyComparison(ValueError):
    pass


def weekly_percentile_threshold(samples, p: float) -> float:
    """Linear-interpolation percentile of the per-year samples for one slot.

    Sort ascending, take rank r = (n-1)*p, and interpolate between the
    bracketing order statistics. Needs at least two non-NaN samples.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("percentile must be in [0, 1]")
    arr = np.asarray(samples, dtype=np.float64)
    arr = arr[np.isfinite(arr)]
    if arr.size < 2:
        raise InsufficientSamples("need at least 2 samples")
    ordered = np.sort(arr)
    rank = (ordered.size - 1) * p
    lo = int(math.floor(rank))
    frac = rank - lo
    if lo + 1 >= ordered.size:
        return float(ordered[lo])
    return float(ordered[lo] + frac * (ordered[lo + 1] - ordered[lo]))


@dataclass(frozen=True, eq=False)
class WeeklyThresholds:
    """Per-slot percentile thresholds; NaN where fewer than 2 samples exist."""

    thresholds: np.ndarray  # (..., weeks_per_year)
    counts: np.ndarray  # (..., weeks_per_year) samples per slot
    percentile: float


def weekly_thresholds(
    values: np.ndarray, weeks_per_year: int, p: float = DEFAULT_PERCENTILE
) -> WeeklyThresholds:
    """Vectorized per-calendar-week thresholds over a (..., weeks) record."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("percentile must be in [0, 1]")
    values = np.asarray(values, dtype=np.float64)
    weeks = values.shape[-1]
    if weeks % weeks_per_year != 0:
        raise ValueError("weeks must be a multiple of weeks_per_year")
    years = weeks // weeks_per_year
    by_year = values.reshape(values.shape[:-1] + (years, weeks_per_year))
    by_year = np.moveaxis(by_year, -2, -1)  # (..., wpy, years)

    ordered = np.sort(by_year, axis=-1)  # NaNs sort to the end
    counts = np.isfinite(by_year).sum(axis=-1)
    rank = (counts - 1) * p
    lo = np.floor(rank).astype(np.int64)
    lo = np.clip(lo, 0, max(years - 1, 0))
    hi = np.minimum(lo + 1, np.maximum(counts - 1, 0))
    frac = rank - lo
    v_lo = np.take_along_axis(ordered, lo[..., None], axis=-1)[..., 0]
    v_hi = np.take_along_axis(ordered, hi[..., None], axis=-1)[..., 0]
    thresholds = v_lo + frac * (v_hi - v_lo)
    thresholds = np.where(counts >= 2, thresholds, np.nan)
    return WeeklyThresholds(thresholds=thresholds, counts=counts, percentile=p)


@dataclass(frozen=True, eq=False)
class DroughtMask:
    """Boolean drought labels plus the slots where labels are defined."""

    drought: np.ndarray  # bool
    defined: np.ndarray  # bool; False where value or threshold is NaN


def detect_drought(values: np.ndarray, thresholds: WeeklyThresholds) -> DroughtMask:
    """Label weeks strictly below their calendar-week threshold.

    ``values`` has shape (..., weeks); NaN values or NaN thresholds leave
    the slot undefined (excluded from scoring).
    """
    values = np.asarray(values, dtype=np.float64)
    wpy = thresholds.thresholds.shape[-1]
    calendar = np.arange(values.shape[-1]) % wpy
    full = thresholds.thresholds[..., calendar]
    defined = np.isfinite(values) & np.isfinite(full)
    with np.errstate(invalid="ignore"):
        drought = defined & (values < full)
    return DroughtMask(drought=drought, defined=defined)


@dataclass(frozen=True)
class ClassificationReport:
    """Confusion counts and scores with drought as the positive class."""

    tp: int
    fp: int
    tn: int
    fn: int
    precision_defined: bool = True

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / (self.tp + self.fp + self.tn + self.fn)

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if (self.tp + self.fp) > 0 else 0.0

    @property
    def n_scored(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_text(self) -> str:
        return (
            f"tp {self.tp}\nfp {self.fp}\ntn {self.tn}\nfn {self.fn}\n"
            f"accuracy {self.accuracy!r}\n"
            f"precision {self.precision!r}"
            f"{'' if self.precision_defined else ' (no positive predictions)'}\n"
        )


def classification_metrics(predicted: DroughtMask, observed: DroughtMask) -> ClassificationReport:
    """Score predicted against observed labels over jointly defined slots."""
    if predicted.drought.shape != observed.drought.shape:
        raise ValueError("mask shape mismatch")
    scored = predicted.defined & observed.defined
    if not scored.any():
        raise EmptyComparison("no jointly defined slots to score")
    p = predicted.drought & scored
    o = observed.drought & scored
    tp = int((p & o).sum())
    fp = int((p & ~o & scored).sum())
    fn = int((~p & o & scored).sum())
    tn = int((~p & ~o & scored).sum())
    return ClassificationReport(tp=tp, fp=fp, tn=tn, fn=fn, precision_defined=(tp + fp) > 0)


def export_drought_mask(mask: DroughtMask, basepath) -> None:
    """Write a 2-D drought mask as PGM + CSV; undefined cells are NaN."""
    values = np.where(mask.defined, mask.drought.astype(np.float64), np.nan)
    write_raster(values, basepath)


# ---------------------------------------------------------------------------
# End-to-end assessment of model predictions
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AssessmentResult:
    report: ClassificationReport
    thresholds: WeeklyThresholds  # per test pixel (n, weeks_per_year)
    observed: DroughtMask  # (n, weeks)
    predicted: DroughtMask  # (n, weeks); defined only at forecast weeks
    test_pixels: np.ndarray  # (n, 2)
    deviation: np.ndarray  # (n, weeks) observed minus calendar-week mean


def predicted_sm_series(
    model, prepared: PreparedData, split: SplitAssignment, cfg: TrainConfig,
    windows: list[Window], staged: StagedData | None = None,
) -> np.ndarray:
    """De-normalized predicted soil moisture at test pixels.

    Returns (n_test, weeks) with NaN outside forecast horizons. Horizon
    blocks are written in window order (later windows win on overlap; the
    protocol's stride equals the horizon so blocks tile exactly).
    """
    staged = staged or StagedData(prepared)
    ids = staged.land_ids_for(split.test_pixels)
    if ids.numel() == 0 or not windows:
        raise EmptySplit("nothing to predict")
    out = np.full((ids.numel(), prepared.weeks), np.nan)
    sm_max = prepared.max_table.indices_max[SM_INDEX]
    scale = sm_max if np.isfinite(sm_max) and sm_max != 0 else 1.0
    model.eval()
    with torch.no_grad():
        for window in windows:
            for start in range(0, ids.numel(), 64):
                chunk = ids[start : start + 64]
                inputs, _, _ = staged.batch(chunk, window)
                pred = model.forward_from_neighbors(**inputs)  # (b, H, 3)
                out[start : start + chunk.numel(), window.horizon_start : window.end] = (
                    pred[..., SM_INDEX].numpy() * scale
                )
    return out


def assess_soil_moisture_drought(
    model,
    ds_raw_sm: np.ndarray,  # (rows, cols, weeks) raw observed SM with NaN
    prepared: PreparedData,
    split: SplitAssignment,
    cfg: TrainConfig,
    windows: list[Window],
    percentile: float = DEFAULT_PERCENTILE,
    staged: StagedData | None = None,
) -> AssessmentResult:
    """Classify predicted vs observed soil-moisture drought at test pixels.

    Thresholds come from the observed record so both sides face the same
    climatology; predictions are de-normalized with the stored max table.
    """
    test = split.test_pixels
    observed_series = ds_raw_sm[test[:, 0], test[:, 1], :]  # (n, weeks)
    thresholds = weekly_thresholds(observed_series, prepared.spec.weeks_per_year, percentile)
    observed = detect_drought(observed_series, thresholds)
    predicted_series = predicted_sm_series(model, prepared, split, cfg, windows, staged)
    predicted = detect_drought(predicted_series, thresholds)
    report = classification_metrics(predicted, observed)

    # diagnostic only: deviation of observed SM from its calendar-week mean
    wpy = prepared.spec.weeks_per_year
    years = prepared.weeks // wpy
    by_year = observed_series.reshape(-1, years, wpy)
    with np.errstate(invalid="ignore"):
        clim_mean = np.nanmean(by_year, axis=1)
    deviation = observed_series - np.tile(clim_mean, (1, years))

    return AssessmentResult(
        report=report,
        thresholds=thresholds,
        observed=observed,
        predicted=predicted,
        test_pixels=test,
        deviation=deviation,
    )
