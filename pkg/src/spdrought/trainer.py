"""Training loop, evaluation protocol, baselines, and ablation tooling.

One epoch visits every training pixel once: pixels are shuffled into
batches, and each batch is trained on all sliding windows in a freshly
shuffled order, one optimizer step per (batch, window). All randomness
(split, init, batching, dropout) flows from the run seed through named
splitmix64 substreams, so a run is a pure function of (dataset, config).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import gridcube, pipeline
from .fusion import NEIGHBOR_RADIUS, build_neighbor_table
from .gridcube import ConfigError, Dataset
from .model import (
    ModelConfig,
    SPDroughtModel,
    build_model,
    init_parameters,
    masked_mae_loss,
    model_tensors,
    load_model_tensors,
)
from .pipeline import PreparedData, SplitAssignment, Window, block_split, enumerate_windows
from .rng import SplitMix64, substream_seed


class NonFiniteLoss(FloatingPointError):
    pass


class EmptySplit(ValueError):
    pass


VARIANTS = (
    "full",
    "no_static",
    "no_fusion",
    "no_encoder",
    "no_decoder",
    "context_50",
    "single_task",
    "temporal_split",
)


@dataclass(frozen=True)
class TrainConfig:
    """Protocol defaults: 30 epochs, batch 32, Adam 1e-4, 100-week context,
    26-week horizon and stride, 5x5 blocks with an 80/20 split."""

    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-4
    context: int = 100
    horizon: int = 26
    stride: int = 26
    block: int = 5
    train_frac: float = 0.8
    seed: int = 0
    variant: str = "full"
    task: int | None = None  # target index for the single_task variant

    def resolved(self) -> "TrainConfig":
        """Validate and apply variant-specific adjustments."""
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        cfg = self
        if cfg.variant == "context_50" and cfg.context != 50:
            cfg = replace(cfg, context=50)
        if cfg.variant == "single_task":
            if cfg.task is None or not 0 <= cfg.task < 3:
                raise ConfigError("single_task variant needs task in {0, 1, 2}")
        if min(cfg.epochs, cfg.batch_size, cfg.context, cfg.horizon, cfg.stride, cfg.block) < 1:
            raise ConfigError("counts must be positive")
        if cfg.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 < cfg.train_frac < 1.0:
            raise ConfigError("train_frac must be in (0, 1)")
        return cfg

    def model_config(self, n_classes: int) -> ModelConfig:
        cfg = self.resolved()
        return ModelConfig(
            n_classes=n_classes,
            context_len=cfg.context,
            horizon=cfg.horizon,
            use_static=cfg.variant != "no_static",
            use_fusion=cfg.variant != "no_fusion",
            use_encoder=cfg.variant != "no_encoder",
            use_decoder=cfg.variant != "no_decoder",
        )


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int
    m: list[torch.Tensor]
    v: list[torch.Tensor]

    @classmethod
    def for_params(cls, params: list[torch.Tensor]) -> "AdamState":
        return cls(
            step=0,
            m=[torch.zeros_like(p) for p in params],
            v=[torch.zeros_like(p) for p in params],
        )


def adam_step(
    params: list[torch.Tensor],
    grads: list[torch.Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard bias-corrected Adam update, in place."""
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt_().add_(eps), value=-lr)


# ---------------------------------------------------------------------------
# Staged tensors and batch assembly
# ---------------------------------------------------------------------------


class StagedData:
    """Prepared arrays as torch tensors plus the neighbor table."""

    def __init__(self, prepared: PreparedData, d: int = NEIGHBOR_RADIUS, dtype=torch.float32):
        nbr = build_neighbor_table(prepared, d)
        self.prepared = prepared
        self.dtype = dtype
        self.series = torch.from_numpy(prepared.series).to(dtype)
        self.target = torch.from_numpy(prepared.target).to(dtype)
        self.valid = torch.from_numpy(prepared.target_valid)
        self.numeric = torch.from_numpy(prepared.statics_numeric).to(dtype)
        self.cover = torch.from_numpy(prepared.land_cover)
        self.att = torch.from_numpy(prepared.attention_statics).to(dtype)
        self.nbr_idx = torch.from_numpy(nbr.idx)
        self.nbr_safe = self.nbr_idx.clamp(min=0)
        self.nbr_dist = torch.from_numpy(nbr.dist).to(dtype)
        self.nbr_mask = torch.from_numpy(nbr.mask)

    def batch(self, land_ids: torch.Tensor, window: Window):
        """Inputs and targets for a batch of land pixels in one window."""
        s, m, e = window.context_start, window.horizon_start, window.end
        members = self.nbr_safe[land_ids]  # (B, K)
        b, k = members.shape
        ctx = self.series[:, s:m]  # view (L, T, 14)
        series_members = ctx[members.reshape(-1)].reshape(b, k, m - s, ctx.shape[-1])
        return dict(
            att_center=self.att[land_ids],
            att_members=self.att[members.reshape(-1)].reshape(b, k, -1),
            distances=self.nbr_dist[land_ids],
            member_mask=self.nbr_mask[land_ids],
            series_members=series_members,
            numeric=self.numeric[land_ids],
            land_cover=self.cover[land_ids],
        ), self.target[land_ids, m:e], self.valid[land_ids, m:e]

    def land_ids_for(self, pixels: np.ndarray) -> torch.Tensor:
        ids = self.prepared.land_index_of(pixels)
        if (ids < 0).any():
            raise EmptySplit("split contains non-land pixels")
        return torch.from_numpy(ids)


# ---------------------------------------------------------------------------
# Evaluation reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalReport:
    """Masked MAE per drought index; totals are sums over the three."""

    mae: np.ndarray  # (3,)
    counts: np.ndarray  # (3,) scored entries per index

    @property
    def total(self) -> float:
        return float(self.mae.sum())

    def scaled(self) -> np.ndarray:
        """Display scaling: values are reported x 1e-3."""
        return self.mae * 1e3

    def to_text(self) -> str:
        lines = ["# masked MAE (x 1e-3)"]
        for name, val, n in zip(gridcube.INDEX_NAMES, self.scaled(), self.counts):
            lines.append(f"{name} {val:.4f} n={int(n)}")
        lines.append(f"total {self.total * 1e3:.4f}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class EvalSummary:
    """Mean and standard deviation of EvalReports across runs."""

    mean_mae: np.ndarray
    std_mae: np.ndarray
    mean_total: float
    std_total: float

    @classmethod
    def from_reports(cls, reports: list[EvalReport]) -> "EvalSummary":
        maes = np.stack([r.mae for r in reports])
        totals = np.array([r.total for r in reports])
        return cls(
            mean_mae=maes.mean(axis=0),
            std_mae=maes.std(axis=0),
            mean_total=float(totals.mean()),
            std_total=float(totals.std()),
        )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class TrainResult:
    tensors: dict[str, np.ndarray]
    loss_trace: np.ndarray  # (epochs,) mean step loss
    split: SplitAssignment
    train_windows: list[Window]
    eval_windows: list[Window]
    config: TrainConfig
    model_config: ModelConfig
    model: SPDroughtModel = field(repr=False, default=None)
    staged: StagedData = field(repr=False, default=None)

    def loss_trace_text(self) -> str:
        return "".join(f"{i} {float(v)!r}\n" for i, v in enumerate(self.loss_trace))


def _as_prepared(data) -> PreparedData:
    return pipeline.prepare(data) if isinstance(data, Dataset) else data


def _windows_for(cfg: TrainConfig, weeks: int) -> tuple[list[Window], list[Window]]:
    """Training and evaluation windows; the temporal_split variant holds
    out the last window for evaluation."""
    windows = enumerate_windows(weeks, cfg.context, cfg.horizon, cfg.stride)
    if not windows:
        raise ConfigError("record too short for a single window")
    if cfg.variant == "temporal_split":
        if len(windows) < 2:
            raise ConfigError("temporal_split needs at least 2 windows")
        return windows[:-1], windows[-1:]
    return windows, windows


def _task_mask(valid: torch.Tensor, task: int | None) -> torch.Tensor:
    if task is None:
        return valid
    masked = torch.zeros_like(valid)
    masked[..., task] = valid[..., task]
    return masked


def train(data, cfg: TrainConfig, staged: StagedData | None = None) -> TrainResult:
    """Run the full training protocol on a (raw or prepared) dataset."""
    cfg = cfg.resolved()
    prepared = _as_prepared(data)
    staged = staged or StagedData(prepared)
    split = block_split(prepared.spec, cfg.block, cfg.train_frac, substream_seed(cfg.seed, "split"))
    train_windows, eval_windows = _windows_for(cfg, prepared.weeks)

    model = build_model(cfg.model_config(prepared.n_classes))
    init_parameters(model, SplitMix64(substream_seed(cfg.seed, "init")))
    model.dropout_rng = SplitMix64(substream_seed(cfg.seed, "dropout"))
    batch_rng = SplitMix64(substream_seed(cfg.seed, "batch"))

    train_ids = staged.land_ids_for(split.train_pixels)
    if train_ids.numel() == 0:
        raise EmptySplit("no training pixels")
    n_train = train_ids.numel()
    n_windows = len(train_windows)

    params = [p for _, p in model.named_parameters()]
    zeros = [torch.zeros_like(p) for p in params]
    state = AdamState.for_params(params)

    trace = np.zeros(cfg.epochs, dtype=np.float64)
    model.train()
    for epoch in range(cfg.epochs):
        order = batch_rng.permutation(n_train)
        loss_sum, loss_steps = 0.0, 0
        for start in range(0, n_train, cfg.batch_size):
            batch_ids = train_ids[torch.from_numpy(order[start : start + cfg.batch_size])]
            for wi in batch_rng.permutation(n_windows):
                window = train_windows[int(wi)]
                inputs, target, valid = staged.batch(batch_ids, window)
                valid = _task_mask(valid, cfg.task if cfg.variant == "single_task" else None)
                pred = model.forward_from_neighbors(**inputs)
                loss = masked_mae_loss(pred, target, valid)
                value = float(loss.detach())
                if not math.isfinite(value):
                    raise NonFiniteLoss(
                        f"non-finite loss at epoch {epoch}, batch start {start}, "
                        f"window {window.context_start}"
                    )
                for p in params:
                    p.grad = None
                loss.backward()
                grads = [p.grad if p.grad is not None else z for p, z in zip(params, zeros)]
                adam_step(params, grads, state, cfg.learning_rate)
                if valid.any():
                    loss_sum += value
                    loss_steps += 1
        trace[epoch] = loss_sum / max(loss_steps, 1)
    model.eval()

    return TrainResult(
        tensors=model_tensors(model),
        loss_trace=trace,
        split=split,
        train_windows=train_windows,
        eval_windows=eval_windows,
        config=cfg,
        model_config=model.cfg,
        model=model,
        staged=staged,
    )


def model_from_checkpoint(
    tensors: dict[str, np.ndarray], cfg: TrainConfig, n_classes: int
) -> SPDroughtModel:
    model = build_model(cfg.resolved().model_config(n_classes))
    load_model_tensors(model, tensors)
    model.eval()
    return model


def evaluate(
    model: SPDroughtModel,
    data,
    split: SplitAssignment,
    cfg: TrainConfig,
    windows: list[Window] | None = None,
    staged: StagedData | None = None,
    eval_batch: int = 64,
) -> EvalReport:
    """Masked MAE per index over all test pixels and windows."""
    cfg = cfg.resolved()
    prepared = _as_prepared(data)
    staged = staged or StagedData(prepared)
    if windows is None:
        windows = _windows_for(cfg, prepared.weeks)[1]
    test_ids = staged.land_ids_for(split.test_pixels)
    if test_ids.numel() == 0 or not windows:
        raise EmptySplit("nothing to evaluate")

    was_training = model.training
    model.eval()
    abs_sum = np.zeros(3, dtype=np.float64)
    count = np.zeros(3, dtype=np.float64)
    with torch.no_grad():
        for window in windows:
            for start in range(0, test_ids.numel(), eval_batch):
                ids = test_ids[start : start + eval_batch]
                inputs, target, valid = staged.batch(ids, window)
                err = (model.forward_from_neighbors(**inputs) - target).abs()
                err = torch.where(valid, err, torch.zeros_like(err))
                abs_sum += err.sum(dim=(0, 1)).double().numpy()
                count += valid.sum(dim=(0, 1)).double().numpy()
    if was_training:
        model.train()
    with np.errstate(invalid="ignore"):
        mae = np.where(count > 0, abs_sum / np.maximum(count, 1), np.nan)
    return EvalReport(mae=mae, counts=count)


# ---------------------------------------------------------------------------
# Naive baselines
# ---------------------------------------------------------------------------


def persistence_forecast(context: np.ndarray, horizon: int = 26) -> np.ndarray:
    """Repeat the last context value of each channel over the horizon."""
    context = np.asarray(context)
    return np.repeat(context[-1:, :], horizon, axis=0)


def climatology_forecast(
    context: np.ndarray, weeks_per_year: int, horizon: int = 26
) -> np.ndarray:
    """Predict each horizon week with the mean of the context values at the
    same calendar week (positions congruent modulo weeks_per_year)."""
    context = np.asarray(context)
    t = context.shape[0]
    if t < weeks_per_year:
        raise ConfigError("context must cover at least one year")
    out = np.empty((horizon, context.shape[1]), dtype=np.float64)
    positions = np.arange(t)
    for j in range(horizon):
        same_week = positions[(t + j - positions) % weeks_per_year == 0]
        out[j] = context[same_week].mean(axis=0)
    return out


def baseline_eval(
    prepared: PreparedData,
    split: SplitAssignment,
    cfg: TrainConfig,
    kind: str,
    windows: list[Window] | None = None,
) -> EvalReport:
    """Evaluate a naive baseline with the model's protocol and masking.

    Baselines consume the raw center pixel's (gap-filled, normalized)
    index series; no fusion and no statics.
    """
    cfg = cfg.resolved()
    if windows is None:
        windows = _windows_for(cfg, prepared.weeks)[1]
    ids = prepared.land_index_of(split.test_pixels)
    if ids.size == 0 or not windows:
        raise EmptySplit("nothing to evaluate")
    abs_sum = np.zeros(3, dtype=np.float64)
    count = np.zeros(3, dtype=np.float64)
    wpy = prepared.spec.weeks_per_year
    for window in windows:
        s, m, e = window.context_start, window.horizon_start, window.end
        ctx = prepared.target[ids, s:m]  # (n, T, 3) gap-filled indices
        target = prepared.target[ids, m:e]
        valid = prepared.target_valid[ids, m:e]
        for i in range(ids.size):
            if kind == "persistence":
                pred = persistence_forecast(ctx[i], cfg.horizon)
            elif kind == "climatology":
                pred = climatology_forecast(ctx[i], wpy, cfg.horizon)
            else:
                raise ConfigError(f"unknown baseline {kind!r}")
            err = np.abs(pred - target[i])
            abs_sum += np.where(valid[i], err, 0.0).sum(axis=0)
            count += valid[i].sum(axis=0)
    with np.errstate(invalid="ignore"):
        mae = np.where(count > 0, abs_sum / np.maximum(count, 1), np.nan)
    return EvalReport(mae=mae, counts=count)


# ---------------------------------------------------------------------------
# DLinear baseline
# ---------------------------------------------------------------------------


class DLinearModel(torch.nn.Module):
    """Trend/remainder decomposition with per-channel affine maps.

    The trend is a centered moving average (kernel 25, reflect-padded);
    trend and remainder are each mapped context -> horizon by their own
    linear layer per channel, and the branches are summed.
    """

    def __init__(self, context: int, horizon: int, channels: int = 3, kernel: int = 25):
        super().__init__()
        if kernel % 2 != 1:
            raise ConfigError("moving-average kernel must be odd")
        self.kernel = kernel
        self.channels = channels
        self.trend_maps = torch.nn.ModuleList(
            torch.nn.Linear(context, horizon) for _ in range(channels)
        )
        self.remainder_maps = torch.nn.ModuleList(
            torch.nn.Linear(context, horizon) for _ in range(channels)
        )

    def decompose(self, series: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """series (B, T, C) -> (trend, remainder), trend + remainder == series."""
        b, t, c = series.shape
        pad = self.kernel // 2
        x = series.permute(0, 2, 1).reshape(b * c, 1, t)
        x = torch.nn.functional.pad(x, (pad, pad), mode="reflect")
        weight = torch.full((1, 1, self.kernel), 1.0 / self.kernel, dtype=series.dtype)
        trend = torch.nn.functional.conv1d(x, weight).reshape(b, c, t).permute(0, 2, 1)
        return trend, series - trend

    def forward(self, series: torch.Tensor) -> torch.Tensor:
        trend, remainder = self.decompose(series)
        outs = []
        for c in range(self.channels):
            outs.append(self.trend_maps[c](trend[..., c]) + self.remainder_maps[c](remainder[..., c]))
        return torch.stack(outs, dim=-1)


def dlinear_forecast(context: np.ndarray, model: DLinearModel) -> np.ndarray:
    """(T, 3) context -> (horizon, 3) forecast with a trained DLinear."""
    with torch.no_grad():
        x = torch.from_numpy(np.asarray(context, dtype=np.float32)).unsqueeze(0)
        return model(x).squeeze(0).numpy()


def train_dlinear(data, cfg: TrainConfig) -> tuple[DLinearModel, SplitAssignment, np.ndarray]:
    """Train the DLinear baseline with the same protocol, loss, and Adam."""
    cfg = cfg.resolved()
    prepared = _as_prepared(data)
    split = block_split(prepared.spec, cfg.block, cfg.train_frac, substream_seed(cfg.seed, "split"))
    train_windows, _ = _windows_for(cfg, prepared.weeks)

    model = DLinearModel(cfg.context, cfg.horizon)
    init_parameters(model, SplitMix64(substream_seed(cfg.seed, "init")))
    batch_rng = SplitMix64(substream_seed(cfg.seed, "batch"))

    ids = prepared.land_index_of(split.train_pixels)
    series = torch.from_numpy(prepared.target)
    valid_all = torch.from_numpy(prepared.target_valid)
    params = [p for _, p in model.named_parameters()]
    state = AdamState.for_params(params)
    trace = np.zeros(cfg.epochs, dtype=np.float64)

    model.train()
    for epoch in range(cfg.epochs):
        order = batch_rng.permutation(ids.size)
        loss_sum, steps = 0.0, 0
        for start in range(0, ids.size, cfg.batch_size):
            batch = torch.from_numpy(ids[order[start : start + cfg.batch_size]])
            for wi in batch_rng.permutation(len(train_windows)):
                w = train_windows[int(wi)]
                ctx = series[batch, w.context_start : w.horizon_start]
                target = series[batch, w.horizon_start : w.end]
                valid = valid_all[batch, w.horizon_start : w.end]
                loss = masked_mae_loss(model(ctx), target, valid)
                if not math.isfinite(float(loss.detach())):
                    raise NonFiniteLoss(f"non-finite DLinear loss at epoch {epoch}")
                for p in params:
                    p.grad = None
                loss.backward()
                grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]
                adam_step(params, grads, state, cfg.learning_rate)
                if valid.any():
                    loss_sum += float(loss.detach())
                    steps += 1
        trace[epoch] = loss_sum / max(steps, 1)
    model.eval()
    return model, split, trace


def dlinear_eval(
    model: DLinearModel,
    prepared: PreparedData,
    split: SplitAssignment,
    cfg: TrainConfig,
    windows: list[Window] | None = None,
) -> EvalReport:
    cfg = cfg.resolved()
    if windows is None:
        windows = _windows_for(cfg, prepared.weeks)[1]
    ids = prepared.land_index_of(split.test_pixels)
    if ids.size == 0 or not windows:
        raise EmptySplit("nothing to evaluate")
    series = torch.from_numpy(prepared.target)
    valid_all = torch.from_numpy(prepared.target_valid)
    abs_sum = np.zeros(3, dtype=np.float64)
    count = np.zeros(3, dtype=np.float64)
    with torch.no_grad():
        for w in windows:
            ctx = series[torch.from_numpy(ids), w.context_start : w.horizon_start]
            target = series[torch.from_numpy(ids), w.horizon_start : w.end]
            valid = valid_all[torch.from_numpy(ids), w.horizon_start : w.end]
            err = (model(ctx) - target).abs()
            err = torch.where(valid, err, torch.zeros_like(err))
            abs_sum += err.sum(dim=(0, 1)).double().numpy()
            count += valid.sum(dim=(0, 1)).double().numpy()
    with np.errstate(invalid="ignore"):
        mae = np.where(count > 0, abs_sum / np.maximum(count, 1), np.nan)
    return EvalReport(mae=mae, counts=count)


# ---------------------------------------------------------------------------
# Feature importance by single-epoch channel ablation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ImportanceTable:
    """First-epoch loss deltas from zeroing one dynamic predictor at a time."""

    baseline_loss: float
    rows: tuple[tuple[str, float], ...]  # (channel name, delta) sorted descending

    def to_text(self) -> str:
        lines = [f"# baseline first-epoch loss {self.baseline_loss!r}"]
        for name, delta in self.rows:
            lines.append(f"{name} {delta!r}")
        return "\n".join(lines) + "\n"


def feature_importance_by_ablation(data, cfg: TrainConfig) -> ImportanceTable:
    """Retrain one epoch per dynamic predictor with that channel zeroed;
    importance = first-epoch loss delta against the all-features baseline
    (same seed, so the comparison is exact)."""
    cfg = replace(cfg.resolved(), epochs=1)
    prepared = _as_prepared(data)
    baseline = float(train(prepared, cfg).loss_trace[0])
    deltas = []
    for c, name in enumerate(gridcube.DYNAMIC_NAMES):
        series = prepared.series.copy()
        series[..., 3 + c] = 0.0
        ablated = replace(prepared, series=series)
        loss = float(train(ablated, cfg).loss_trace[0])
        deltas.append((name, loss - baseline))
    deltas.sort(key=lambda item: item[1], reverse=True)
    return ImportanceTable(baseline_loss=baseline, rows=tuple(deltas))
