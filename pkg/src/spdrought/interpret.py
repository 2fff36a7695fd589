"""Integrated-gradients attribution over the model's fused input series.

Attributions integrate the gradient of one scalar output (one drought
index at one horizon week) along the straight path from a baseline to the
input, using the midpoint Riemann rule:

    IG_i = (x_i - x'_i) * (1/m) * sum_k dF/dx_i at x' + ((k+0.5)/m)(x - x')

The midpoint rule is exact for linear gradients, so a linear model's
attribution equals w_i * x_i for any m >= 1, and the completeness
identity sum(IG) = F(x) - F(x') holds up to quadrature error.

The default baseline is the all-zeros input in normalized space (the
minimum-activity point of the normalized domain).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import gridcube
from .model import SPDroughtModel
from .pipeline import PreparedData, SplitAssignment, Window
from .trainer import EmptySplit, StagedData

DEFAULT_STEPS = 128


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True, eq=False)
class AttributionMap:
    """Per-coordinate integrated-gradient values for one scalar output."""

    values: np.ndarray  # same shape as the attributed input
    baseline: str
    steps: int


def integrated_gradients(
    f,
    x: torch.Tensor,
    baseline: torch.Tensor | None = None,
    steps: int = DEFAULT_STEPS,
    chunk: int = 64,
) -> AttributionMap:
    """Midpoint-rule integrated gradients of scalar-valued ``f``.

    ``f`` maps a batch of inputs (n, *x.shape) to a vector of n scalar
    outputs. ``baseline`` defaults to zeros. Raises
    :class:`NonFiniteGradient` if any path gradient is non-finite.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = torch.as_tensor(x)
    ref = torch.zeros_like(x) if baseline is None else torch.as_tensor(baseline)
    if ref.shape != x.shape:
        raise ValueError("baseline must match input shape")
    delta = x - ref
    total = torch.zeros_like(x)
    alphas = (torch.arange(steps, dtype=x.dtype) + 0.5) / steps
    for start in range(0, steps, chunk):
        a = alphas[start : start + chunk]
        shape = (a.numel(),) + (1,) * x.dim()
        points = (ref.unsqueeze(0) + a.view(shape) * delta.unsqueeze(0)).detach()
        points.requires_grad_(True)
        outputs = f(points)
        if outputs.shape != (a.numel(),):
            raise ValueError("f must return one scalar per path point")
        (grad,) = torch.autograd.grad(outputs.sum(), points)
        if not torch.isfinite(grad).all():
            raise NonFiniteGradient("non-finite gradient along the path")
        total = total + grad.sum(dim=0)
    values = (delta * total / steps).detach().cpu().numpy()
    return AttributionMap(
        values=values,
        baseline="zeros" if baseline is None else "custom",
        steps=steps,
    )


def completeness_gap(
    attribution: AttributionMap, f, x: torch.Tensor, baseline: torch.Tensor | None = None
) -> float:
    """|sum(IG) - (F(x) - F(x'))| / max(|F(x) - F(x')|, 1e-12)."""
    x = torch.as_tensor(x)
    ref = torch.zeros_like(x) if baseline is None else torch.as_tensor(baseline)
    with torch.no_grad():
        outputs = f(torch.stack([x, ref]))
    delta_f = float(outputs[0] - outputs[1])
    gap = abs(float(attribution.values.sum()) - delta_f)
    return gap / max(abs(delta_f), 1e-12)


def output_selector(
    model: SPDroughtModel,
    numeric: torch.Tensor,
    land_cover: torch.Tensor,
    index: int,
    horizon_week: int = 0,
):
    """Batched scalar readout: index ``index`` at ``horizon_week``, with the
    static inputs held fixed."""

    def f(points: torch.Tensor) -> torch.Tensor:
        n = points.shape[0]
        pred = model(
            points,
            numeric.unsqueeze(0).expand(n, -1).to(points.dtype),
            land_cover.expand(n),
        )
        return pred[:, horizon_week, index]

    return f


def fused_context(
    model: SPDroughtModel, staged: StagedData, land_id: int, window: Window
) -> torch.Tensor:
    """The model's fused input series for one pixel and window (no grad)."""
    inputs, _, _ = staged.batch(torch.tensor([land_id]), window)
    with torch.no_grad():
        fused = model.fuse_neighbors(
            inputs["att_center"],
            inputs["att_members"],
            inputs["distances"],
            inputs["member_mask"],
            inputs["series_members"],
        )
    return fused.squeeze(0)


def lag_attribution_grid(
    model: SPDroughtModel,
    prepared: PreparedData,
    split: SplitAssignment,
    index: int,
    week: int,
    lag: int = 1,
    steps: int = DEFAULT_STEPS,
    staged: StagedData | None = None,
) -> dict[str, np.ndarray]:
    """Lagged attribution rasters over test pixels.

    ``week`` is the first horizon week; the window's context covers the
    ``context_len`` weeks before it. For every test pixel the integrated
    gradient of (index, first horizon week) is computed over the fused
    input, and the value at context position ``context_len - lag`` is
    exported per dynamic predictor. Non-test pixels (ocean included) are
    NaN.
    """
    staged = staged or StagedData(prepared)
    cfg = model.cfg
    if not 1 <= lag <= cfg.context_len:
        raise ValueError("lag must be in [1, context_len]")
    if week < cfg.context_len or week >= prepared.weeks:
        raise ValueError("week leaves no room for the context window")
    window = Window(week - cfg.context_len, cfg.context_len, min(cfg.horizon, prepared.weeks - week))
    ids = prepared.land_index_of(split.test_pixels)
    if ids.size == 0:
        raise EmptySplit("no test pixels")

    model.eval()
    rasters = {
        name: np.full((prepared.spec.rows, prepared.spec.cols), np.nan)
        for name in gridcube.DYNAMIC_NAMES
    }
    position = cfg.context_len - lag
    for land_id, (r, c) in zip(ids, split.test_pixels):
        fused = fused_context(model, staged, int(land_id), window)
        numeric = staged.numeric[land_id]
        cover = staged.cover[land_id : land_id + 1]
        f = output_selector(model, numeric, cover, index, horizon_week=0)
        attribution = integrated_gradients(f, fused, steps=steps)
        for ci, name in enumerate(gridcube.DYNAMIC_NAMES):
            rasters[name][r, c] = attribution.values[position, 3 + ci]
    return rasters
