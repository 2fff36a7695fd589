"""Distance-scaled spatial attention over static features.

Each land pixel attends over its (2d+1)x(2d+1) square neighborhood using
the nine static predictors as query/key inputs. The attention logit for
member m is

    (s_center . Wq) . (s_m . Wk) / (r_m * sqrt(N))

where r_m is the euclidean pixel distance to the member (0.8 for the
center itself, so its logit is well defined and slightly sharpened), and
the per-key division by r_m downweights far neighbors. The softmax
weights then form a convex combination of the members' time-varying
series.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .gridcube import GridSpec
from .pipeline import PreparedData

NEIGHBOR_RADIUS = 2
SELF_DISTANCE = 0.8
N_STATIC = 9


class IsolatedPixel(ValueError):
    pass


class NonFiniteLogit(FloatingPointError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Neighborhood:
    """Members of one pixel's attention square: ((row, col), distance)."""

    center: tuple[int, int]
    members: tuple[tuple[tuple[int, int], float], ...]

    def __len__(self) -> int:
        return len(self.members)


def neighborhood(
    center: tuple[int, int],
    d: int,
    spec: GridSpec,
    valid: np.ndarray | None = None,
) -> Neighborhood:
    """All valid land pixels in the (2d+1)^2 square around ``center``.

    The center is listed first with distance 0.8; other members carry
    their euclidean pixel distance. ``valid`` restricts membership to
    pixels with usable statics (defaults to the land mask).
    """
    r0, c0 = center
    ok = spec.land_mask if valid is None else (spec.land_mask & valid)
    if not ok[r0, c0]:
        raise IsolatedPixel(f"center {center} is not a valid land pixel")
    members = [((r0, c0), SELF_DISTANCE)]
    for r in range(max(0, r0 - d), min(spec.rows, r0 + d + 1)):
        for c in range(max(0, c0 - d), min(spec.cols, c0 + d + 1)):
            if (r, c) == (r0, c0) or not ok[r, c]:
                continue
            members.append(((r, c), math.hypot(r - r0, c - c0)))
    return Neighborhood(center=center, members=tuple(members))


def spatial_attention(
    s_center: torch.Tensor,
    s_members: torch.Tensor,
    distances: torch.Tensor,
    w_query: torch.Tensor,
    w_key: torch.Tensor,
    member_mask: torch.Tensor | None = None,
    check: bool = True,
) -> torch.Tensor:
    """Softmax weights over neighborhood members.

    Shapes: s_center (..., N), s_members (..., K, N), distances (..., K);
    returns (..., K). ``member_mask`` marks real members when K is padded;
    padded slots get weight 0. Raises :class:`NonFiniteLogit` if any real
    logit is non-finite.
    """
    if s_members.shape[-1] != s_center.shape[-1]:
        raise ShapeMismatch("static dimension mismatch between center and members")
    if distances.shape != s_members.shape[:-1]:
        raise ShapeMismatch("distances shape must match member count")
    n = s_center.shape[-1]
    q = s_center @ w_query  # (..., N)
    k = s_members @ w_key  # (..., K, N)
    logits = (k @ q.unsqueeze(-1)).squeeze(-1) / (distances * math.sqrt(n))
    if member_mask is None:
        if check and not torch.isfinite(logits).all():
            raise NonFiniteLogit("non-finite attention logit")
        return torch.softmax(logits, dim=-1)
    if check and not torch.isfinite(logits[member_mask]).all():
        raise NonFiniteLogit("non-finite attention logit")
    logits = torch.where(member_mask, logits, torch.full_like(logits, -torch.inf))
    return torch.softmax(logits, dim=-1)


def fuse_series(weights: torch.Tensor, u_members: torch.Tensor) -> torch.Tensor:
    """Convex combination of member series.

    weights (..., K) from :func:`spatial_attention`; u_members
    (..., K, T, C); returns (..., T, C).
    """
    if weights.shape != u_members.shape[:-2]:
        raise ShapeMismatch(
            f"weights {tuple(weights.shape)} do not match members "
            f"{tuple(u_members.shape[:-2])}"
        )
    return torch.einsum("...k,...ktc->...tc", weights, u_members)


class FusionAttention(nn.Module):
    """Learnable query/key maps for the neighborhood attention."""

    def __init__(self, n_static: int = N_STATIC, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.w_query = nn.Parameter(torch.zeros(n_static, n_static, dtype=dtype))
        self.w_key = nn.Parameter(torch.zeros(n_static, n_static, dtype=dtype))

    def forward(self, s_center, s_members, distances, member_mask=None, check=True):
        return spatial_attention(
            s_center, s_members, distances, self.w_query, self.w_key, member_mask, check
        )


def one_hot_center(member_mask: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    """Weights that select slot 0 (the center), bypassing fusion."""
    w = torch.zeros(member_mask.shape, dtype=dtype, device=member_mask.device)
    w[..., 0] = 1.0
    return w


@dataclass(frozen=True, eq=False)
class NeighborTable:
    """Padded neighborhood arrays for all land pixels.

    Slot 0 is always the pixel itself (distance 0.8); remaining slots hold
    square-neighborhood members in row-major order, padded with -1.
    """

    idx: np.ndarray  # int64 (L, K) land indices, -1 padding
    dist: np.ndarray  # float32 (L, K)
    mask: np.ndarray  # bool (L, K)
    radius: int


def build_neighbor_table(prepared: PreparedData, d: int = NEIGHBOR_RADIUS) -> NeighborTable:
    """Vectorized neighborhoods over all land pixels of a prepared dataset."""
    spec = prepared.spec
    land_id = prepared.land_id
    rc = prepared.land_rc
    L = rc.shape[0]
    offsets = [(dr, dc) for dr in range(-d, d + 1) for dc in range(-d, d + 1) if (dr, dc) != (0, 0)]
    K = 1 + len(offsets)
    idx = np.full((L, K), -1, dtype=np.int64)
    dist = np.full((L, K), 1.0, dtype=np.float32)
    idx[:, 0] = np.arange(L)
    dist[:, 0] = SELF_DISTANCE
    for slot, (dr, dc) in enumerate(offsets, start=1):
        r = rc[:, 0] + dr
        c = rc[:, 1] + dc
        inside = (r >= 0) & (r < spec.rows) & (c >= 0) & (c < spec.cols)
        nbr = np.where(inside, land_id[np.clip(r, 0, spec.rows - 1), np.clip(c, 0, spec.cols - 1)], -1)
        idx[:, slot] = nbr
        dist[:, slot] = math.hypot(dr, dc)
    return NeighborTable(idx=idx, dist=dist, mask=idx >= 0, radius=d)
