"""The forecasting network and its differentiation/persistence contracts.

Architecture: a static branch (two-layer MLP for the 8 numeric predictors,
a 4-wide embedding for land cover) and a dynamic branch (linear projection
of the 14 fused channels to width 48 with input dropout, sinusoidal
positional encoding, 3 pre-norm transformer encoder layers). The encoder
output is concatenated with the static representation at every timestep,
re-projected back to width 48, and consumed by a 2-layer decoder driven by
26 learned query tokens, one per horizon week. Three affine heads read the
horizon representations into the three drought indices.

All modules are ordinary torch modules, so gradients of the masked MAE
loss with respect to every parameter and to the inputs are available for
training and for attribution.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn

from .crc64 import crc64
from .fusion import FusionAttention, N_STATIC, fuse_series, one_hot_center
from .rng import SplitMix64

CHECKPOINT_MAGIC = b"SPCK"
CHECKPOINT_VERSION = 1


class IdOutOfRange(IndexError):
    pass


class NonFiniteActivation(FloatingPointError):
    pass


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture constants plus the ablation gates.

    The gates keep the parameter set identical across variants: disabled
    branches still exist (and are initialized) but are bypassed in the
    forward pass, so two variants with equal parameter values are directly
    comparable.
    """

    n_classes: int
    in_channels: int = 14
    d_model: int = 48
    n_heads: int = 2
    ff_dim: int = 256
    n_encoder_layers: int = 3
    n_decoder_layers: int = 2
    context_len: int = 100
    horizon: int = 26
    static_numeric: int = 8
    static_hidden: int = 10
    static_out: int = 16
    embed_dim: int = 4
    dropout: float = 0.1
    use_fusion: bool = True
    use_static: bool = True
    use_encoder: bool = True
    use_decoder: bool = True

    @property
    def static_dim(self) -> int:
        return self.static_out + self.embed_dim

    @classmethod
    def reduced(cls, n_classes: int = 4, **overrides) -> "ModelConfig":
        """Small configuration for gradient checks and fast tests."""
        base = cls(
            n_classes=n_classes,
            d_model=8,
            n_heads=2,
            ff_dim=16,
            n_encoder_layers=1,
            n_decoder_layers=1,
            context_len=10,
            horizon=3,
            static_hidden=5,
            static_out=6,
            embed_dim=2,
            dropout=0.0,
        )
        return replace(base, **overrides)


def positional_encoding(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal table: PE(t, 2i) = sin(t/10000^(2i/dim)), odd entries cos."""
    if dim % 2 != 0:
        raise ValueError("positional encoding dimension must be even")
    t = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    freq = torch.pow(10000.0, -torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    args = t * freq
    pe = torch.empty(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(args)
    pe[:, 1::2] = torch.cos(args)
    return pe.to(dtype)


class StaticEncoder(nn.Module):
    """MLP over numeric statics concatenated with a land-cover embedding."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fc1 = nn.Linear(cfg.static_numeric, cfg.static_hidden)
        self.fc2 = nn.Linear(cfg.static_hidden, cfg.static_out)
        self.embedding = nn.Embedding(cfg.n_classes, cfg.embed_dim)
        self.n_classes = cfg.n_classes

    def forward(self, numeric: torch.Tensor, land_cover: torch.Tensor) -> torch.Tensor:
        if (land_cover < 0).any() or (land_cover >= self.n_classes).any():
            raise IdOutOfRange("land-cover id outside [0, n_classes)")
        hidden = torch.relu(self.fc1(numeric))
        return torch.cat([self.fc2(hidden), self.embedding(land_cover)], dim=-1)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.wq = nn.Linear(d_model, d_model)
        self.wk = nn.Linear(d_model, d_model)
        self.wv = nn.Linear(d_model, d_model)
        self.wo = nn.Linear(d_model, d_model)

    def forward(self, query: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        b, tq, d = query.shape
        tk = memory.shape[1]
        h, dh = self.n_heads, d // self.n_heads
        q = self.wq(query).view(b, tq, h, dh).transpose(1, 2)
        k = self.wk(memory).view(b, tk, h, dh).transpose(1, 2)
        v = self.wv(memory).view(b, tk, h, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        out = torch.softmax(scores, dim=-1) @ v
        return self.wo(out.transpose(1, 2).reshape(b, tq, d))


class FeedForward(nn.Module):
    def __init__(self, d_model: int, ff_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(d_model, ff_dim)
        self.fc2 = nn.Linear(ff_dim, d_model)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x)))


class EncoderLayer(nn.Module):
    """Pre-norm residual block: self-attention then feed-forward."""

    def __init__(self, d_model: int, n_heads: int, ff_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, ff_dim)

    def forward(self, x):
        y = self.norm1(x)
        x = x + self.attn(y, y)
        return x + self.ff(self.norm2(x))


class DecoderLayer(nn.Module):
    """Pre-norm residual block: query self-attention, cross-attention, FF."""

    def __init__(self, d_model: int, n_heads: int, ff_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.norm3 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, ff_dim)

    def forward(self, x, memory):
        y = self.norm1(x)
        x = x + self.self_attn(y, y)
        x = x + self.cross_attn(self.norm2(x), memory)
        return x + self.ff(self.norm3(x))


class SPDroughtModel(nn.Module):
    """Fusion + static/dynamic representation + horizon decoding + heads."""

    N_TASKS = 3

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.fusion = FusionAttention(N_STATIC)
        self.static_encoder = StaticEncoder(cfg)
        self.input_proj = nn.Linear(cfg.in_channels, cfg.d_model)
        self.encoder_layers = nn.ModuleList(
            EncoderLayer(cfg.d_model, cfg.n_heads, cfg.ff_dim)
            for _ in range(cfg.n_encoder_layers)
        )
        self.encoder_norm = nn.LayerNorm(cfg.d_model)
        self.memory_proj = nn.Linear(cfg.d_model + cfg.static_dim, cfg.d_model)
        self.queries = nn.Parameter(torch.zeros(cfg.horizon, cfg.d_model))
        self.decoder_layers = nn.ModuleList(
            DecoderLayer(cfg.d_model, cfg.n_heads, cfg.ff_dim)
            for _ in range(cfg.n_decoder_layers)
        )
        self.decoder_norm = nn.LayerNorm(cfg.d_model)
        self.heads = nn.ModuleList(nn.Linear(cfg.d_model, 1) for _ in range(self.N_TASKS))
        # horizon readout used when the decoder is ablated: a learned linear
        # map over the time axis from context weeks to horizon weeks
        self.time_mix = nn.Linear(cfg.context_len, cfg.horizon)
        self.register_buffer("pe_context", positional_encoding(cfg.context_len, cfg.d_model))
        self.register_buffer("pe_horizon", positional_encoding(cfg.horizon, cfg.d_model))
        self.dropout_rng: SplitMix64 | None = None
        # data-dependent guards; batched transforms (torch.func) must disable them
        self.runtime_checks = True

    # -- building blocks -------------------------------------------------

    def _dropout(self, x: torch.Tensor) -> torch.Tensor:
        p = self.cfg.dropout
        if not self.training or p <= 0.0:
            return x
        if self.dropout_rng is None:
            raise RuntimeError("train-mode dropout requires dropout_rng to be set")
        keep = self.dropout_rng.uniform(x.numel()) >= p
        mask = torch.from_numpy(keep.reshape(x.shape)).to(dtype=x.dtype, device=x.device)
        return x * mask / (1.0 - p)

    def static_representation(self, numeric: torch.Tensor, land_cover: torch.Tensor):
        return self.static_encoder(numeric, land_cover)

    def encode_dynamic(self, series: torch.Tensor) -> torch.Tensor:
        """(B, T, 14) fused series -> (B, T, d_model) temporal representation."""
        squeeze = series.dim() == 2
        if squeeze:
            series = series.unsqueeze(0)
        t = series.shape[1]
        x = self._dropout(self.input_proj(series))
        x = x + self.pe_context[:t].to(x.dtype)
        if self.cfg.use_encoder:
            for layer in self.encoder_layers:
                x = layer(x)
            x = self.encoder_norm(x)
        if self.runtime_checks and not torch.isfinite(x).all():
            raise NonFiniteActivation("encoder produced a non-finite activation")
        return x.squeeze(0) if squeeze else x

    def decode_horizon(self, encoded: torch.Tensor, static_repr: torch.Tensor):
        """Memory = [encoded || static] re-projected; queries decode the horizon."""
        squeeze = encoded.dim() == 2
        if squeeze:
            encoded = encoded.unsqueeze(0)
            static_repr = static_repr.unsqueeze(0)
        b, t, _ = encoded.shape
        mem_in = torch.cat([encoded, static_repr.unsqueeze(1).expand(-1, t, -1)], dim=-1)
        memory = self.memory_proj(mem_in)
        if self.cfg.use_decoder:
            x = (self.queries + self.pe_horizon.to(memory.dtype)).unsqueeze(0).expand(b, -1, -1)
            for layer in self.decoder_layers:
                x = layer(x, memory)
            x = self.decoder_norm(x)
        else:
            x = self.time_mix(memory.transpose(1, 2)).transpose(1, 2)
        if self.runtime_checks and not torch.isfinite(x).all():
            raise NonFiniteActivation("decoder produced a non-finite activation")
        return x.squeeze(0) if squeeze else x

    def predict_indices(self, horizon_repr: torch.Tensor) -> torch.Tensor:
        return torch.cat([head(horizon_repr) for head in self.heads], dim=-1)

    # -- end-to-end paths -------------------------------------------------

    def forward(self, series, numeric, land_cover):
        """(B, T, 14), (B, 8), (B,) -> (B, horizon, 3)."""
        encoded = self.encode_dynamic(series)
        if self.cfg.use_static:
            static_repr = self.static_representation(numeric, land_cover)
        else:
            static_repr = torch.zeros(
                numeric.shape[:-1] + (self.cfg.static_dim,),
                dtype=encoded.dtype,
                device=encoded.device,
            )
        return self.predict_indices(self.decode_horizon(encoded, static_repr))

    def fuse_neighbors(self, att_center, att_members, distances, member_mask, series_members):
        """Attention-weighted combination of neighbor series (or the raw
        center series when fusion is disabled)."""
        if self.cfg.use_fusion:
            weights = self.fusion(
                att_center, att_members, distances, member_mask, check=self.runtime_checks
            )
        else:
            weights = one_hot_center(member_mask, series_members.dtype)
        return fuse_series(weights, series_members)

    def forward_from_neighbors(
        self, att_center, att_members, distances, member_mask, series_members, numeric, land_cover
    ):
        fused = self.fuse_neighbors(att_center, att_members, distances, member_mask, series_members)
        return self.forward(fused, numeric, land_cover)


def masked_mae_loss(pred: torch.Tensor, target: torch.Tensor, valid: torch.Tensor):
    """Mean absolute error over observed entries; 0 (with zero gradients)
    when nothing is observed."""
    if pred.shape != target.shape:
        raise ValueError("prediction/target shape mismatch")
    if valid.any():
        gate = valid.to(pred.dtype)
        return ((pred - target).abs() * gate).sum() / gate.sum()
    return pred.sum() * 0.0


def init_parameters(model: nn.Module, rng: SplitMix64) -> None:
    """Deterministic init: uniform fan-in scaling for weights, zeros for
    biases, ones/zeros for layer norms. Consumes the stream in parameter
    registration order."""
    norm_weights = set()
    for mod in model.modules():
        if isinstance(mod, nn.LayerNorm):
            norm_weights.add(id(mod.weight))
    with torch.no_grad():
        for _, param in model.named_parameters():
            if id(param) in norm_weights:
                param.fill_(1.0)
            elif param.dim() == 1:
                param.zero_()
            else:
                bound = 1.0 / math.sqrt(param.shape[-1])
                draws = (rng.uniform(param.numel()) * 2.0 - 1.0) * bound
                param.copy_(
                    torch.from_numpy(draws.reshape(tuple(param.shape))).to(param.dtype)
                )


def build_model(cfg: ModelConfig, init_seed: int | None = None) -> SPDroughtModel:
    """Construct a model in eval mode; the trainer flips to train mode."""
    model = SPDroughtModel(cfg)
    if init_seed is not None:
        init_parameters(model, SplitMix64(init_seed))
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Checkpoint format (SPCK)
# ---------------------------------------------------------------------------


def model_tensors(model: nn.Module) -> dict[str, np.ndarray]:
    """Named parameters as float64 arrays (the checkpoint payload)."""
    return {
        name: param.detach().cpu().double().numpy().copy()
        for name, param in model.named_parameters()
    }


def load_model_tensors(model: nn.Module, tensors: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    missing = set(params) - set(tensors)
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)}")
    with torch.no_grad():
        for name, param in params.items():
            arr = tensors[name]
            if tuple(arr.shape) != tuple(param.shape):
                raise CheckpointError(f"tensor {name} has shape {arr.shape}, expected {tuple(param.shape)}")
            param.copy_(torch.from_numpy(arr).to(param.dtype))


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<II", CHECKPOINT_VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw))
        out += raw
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    out += struct.pack("<Q", crc64(out))
    return bytes(out)


def decode_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < 4 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not an SPCK stream")
    if len(data) < 20:
        raise CheckpointError("checkpoint truncated")
    (stored_crc,) = struct.unpack_from("<Q", data, len(data) - 8)
    if crc64(memoryview(data)[:-8]) != stored_crc:
        raise CheckpointError("checkpoint CRC mismatch")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    tensors: dict[str, np.ndarray] = {}
    end = len(data) - 8
    for _ in range(count):
        if off + 4 > end:
            raise CheckpointError("checkpoint truncated")
        (name_len,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}Q", data, off)
        off += 8 * rank
        n = int(np.prod(shape)) if rank else 1
        if off + 8 * n > end:
            raise CheckpointError("checkpoint truncated")
        tensors[name] = (
            np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        )
        off += 8 * n
    if off != end:
        raise CheckpointError("trailing bytes in checkpoint")
    return tensors


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
