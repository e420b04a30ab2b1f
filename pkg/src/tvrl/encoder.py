"""Two-stage spatiotemporal encoder.

A spatial ViT maps every frame to one feature vector (its CLS output). A
small temporal transformer then attends over the per-frame features of a
clip, optionally with a time embedding of the irregular acquisition offsets
and with a learnable mask token substituted at selected positions.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 128
    patch_size: int = 16
    channels: int = 1
    hidden_dim: int = 384
    spatial_heads: int = 6
    spatial_layers: int = 12
    temporal_layers: int = 3
    temporal_heads: int = 6
    clip_capacity: int = 8
    mlp_ratio: int = 4
    use_time_embedding: bool = False
    time_scale: float = 1.0  # multiplies relative times before the sinusoidal features

    def __post_init__(self):
        for f in fields(self):
            if f.name != "use_time_embedding" and getattr(self, f.name) <= 0:
                raise ConfigError(f"{f.name} must be positive, got {getattr(self, f.name)}")
        if self.hidden_dim % self.spatial_heads or self.hidden_dim % self.temporal_heads:
            raise ConfigError(
                f"hidden_dim={self.hidden_dim} must be divisible by spatial_heads="
                f"{self.spatial_heads} and temporal_heads={self.temporal_heads}"
            )
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size={self.image_size} not divisible by patch_size={self.patch_size}")
        if self.clip_capacity < 2:
            raise ConfigError("clip_capacity must be >= 2")
        if self.hidden_dim < 4 or self.hidden_dim % 2:
            raise ConfigError("hidden_dim must be even and >= 4")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown encoder config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def desk(cls, **overrides) -> "EncoderConfig":
        """32px micro configuration used for desk-scale runs."""
        base = dict(image_size=32, patch_size=4, hidden_dim=64, spatial_heads=4,
                    spatial_layers=4, temporal_layers=2, temporal_heads=4)
        base.update(overrides)
        return cls(**base)


class SequenceOutput(NamedTuple):
    cls_embedding: torch.Tensor  # (B, D)
    output_tokens: torch.Tensor  # (B, T, D)


class MLP(nn.Module):
    def __init__(self, dim: int, hidden_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, key_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        B, N, D = x.shape
        q, k, v = self.qkv(x).reshape(B, N, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * (D // self.heads) ** -0.5
        if key_mask is not None:
            # key_mask: (B, N), True = attend
            attn = attn.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, N, D)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio)

    def forward(self, x, key_mask=None):
        x = x + self.attn(self.norm1(x), key_mask)
        return x + self.mlp(self.norm2(x))


class SpatialEncoder(nn.Module):
    """ViT over one grayscale frame; returns the CLS output."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.hidden_dim
        self.patch_embed = nn.Linear(cfg.channels * cfg.patch_size**2, D)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, D))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches + 1, D))
        self.blocks = nn.ModuleList(
            Block(D, cfg.spatial_heads, cfg.mlp_ratio) for _ in range(cfg.spatial_layers)
        )
        self.norm = nn.LayerNorm(D)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)

    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        N, C, H, W = x.shape
        p = self.cfg.patch_size
        x = x.reshape(N, C, H // p, p, W // p, p).permute(0, 2, 4, 1, 3, 5)
        return x.reshape(N, (H // p) * (W // p), C * p * p)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """frames: (N, H, W) or (N, C, H, W) in [0, 1] -> (N, D)."""
        if frames.dim() == 3:
            frames = frames.unsqueeze(1)
        cfg = self.cfg
        if frames.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ConfigError(
                f"frame shape {tuple(frames.shape[1:])} does not match configured "
                f"({cfg.channels}, {cfg.image_size}, {cfg.image_size})"
            )
        x = self.patch_embed(self.patchify(frames))
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x[:, 0])


def sinusoidal_embedding(times: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Fixed sin/cos features of ``times``: first half sines, second half cosines.

    Angular frequencies are geometrically spaced from 1 down to 1/max_period.
    """
    half = dim // 2
    exponent = torch.arange(half, dtype=torch.float64, device=times.device) / (half - 1)
    freqs = torch.exp(-math.log(max_period) * exponent)
    args = times.to(torch.float64)[..., None] * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    return emb.to(torch.get_default_dtype() if not times.is_floating_point() else times.dtype)


class TimeEmbedding(nn.Module):
    """Sinusoidal features of relative time followed by a learnable two-layer map."""

    def __init__(self, dim: int, time_scale: float = 1.0):
        super().__init__()
        self.dim = dim
        self.time_scale = time_scale
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, times: torch.Tensor) -> torch.Tensor:
        emb = sinusoidal_embedding(times * self.time_scale, self.dim).to(self.mlp[0].weight.dtype)
        return self.mlp(emb)


class TemporalEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.hidden_dim
        self.cls_token = nn.Parameter(torch.zeros(1, 1, D))
        self.mask_token = nn.Parameter(torch.zeros(D))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.clip_capacity, D))
        self.time_embed = TimeEmbedding(D, cfg.time_scale) if cfg.use_time_embedding else None
        self.blocks = nn.ModuleList(
            Block(D, cfg.temporal_heads, cfg.mlp_ratio) for _ in range(cfg.temporal_layers)
        )
        self.norm = nn.LayerNorm(D)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.mask_token, std=0.02)

    def forward(
        self,
        tokens: torch.Tensor,
        validity: torch.Tensor,
        times: Optional[torch.Tensor] = None,
        mask: Optional[torch.Tensor] = None,
        probe_cls: Optional[torch.Tensor] = None,
    ) -> tuple[torch.Tensor, torch.Tensor, Optional[torch.Tensor]]:
        B, T, D = tokens.shape
        if T > self.cfg.clip_capacity:
            raise ContractError(f"clip length {T} exceeds capacity {self.cfg.clip_capacity}")
        validity = validity.bool()
        if (times is not None) != self.cfg.use_time_embedding:
            raise ContractError(
                "times must be given iff use_time_embedding is enabled "
                f"(use_time_embedding={self.cfg.use_time_embedding})"
            )
        x = tokens
        if mask is not None:
            mask = mask.bool()
            if (mask & ~validity).any():
                raise ContractError("mask plan touches an invalid (padded) position")
            x = torch.where(mask[..., None], self.mask_token.to(x.dtype).expand_as(x), x)
        x = x + self.pos_embed[:, :T]
        if self.time_embed is not None:
            x = x + self.time_embed(times)
        x = torch.where(validity[..., None], x, torch.zeros_like(x))

        prefix = [self.cls_token.expand(B, -1, -1)]
        if probe_cls is not None:
            prefix.append(probe_cls.reshape(1, 1, D).expand(B, -1, -1))
        n_prefix = len(prefix)
        x = torch.cat(prefix + [x], dim=1)
        key_mask = torch.cat([torch.ones(B, n_prefix, dtype=torch.bool, device=x.device), validity], dim=1)
        for blk in self.blocks:
            x = blk(x, key_mask)
        x = self.norm(x)
        out_tokens = x[:, n_prefix:]
        return x[:, 0], out_tokens, (x[:, 1] if probe_cls is not None else None)


class SpatiotemporalEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.spatial = SpatialEncoder(cfg)
        self.temporal = TemporalEncoder(cfg)

    def encode_frames(self, frames: torch.Tensor, validity: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Encode (B, T, H, W) or (T, H, W) frames independently.

        Only valid frames are run through the spatial encoder; padded rows come
        back as zeros.
        """
        squeeze = frames.dim() == 3
        if squeeze:
            frames = frames.unsqueeze(0)
            validity = None if validity is None else validity.unsqueeze(0)
        B, T = frames.shape[:2]
        if validity is None:
            validity = torch.ones(B, T, dtype=torch.bool, device=frames.device)
        validity = validity.bool()
        out = frames.new_zeros(B, T, self.cfg.hidden_dim)
        if validity.any():
            out[validity] = self.spatial(frames[validity])
        return out[0] if squeeze else out

    def encode_sequence(
        self,
        frame_tokens: torch.Tensor,
        validity: Optional[torch.Tensor] = None,
        times: Optional[torch.Tensor] = None,
        mask: Optional[torch.Tensor] = None,
        cls_selector: str = "pretrain",
        probe_cls: Optional[torch.Tensor] = None,
    ) -> SequenceOutput:
        squeeze = frame_tokens.dim() == 2
        if squeeze:
            frame_tokens = frame_tokens.unsqueeze(0)
            validity = None if validity is None else validity.unsqueeze(0)
            times = None if times is None else times.unsqueeze(0)
            mask = None if mask is None else mask.unsqueeze(0)
        if validity is None:
            validity = torch.ones(frame_tokens.shape[:2], dtype=torch.bool, device=frame_tokens.device)
        if cls_selector not in ("pretrain", "probe"):
            raise ContractError(f"unknown cls_selector {cls_selector!r}")
        if (cls_selector == "probe") != (probe_cls is not None):
            raise ContractError("probe_cls must be supplied exactly when cls_selector='probe'")
        cls_out, tokens, probe_out = self.temporal(frame_tokens, validity, times, mask, probe_cls)
        cls = probe_out if cls_selector == "probe" else cls_out
        if squeeze:
            return SequenceOutput(cls[0], tokens[0])
        return SequenceOutput(cls, tokens)

    def forward(self, frames, validity=None, times=None, mask=None) -> SequenceOutput:
        return self.encode_sequence(self.encode_frames(frames, validity), validity, times, mask)


def count_parameters(config: EncoderConfig) -> int:
    """Number of learnable scalars in the spatiotemporal encoder for ``config``."""
    with torch.device("meta"):
        model = SpatiotemporalEncoder(config)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
