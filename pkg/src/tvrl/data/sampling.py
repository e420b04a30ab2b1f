"""Clip sampling, per-view augmentation and mask plans."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ConfigError, ContractError, UnusableRecordError
from .records import SequenceRecord

CLIP_CAPACITY = 8
POLICIES = ("dense-stride-2", "successive")


@dataclass
class Clip:
    frames: np.ndarray  # (C, H, W) float32, zero rows past the valid prefix
    relative_times: np.ndarray  # (C,) float64
    validity: np.ndarray  # (C,) bool
    source_id: str
    frame_indices: np.ndarray = field(default=None)  # (C,) int, -1 where padded

    @property
    def valid_count(self) -> int:
        return int(self.validity.sum())


def policy_stride(policy: str) -> int:
    if policy == "dense-stride-2":
        return 2
    if policy == "successive":
        return 1
    raise ConfigError(f"unknown clip policy {policy!r}; expected one of {POLICIES}")


def policy_grid(length: int, policy: str) -> np.ndarray:
    """Raw frame indices a policy can draw from, in temporal order."""
    return np.arange(0, length, policy_stride(policy))


def valid_starts(length: int, policy: str, capacity: int = CLIP_CAPACITY) -> np.ndarray:
    """Raw start indices for which a full clip fits (or ``[0]`` for short records)."""
    span = (capacity - 1) * policy_stride(policy) + 1
    return np.arange(max(1, length - span + 1))


def clip_from_indices(record: SequenceRecord, indices, capacity: int = CLIP_CAPACITY) -> Clip:
    indices = np.asarray(indices, dtype=np.int64)
    n = len(indices)
    if n > capacity:
        raise ContractError(f"{n} frames exceed clip capacity {capacity}")
    H, W = record.frames.shape[1:]
    frames = np.zeros((capacity, H, W), dtype=np.float32)
    frames[:n] = record.frames[indices].astype(np.float32) / 255.0
    times = np.zeros(capacity, dtype=np.float64)
    times[:n] = record.timestamps[indices] - record.timestamps[indices[0]]
    validity = np.zeros(capacity, dtype=bool)
    validity[:n] = True
    full_idx = np.full(capacity, -1, dtype=np.int64)
    full_idx[:n] = indices
    return Clip(frames, times, validity, record.sequence_id, full_idx)


def clip_indices(length: int, policy: str, start: int, capacity: int = CLIP_CAPACITY) -> np.ndarray:
    stride = policy_stride(policy)
    return np.arange(start, length, stride)[:capacity]


def sample_clip(
    record: SequenceRecord,
    policy: str,
    rng: np.random.Generator,
    capacity: int = CLIP_CAPACITY,
    start: Optional[int] = None,
) -> Clip:
    K = len(record)
    if K < 2:
        raise UnusableRecordError(f"{record.sequence_id}: needs >= 2 frames, has {K}")
    starts = valid_starts(K, policy, capacity)
    if start is None:
        start = int(starts[rng.integers(len(starts))])
    elif start not in starts:
        raise ContractError(f"start {start} not a valid start for length {K} ({policy})")
    return clip_from_indices(record, clip_indices(K, policy, start, capacity), capacity)


def sample_clip_pair(
    record: SequenceRecord, policy: str, rng: np.random.Generator, capacity: int = CLIP_CAPACITY
) -> tuple[Clip, Clip]:
    """Two temporally distinct clips of one record for the multi-clip baseline.

    Clip length is ``min(capacity, grid // 2)`` (at least 2) so two disjoint
    clips fit whenever the record allows; otherwise the clips sit at the two
    ends of the record (maximal offset).
    """
    K = len(record)
    if K < 2:
        raise UnusableRecordError(f"{record.sequence_id}: needs >= 2 frames, has {K}")
    stride = policy_stride(policy)
    grid = len(policy_grid(K, policy))
    length = min(capacity, max(2, grid // 2))
    span = (length - 1) * stride + 1
    starts = np.arange(max(1, K - span + 1))
    pairs = [(a, b) for a in starts for b in starts if b >= a + span]
    if pairs:
        a, b = pairs[rng.integers(len(pairs))]
    else:
        a, b = 0, int(starts[-1])
    if rng.random() < 0.5:
        a, b = b, a
    idx_a = clip_indices(K, policy, int(a), length)
    idx_b = clip_indices(K, policy, int(b), length)
    return clip_from_indices(record, idx_a, capacity), clip_from_indices(record, idx_b, capacity)


# --- augmentation -----------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale: tuple[float, float] = (0.5, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AugParams:
    top: float
    left: float
    height: float
    width: float
    flip: bool
    brightness: float
    contrast: float
    blur_sigma: Optional[float]


def sample_aug_params(rng: np.random.Generator, cfg: AugmentConfig, size: int) -> AugParams:
    area = size * size
    for _ in range(10):
        scale = rng.uniform(*cfg.crop_scale)
        log_ratio = rng.uniform(math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1]))
        ratio = math.exp(log_ratio)
        w = math.sqrt(scale * area * ratio)
        h = math.sqrt(scale * area / ratio)
        if w <= size and h <= size:
            top = rng.uniform(0, size - h)
            left = rng.uniform(0, size - w)
            break
    else:
        h = w = float(size)
        top = left = 0.0
    flip = bool(rng.random() < cfg.flip_p)
    brightness = float(rng.uniform(1 - cfg.brightness, 1 + cfg.brightness))
    contrast = float(rng.uniform(1 - cfg.contrast, 1 + cfg.contrast))
    sigma = float(rng.uniform(*cfg.blur_sigma)) if rng.random() < cfg.blur_p else None
    return AugParams(float(top), float(left), float(h), float(w), flip, brightness, contrast, sigma)


def crop_sample_coords(params: AugParams, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Source (row, col) pixel-centre coordinates of every output pixel."""
    u = np.arange(size, dtype=np.float64) + 0.5
    rows = params.top + u * params.height / size - 0.5
    cols = params.left + u * params.width / size - 0.5
    return rows, cols


def resized_crop(frames: torch.Tensor, params: AugParams) -> torch.Tensor:
    """Bilinear resample of the crop box back to full size; (T, H, W) -> (T, H, W)."""
    T, H, W = frames.shape
    rows, cols = crop_sample_coords(params, H)
    gy = torch.from_numpy((2 * rows + 1) / H - 1).to(frames.dtype)
    gx = torch.from_numpy((2 * cols + 1) / W - 1).to(frames.dtype)
    grid = torch.stack(torch.meshgrid(gy, gx, indexing="ij")[::-1], dim=-1)
    out = F.grid_sample(
        frames[:, None], grid.expand(T, H, W, 2), mode="bilinear", padding_mode="border", align_corners=False
    )
    return out[:, 0]


def gaussian_blur(frames: torch.Tensor, sigma: float) -> torch.Tensor:
    radius = max(1, min(int(math.ceil(3 * sigma)), frames.shape[-1] // 2 - 1))
    x = torch.arange(-radius, radius + 1, dtype=frames.dtype)
    k = torch.exp(-(x**2) / (2 * sigma**2))
    k = k / k.sum()
    y = F.pad(frames[:, None], (radius, radius, radius, radius), mode="reflect")
    y = F.conv2d(y, k.view(1, 1, 1, -1))
    y = F.conv2d(y, k.view(1, 1, -1, 1))
    return y[:, 0]


def apply_augmentation(frames: np.ndarray, params: AugParams) -> np.ndarray:
    """Apply one parameter set identically to every frame of a (T, H, W) stack."""
    x = torch.from_numpy(np.ascontiguousarray(frames))
    x = resized_crop(x, params)
    if params.flip:
        x = x.flip(-1)
    x = x * params.brightness
    mean = x.mean(dim=(-2, -1), keepdim=True)
    x = ((x - mean) * params.contrast + mean).clamp(0.0, 1.0)
    if params.blur_sigma is not None:
        x = gaussian_blur(x, params.blur_sigma)
    return x.numpy()


@dataclass
class ViewPair:
    view_i: Clip
    view_j: Clip
    params_i: Optional[AugParams] = None
    params_j: Optional[AugParams] = None


def augment_clip(clip: Clip, cfg: AugmentConfig, rng: np.random.Generator) -> tuple[Clip, AugParams]:
    params = sample_aug_params(rng, cfg, clip.frames.shape[-1])
    frames = np.zeros_like(clip.frames)
    v = clip.validity
    if v.any():
        frames[v] = apply_augmentation(clip.frames[v], params)
    out = Clip(frames, clip.relative_times.copy(), clip.validity.copy(), clip.source_id, clip.frame_indices)
    return out, params


def make_view_pair(clip: Clip, aug_config: AugmentConfig, rng: np.random.Generator) -> ViewPair:
    vi, pi = augment_clip(clip, aug_config, rng)
    vj, pj = augment_clip(clip, aug_config, rng)
    return ViewPair(vi, vj, pi, pj)


# --- masking ------------------------------------------------------------------


@dataclass(frozen=True)
class MaskPlan:
    indices: tuple[int, ...]
    m: int

    def as_mask(self, capacity: int = CLIP_CAPACITY) -> np.ndarray:
        mask = np.zeros(capacity, dtype=bool)
        mask[list(self.indices)] = True
        return mask


def mask_count(valid_count: int, mask_ratio: float) -> int:
    # round half up, at least one masked position
    return max(1, int(math.floor(mask_ratio * valid_count + 0.5)))


def sample_mask_plan(valid_count: int, mask_ratio: float, rng: np.random.Generator) -> MaskPlan:
    if valid_count < 1:
        raise ContractError("mask plan needs at least one valid position")
    m = min(valid_count, mask_count(valid_count, mask_ratio))
    idx = rng.choice(valid_count, size=m, replace=False)
    return MaskPlan(tuple(sorted(int(i) for i in idx)), m)
