"""Pretraining strategies, learning-rate schedule and the training loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import save_checkpoint
from .data.records import DatasetManifest, SequenceRecord
from .data.sampling import (
    AugmentConfig,
    ViewPair,
    augment_clip,
    make_view_pair,
    sample_clip,
    sample_clip_pair,
    sample_mask_plan,
)
from .encoder import EncoderConfig, SpatiotemporalEncoder
from .errors import ConfigError, ContractError, DegenerateBatchError
from .objectives import LossConfig, ProjectionHead, masked_prediction_loss, ntxent_loss, tvrl_loss
from .seeding import INIT, PRETRAIN, derive_rng, seed_torch

log = logging.getLogger(__name__)

STRATEGIES = ("csimclr", "csimclr-te", "tvrl", "multiclip")
UNIT_POLICY = {"seconds": "dense-stride-2", "days": "successive"}


@dataclass(frozen=True)
class PretrainConfig:
    strategy: str = "tvrl"
    epochs: int = 200
    batch_size: int = 256
    base_lr: float = 2e-4
    warmup_epochs: int = 20
    weight_decay: float = 0.05
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    policy: Optional[str] = None  # None: derived from the dataset time unit
    separate_contrastive_pass: bool = False
    save_every: int = 20

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        te = self.encoder.use_time_embedding
        if self.strategy == "csimclr-te" and not te:
            raise ConfigError("strategy csimclr-te requires encoder.use_time_embedding=true")
        if self.strategy in ("csimclr", "tvrl", "multiclip") and te:
            raise ConfigError(f"strategy {self.strategy} must not use the time embedding")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epochs and warmup_epochs must be >= 0")
        if self.epochs and self.warmup_epochs > self.epochs:
            raise ConfigError("warmup_epochs exceeds epochs")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for contrastive training")
        if self.base_lr < 0 or self.weight_decay < 0:
            raise ConfigError("base_lr and weight_decay must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        d = dict(d)
        strategy = d.get("strategy", "tvrl")
        enc = dict(d.pop("encoder", {}) or {})
        # the TE flag follows the strategy unless set explicitly
        enc.setdefault("use_time_embedding", strategy == "csimclr-te")
        aug = dict(d.pop("augment", {}) or {})
        for k, v in aug.items():
            if isinstance(v, list):
                aug[k] = tuple(v)
        try:
            return cls(
                loss=LossConfig(**(d.pop("loss", {}) or {})),
                encoder=EncoderConfig.from_dict(enc),
                augment=AugmentConfig(**aug),
                **d,
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def lr_at(step: int, total_steps: int, config: PretrainConfig) -> float:
    """Linear warm-up to ``base_lr`` then cosine decay to zero at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    warmup = round(total_steps * config.warmup_epochs / config.epochs) if config.epochs else 0
    if step < warmup:
        return config.base_lr * step / warmup
    if total_steps == warmup:
        return config.base_lr
    progress = (step - warmup) / (total_steps - warmup)
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class PretrainModel(nn.Module):
    """Encoder plus contrastive head ``p`` and reconstruction head ``q``."""

    def __init__(self, encoder_cfg: EncoderConfig, loss_cfg: LossConfig):
        super().__init__()
        self.encoder_cfg = encoder_cfg
        self.loss_cfg = loss_cfg
        D = encoder_cfg.hidden_dim
        self.encoder = SpatiotemporalEncoder(encoder_cfg)
        self.head_p = ProjectionHead(D, loss_cfg.projection_dim)
        # reconstructions are compared with D-wide spatial tokens
        self.head_q = ProjectionHead(D, D)


@dataclass
class Batch:
    """Views interleaved so rows 2k and 2k+1 are the positive pair of sample k."""

    frames: torch.Tensor  # (2B, C, H, W)
    times: torch.Tensor  # (2B, C) float64
    validity: torch.Tensor  # (2B, C) bool

    @property
    def size(self) -> int:
        return self.frames.shape[0] // 2


def collate(pairs: Sequence[ViewPair]) -> Batch:
    views = [v for p in pairs for v in (p.view_i, p.view_j)]
    return Batch(
        frames=torch.from_numpy(np.stack([v.frames for v in views])),
        times=torch.from_numpy(np.stack([v.relative_times for v in views])),
        validity=torch.from_numpy(np.stack([v.validity for v in views])),
    )


def build_pairs(
    records: Sequence[SequenceRecord], config: PretrainConfig, policy: str, rng: np.random.Generator
) -> list[ViewPair]:
    pairs = []
    for rec in records:
        if config.strategy == "multiclip":
            a, b = sample_clip_pair(rec, policy, rng, config.encoder.clip_capacity)
            va, pa = augment_clip(a, config.augment, rng)
            vb, pb = augment_clip(b, config.augment, rng)
            pairs.append(ViewPair(va, vb, pa, pb))
        else:
            clip = sample_clip(rec, policy, rng, config.encoder.clip_capacity)
            pairs.append(make_view_pair(clip, config.augment, rng))
    return pairs


def sample_masks(validity: torch.Tensor, mask_ratio: float, rng: np.random.Generator) -> torch.Tensor:
    mask = torch.zeros_like(validity, dtype=torch.bool)
    for row, n in enumerate(validity.sum(dim=1).tolist()):
        plan = sample_mask_plan(int(n), mask_ratio, rng)
        mask[row, list(plan.indices)] = True
    return mask


def compute_loss(
    model: PretrainModel, batch: Batch, config: PretrainConfig, rng: np.random.Generator
) -> tuple[torch.Tensor, dict[str, float]]:
    if batch.size < 2:
        raise DegenerateBatchError(f"contrastive loss needs >= 2 samples per batch, got {batch.size}")
    enc = model.encoder
    dtype = next(model.parameters()).dtype
    frames = batch.frames.to(dtype)
    times = batch.times.to(dtype) if config.encoder.use_time_embedding else None
    tokens = enc.encode_frames(frames, batch.validity)
    tau = config.loss.temperature

    if config.strategy != "tvrl":
        out = enc.encode_sequence(tokens, batch.validity, times)
        loss = ntxent_loss(model.head_p(out.cls_embedding), tau)
        return loss, {"contrastive": float(loss.detach())}

    mask = sample_masks(batch.validity, config.loss.mask_ratio, rng)
    out = enc.encode_sequence(tokens, batch.validity, None, mask)
    cls = out.cls_embedding
    if config.separate_contrastive_pass:
        cls = enc.encode_sequence(tokens, batch.validity).cls_embedding
    l_c = ntxent_loss(model.head_p(cls), tau)
    recon = model.head_q(out.output_tokens)
    # per-view mean over its masked tokens, then mean over views
    l_m = torch.stack(
        [masked_prediction_loss(recon[v][mask[v]], tokens[v][mask[v]]) for v in range(mask.shape[0])]
    ).mean()
    loss = tvrl_loss(l_c, l_m, config.loss.lambda_weight)
    return loss, {"contrastive": float(l_c.detach()), "masked": float(l_m.detach())}


def pretrain_step(
    pairs: Sequence[ViewPair] | Batch,
    model: PretrainModel,
    config: PretrainConfig,
    optimizer: torch.optim.Optimizer,
    rng: np.random.Generator,
) -> float:
    batch = pairs if isinstance(pairs, Batch) else collate(pairs)
    model.train()
    loss, _ = compute_loss(model, batch, config, rng)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def build_model(config: PretrainConfig) -> PretrainModel:
    seed_torch(config.seed, INIT)
    return PretrainModel(config.encoder, config.loss)


def make_optimizer(model: nn.Module, config: PretrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=config.base_lr, weight_decay=config.weight_decay)


def resolve_policy(config: PretrainConfig, manifest: DatasetManifest) -> str:
    if config.policy is not None:
        return config.policy
    try:
        return UNIT_POLICY[manifest.unit]
    except KeyError:
        raise ConfigError(f"no default clip policy for time unit {manifest.unit!r}; set policy") from None


def steps_per_epoch(n_train: int, batch_size: int) -> int:
    full, rest = divmod(n_train, batch_size)
    # a trailing batch of one sample has no negatives and is dropped
    return full + (1 if rest >= 2 else 0)


def pretrain(
    config: PretrainConfig,
    manifest: DatasetManifest,
    out_dir: str | Path,
    extra_manifest: Optional[dict] = None,
) -> Path:
    """Run pretraining; returns the path of the final checkpoint directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = [r for r in manifest.split("train") if len(r) >= 2]
    if len(train) < 2:
        raise ConfigError("pretraining needs at least two usable training sequences")
    if manifest.image_size != config.encoder.image_size:
        raise ConfigError(
            f"dataset image size {manifest.image_size} != encoder image_size {config.encoder.image_size}"
        )
    policy = resolve_policy(config, manifest)
    model = build_model(config)
    optimizer = make_optimizer(model, config)
    n_steps = steps_per_epoch(len(train), config.batch_size)
    total = n_steps * config.epochs
    extra = {"policy": policy, "pretrain_config": config.to_dict(), **(extra_manifest or {})}
    metrics_path = out_dir / "metrics.jsonl"
    metrics_path.write_text("")

    step = 0
    for epoch in range(config.epochs):
        order = derive_rng(config.seed, PRETRAIN, epoch).permutation(len(train))
        losses = []
        for s in range(n_steps):
            idx = order[s * config.batch_size : (s + 1) * config.batch_size]
            rng = derive_rng(config.seed, PRETRAIN, epoch, s)
            pairs = build_pairs([train[i] for i in idx], config, policy, rng)
            lr = lr_at(step, total, config)
            for group in optimizer.param_groups:
                group["lr"] = lr
            losses.append(pretrain_step(pairs, model, config, optimizer, rng))
            step += 1
        record = {"epoch": epoch, "step": step, "loss": float(np.mean(losses)), "lr": lr}
        with metrics_path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")
        log.info("epoch %d loss %.4f lr %.2e", epoch, record["loss"], lr)
        if config.save_every and (epoch + 1) % config.save_every == 0 and epoch + 1 < config.epochs:
            save_checkpoint(model, out_dir / f"ckpt_epoch_{epoch + 1:04d}", strategy=config.strategy,
                            epoch=epoch + 1, seed=config.seed, extra=extra)
    return save_checkpoint(model, out_dir / "ckpt", strategy=config.strategy, epoch=config.epochs,
                           seed=config.seed, extra=extra)


def read_metrics(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
