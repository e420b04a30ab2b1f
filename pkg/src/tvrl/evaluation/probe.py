"""Linear probing on a frozen backbone and sliding-window inference.

A probe is a fresh CLS token fed through the frozen temporal encoder plus a
single linear layer on that token's output. Frames are encoded once by the
frozen spatial encoder and cached, so probe training only runs the temporal
encoder.
"""
from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..checkpoint import load_checkpoint
from ..data.records import DatasetManifest, SequenceRecord
from ..data.sampling import clip_indices, policy_grid, valid_starts
from ..encoder import SpatiotemporalEncoder
from ..errors import ConfigError, UndefinedMetricError
from ..seeding import PROBE, derive_rng, seed_torch
from ..training import UNIT_POLICY
from .metrics import auc, mae

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProbeConfig:
    task: str
    fraction: float = 1.0
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 256
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    weight_decay: float = 0.0
    finetune_backbone: bool = False  # end-to-end supervised baseline

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"fraction must lie in (0, 1], got {self.fraction}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs, batch_size and lr must be positive")
        if not self.seeds:
            raise ConfigError("at least one probe seed is required")

    def to_dict(self) -> dict:
        return asdict(self)


def sliding_windows(sequence_length: int, window: int = 8) -> list[int]:
    """Start indices of 50%-overlapping windows covering ``sequence_length`` frames."""
    if sequence_length <= window:
        return [0]
    stride = max(1, window // 2)
    starts = list(range(0, sequence_length - window + 1, stride))
    if starts[-1] != sequence_length - window:
        starts.append(sequence_length - window)
    return starts


class ProbeHead(nn.Module):
    def __init__(self, dim: int, kind: str, policy: str, target_mean: float = 0.0, target_std: float = 1.0):
        super().__init__()
        self.kind = kind
        self.policy = policy
        self.cls = nn.Parameter(torch.empty(dim))
        nn.init.trunc_normal_(self.cls, std=0.02)
        self.linear = nn.Linear(dim, 1)
        self.register_buffer("target_mean", torch.tensor(float(target_mean)))
        self.register_buffer("target_std", torch.tensor(float(target_std)))

    def to_prediction(self, raw: torch.Tensor) -> torch.Tensor:
        if self.kind == "classification":
            return torch.sigmoid(raw)
        return raw * self.target_std + self.target_mean


def backbone_checksum(encoder: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(encoder.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _as_encoder(model) -> SpatiotemporalEncoder:
    if isinstance(model, (str, Path)):
        model, _ = load_checkpoint(model)
    return model if isinstance(model, SpatiotemporalEncoder) else model.encoder


def _record_tokens(encoder: SpatiotemporalEncoder, record: SequenceRecord, chunk: int = 256) -> torch.Tensor:
    frames = torch.from_numpy(record.float_frames())
    return torch.cat([encoder.encode_frames(frames[i : i + chunk]) for i in range(0, len(frames), chunk)])


def record_windows(record: SequenceRecord, policy: str, capacity: int) -> list[np.ndarray]:
    """Raw frame indices of every sliding window over the policy's frame grid."""
    grid = policy_grid(len(record), policy)
    return [grid[s : s + capacity] for s in sliding_windows(len(grid), capacity)]


def _window_batch(tokens_list, times_list, idx_list, capacity):
    n, D = len(idx_list), tokens_list[0].shape[-1]
    tok = torch.zeros(n, capacity, D, dtype=tokens_list[0].dtype)
    times = torch.zeros(n, capacity, dtype=tok.dtype)
    valid = torch.zeros(n, capacity, dtype=torch.bool)
    for row, (t, ts, idx) in enumerate(zip(tokens_list, times_list, idx_list)):
        k = len(idx)
        tok[row, :k] = t[idx]
        times[row, :k] = torch.from_numpy(ts[idx] - ts[idx[0]]).to(tok.dtype)
        valid[row, :k] = True
    return tok, times, valid


def _head_forward(encoder, head, tok, times, valid):
    out = encoder.encode_sequence(
        tok, valid, times if encoder.cfg.use_time_embedding else None, cls_selector="probe", probe_cls=head.cls
    )
    return head.linear(out.cls_embedding).squeeze(-1)


def window_predictions(model, head: ProbeHead, record: SequenceRecord, tokens=None) -> np.ndarray:
    """Per-window predictions (post-sigmoid scores or de-normalised regression outputs)."""
    encoder = _as_encoder(model)
    cap = encoder.cfg.clip_capacity
    with torch.no_grad():
        if tokens is None:
            tokens = _record_tokens(encoder, record)
        windows = record_windows(record, head.policy, cap)
        tok, times, valid = _window_batch([tokens] * len(windows), [record.timestamps] * len(windows), windows, cap)
        return head.to_prediction(_head_forward(encoder, head, tok, times, valid)).numpy().astype(np.float64)


def predict_sequence(model, head: ProbeHead, record: SequenceRecord, tokens=None) -> float:
    """Mean of the sliding-window predictions for one sequence."""
    return float(np.mean(window_predictions(model, head, record, tokens)))


def predict_records(encoder, head, records, cache, batch: int = 512) -> np.ndarray:
    cap = encoder.cfg.clip_capacity
    items = [(i, w) for i, r in enumerate(records) for w in record_windows(r, head.policy, cap)]
    preds = np.zeros(len(items))
    with torch.no_grad():
        for s in range(0, len(items), batch):
            chunk = items[s : s + batch]
            tok, times, valid = _window_batch(
                [cache[records[i].sequence_id] for i, _ in chunk],
                [records[i].timestamps for i, _ in chunk],
                [w for _, w in chunk],
                cap,
            )
            preds[s : s + len(chunk)] = head.to_prediction(_head_forward(encoder, head, tok, times, valid)).numpy()
    owner = np.array([i for i, _ in items])
    return np.array([preds[owner == i].mean() for i in range(len(records))])


def subsample_patients(
    records: Sequence[SequenceRecord], fraction: float, rng: np.random.Generator
) -> list[SequenceRecord]:
    """Keep every sequence of ``round(fraction * n_patients)`` (>= 1) randomly chosen patients."""
    patients = sorted({r.patient_id for r in records})
    if fraction >= 1.0:
        return list(records)
    k = max(1, int(round(fraction * len(patients))))
    keep = set(rng.choice(patients, size=k, replace=False).tolist())
    return [r for r in records if r.patient_id in keep]


def score(kind: str, preds, targets) -> float:
    """AUC in percent for classification, MAE for regression."""
    return 100.0 * auc(preds, targets) if kind == "classification" else mae(preds, targets)


def _better(kind: str, new: float, best: Optional[float]) -> bool:
    if best is None:
        return True
    return new > best if kind == "classification" else new < best


@dataclass
class ProbeResult:
    head: ProbeHead
    task: str
    kind: str
    seed: int
    fraction: float
    best_epoch: int
    val_metric: float
    test_metric: float
    train_patients: list[str] = field(default_factory=list)
    history: list[float] = field(default_factory=list)

    @property
    def metric_name(self) -> str:
        return "auc" if self.kind == "classification" else "mae"

    def summary(self) -> dict:
        return {
            "task": self.task,
            "seed": self.seed,
            "fraction": self.fraction,
            "metric": self.metric_name,
            "best_epoch": self.best_epoch,
            "val": self.val_metric,
            "test": self.test_metric,
            "n_train_patients": len(self.train_patients),
        }


def linear_probe(
    model,
    manifest: DatasetManifest,
    config: ProbeConfig,
    seed: Optional[int] = None,
    policy: Optional[str] = None,
) -> ProbeResult:
    """Train a fresh CLS token + linear layer on a frozen backbone.

    ``model`` may be a checkpoint path, a pretraining model or an encoder. The
    head from the epoch with the best validation metric is returned, with its
    test metric.
    """
    task = manifest.task(config.task)
    seed = config.seeds[0] if seed is None else seed
    policy = policy or UNIT_POLICY.get(manifest.unit)
    if policy is None:
        raise ConfigError(f"no clip policy for unit {manifest.unit!r}")
    encoder = _as_encoder(model)
    if manifest.image_size != encoder.cfg.image_size:
        raise ConfigError(
            f"dataset image size {manifest.image_size} != checkpoint image_size {encoder.cfg.image_size}"
        )
    cap = encoder.cfg.clip_capacity
    if not config.finetune_backbone:
        encoder.requires_grad_(False)
    encoder.eval()

    train = subsample_patients(manifest.split("train"), config.fraction, derive_rng(seed, PROBE, 0))
    val, test = manifest.split("val"), manifest.split("test")
    if not train or not val or not test:
        raise ConfigError("probing needs non-empty train, val and test splits")
    y_train = np.array([r.labels[task.name] for r in train], dtype=np.float64)
    mean, std = (0.0, 1.0)
    if task.kind == "regression":
        mean, std = float(y_train.mean()), float(y_train.std())
        std = std if std > 1e-12 else 1.0

    seed_torch(seed, PROBE, 1)
    head = ProbeHead(encoder.cfg.hidden_dim, task.kind, policy, mean, std)
    params = list(head.parameters()) + (list(encoder.parameters()) if config.finetune_backbone else [])
    opt = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)

    def token_cache(records):
        with torch.no_grad():
            return {r.sequence_id: _record_tokens(encoder, r) for r in records}

    cache = token_cache(train + val + test)
    y_norm = torch.tensor((y_train - mean) / std)
    best, best_state, best_epoch, history = None, None, -1, []
    for epoch in range(config.epochs):
        rng = derive_rng(seed, PROBE, 2, epoch)
        order = rng.permutation(len(train))
        head.train()
        for s in range(0, len(order), config.batch_size):
            idx = order[s : s + config.batch_size]
            windows = []
            for i in idx:
                rec = train[i]
                grid_len = len(rec)
                starts = valid_starts(grid_len, policy, cap)
                windows.append(clip_indices(grid_len, policy, int(starts[rng.integers(len(starts))]), cap))
            if config.finetune_backbone:
                toks = [_record_tokens(encoder, train[i]) for i in idx]
            else:
                toks = [cache[train[i].sequence_id] for i in idx]
            tok, times, valid = _window_batch(toks, [train[i].timestamps for i in idx], windows, cap)
            raw = _head_forward(encoder, head, tok, times, valid)
            target = y_norm[idx].to(raw.dtype)
            if task.kind == "classification":
                loss = F.binary_cross_entropy_with_logits(raw, target)
            else:
                loss = F.l1_loss(raw, target)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        head.eval()
        if config.finetune_backbone:
            cache = token_cache(val + test)
        val_metric = _val_metric(task.kind, predict_records(encoder, head, val, cache),
                                 [r.labels[task.name] for r in val])
        history.append(val_metric)
        if _better(task.kind, val_metric, best):
            best, best_epoch = val_metric, epoch
            best_state = copy.deepcopy(head.state_dict())
            if config.finetune_backbone:
                best_backbone = copy.deepcopy(encoder.state_dict())
    head.load_state_dict(best_state)
    if config.finetune_backbone:
        encoder.load_state_dict(best_backbone)
        cache = token_cache(test)
    test_metric = score(task.kind, predict_records(encoder, head, test, cache), [r.labels[task.name] for r in test])
    return ProbeResult(
        head=head,
        task=task.name,
        kind=task.kind,
        seed=seed,
        fraction=config.fraction,
        best_epoch=best_epoch,
        val_metric=float(best),
        test_metric=float(test_metric),
        train_patients=sorted({r.patient_id for r in train}),
        history=history,
    )


def _val_metric(kind, preds, targets) -> float:
    try:
        return score(kind, preds, targets)
    except UndefinedMetricError:
        # single-class validation split: fall back to negated log-loss
        p = np.clip(np.asarray(preds), 1e-7, 1 - 1e-7)
        y = np.asarray(targets)
        return float(np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def probe_seeds(model, manifest: DatasetManifest, config: ProbeConfig, policy: Optional[str] = None):
    """Run :func:`linear_probe` for every seed; returns results and a mean/std summary."""
    encoder = _as_encoder(model)
    initial = copy.deepcopy(encoder.state_dict()) if config.finetune_backbone else None
    results = []
    for seed in config.seeds:
        if initial is not None:
            encoder.load_state_dict(initial)
        results.append(linear_probe(encoder, manifest, config, seed=seed, policy=policy))
    values = np.array([r.test_metric for r in results])
    summary = {
        "task": config.task,
        "fraction": config.fraction,
        "metric": results[0].metric_name,
        "mean": float(values.mean()),
        "std": float(values.std(ddof=1)) if len(values) >= 2 else None,
        "n_seeds": len(values),
    }
    return results, summary
