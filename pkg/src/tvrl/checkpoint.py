"""Checkpoint container: ``weights.pt`` plus a JSON manifest.

The manifest records the encoder and loss configuration, the pretraining
strategy, epoch, seed and a hash of the configuration. Loading verifies the
hash and, when given, the caller's expected encoder configuration.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Optional

import torch

from .encoder import EncoderConfig
from .errors import CheckpointMismatchError
from .objectives import LossConfig

WEIGHTS = "weights.pt"
MANIFEST = "checkpoint.json"


def config_hash(encoder: EncoderConfig, loss: LossConfig) -> str:
    blob = json.dumps({"encoder": encoder.to_dict(), "loss": loss.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def save_checkpoint(
    model: torch.nn.Module,
    path: str | Path,
    *,
    strategy: str,
    epoch: int,
    seed: int,
    extra: Optional[dict[str, Any]] = None,
) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path / WEIGHTS)
    manifest = {
        "encoder_config": model.encoder_cfg.to_dict(),
        "loss_config": model.loss_cfg.to_dict(),
        "strategy": strategy,
        "epoch": epoch,
        "seed": seed,
        "config_hash": config_hash(model.encoder_cfg, model.loss_cfg),
    }
    if extra:
        manifest.update(extra)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    if not (path / MANIFEST).exists():
        raise CheckpointMismatchError(f"no {MANIFEST} in {path}")
    return json.loads((path / MANIFEST).read_text())


def load_checkpoint(path: str | Path, expected_encoder: Optional[EncoderConfig] = None):
    """Rebuild the pretraining model from ``path``; returns ``(model, manifest)``."""
    from .training import PretrainModel

    path = Path(path)
    manifest = read_manifest(path)
    enc = EncoderConfig.from_dict(manifest["encoder_config"])
    loss = LossConfig(**manifest["loss_config"])
    if config_hash(enc, loss) != manifest.get("config_hash"):
        raise CheckpointMismatchError(f"{path}: config hash does not match recorded configuration")
    if expected_encoder is not None and expected_encoder != enc:
        raise CheckpointMismatchError(
            f"{path}: checkpoint encoder config {enc} differs from expected {expected_encoder}"
        )
    model = PretrainModel(enc, loss)
    state = torch.load(path / WEIGHTS, map_location="cpu", weights_only=True)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointMismatchError(f"{path}: weights do not fit the recorded config: {exc}") from exc
    return model, manifest
