"""Pretraining losses and projection heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError, EmptyBatchError

EPS = 1e-8


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.1
    lambda_weight: float = 0.5
    mask_ratio: float = 0.15
    projection_dim: int = 128

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.lambda_weight <= 1.0:
            raise ConfigError(f"lambda_weight must lie in [0, 1], got {self.lambda_weight}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.projection_dim <= 0:
            raise ConfigError("projection_dim must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class ProjectionHead(nn.Module):
    """Linear -> ReLU -> Linear, applied row-wise."""

    def __init__(self, in_dim: int, out_dim: int, hidden_dim: int | None = None):
        super().__init__()
        hidden_dim = hidden_dim or in_dim
        self.in_dim = in_dim
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ConfigError(f"feature width {x.shape[-1]} does not match head input {self.in_dim}")
        return self.fc2(F.relu(self.fc1(x)))


def project(features: torch.Tensor, head: ProjectionHead) -> torch.Tensor:
    return head(features)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of two vectors; raises on a (near) zero vector."""
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    na, nb = a.norm(), b.norm()
    if na < EPS or nb < EPS:
        raise ContractError("cosine similarity undefined for a zero vector")
    return (a * b).sum() / (na * nb)


def _normalize(x: torch.Tensor) -> torch.Tensor:
    # Norms are clamped at EPS so degenerate rows give 0 similarity instead of NaN.
    return x / x.norm(dim=-1, keepdim=True).clamp_min(EPS)


def ntxent_loss(projected_views: torch.Tensor, temperature: float = 0.1) -> torch.Tensor:
    """NT-Xent over 2N rows where rows 2k and 2k+1 form positive pair k.

    Returns the mean of the per-anchor terms over all 2N anchors.
    """
    n2 = projected_views.shape[0]
    if n2 == 0:
        raise EmptyBatchError("NT-Xent needs at least one positive pair")
    if n2 % 2:
        raise ContractError(f"expected an even number of rows, got {n2}")
    z = _normalize(projected_views)
    logits = (z @ z.T) / temperature
    self_mask = torch.eye(n2, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(self_mask, float("-inf"))
    positive = torch.arange(n2, device=z.device) ^ 1
    # cross_entropy uses a max-subtracted log-sum-exp
    return F.cross_entropy(logits, positive)


def masked_prediction_loss(reconstructed: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean of (1 - cos) between reconstructions and their (stop-gradient) targets."""
    if reconstructed.shape[0] == 0:
        raise EmptyBatchError("no masked tokens to reconstruct")
    if reconstructed.shape != targets.shape:
        raise ContractError(f"shape mismatch {tuple(reconstructed.shape)} vs {tuple(targets.shape)}")
    sim = (_normalize(reconstructed) * _normalize(targets.detach())).sum(dim=-1)
    return (1.0 - sim).mean()


def tvrl_loss(l_contrastive, l_masked, lambda_weight: float = 0.5):
    if not 0.0 <= lambda_weight <= 1.0:
        raise ContractError(f"lambda_weight must lie in [0, 1], got {lambda_weight}")
    return (1.0 - lambda_weight) * l_contrastive + lambda_weight * l_masked
