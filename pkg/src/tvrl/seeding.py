"""Hierarchical seed derivation.

A single integer seed fans out into independent streams keyed by a path of
integers, e.g. ``derive_rng(seed, epoch)`` for one epoch and
``derive_rng(seed, epoch, step)`` for one step. Keys are hashed through
:class:`numpy.random.SeedSequence`, so reruns of a partial range reproduce the
same streams without replaying earlier ones.
"""
from __future__ import annotations

import numpy as np
import torch

# Stream namespaces, kept distinct so data, model init and probing never share draws.
INIT = 0
PRETRAIN = 1
PROBE = 2
GENERATE = 3


def derive_seed(seed: int, *keys: int) -> int:
    ss = np.random.SeedSequence([int(seed), *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]))


def seed_torch(seed: int, *keys: int) -> None:
    torch.manual_seed(derive_seed(seed, *keys))
