"""Sequence records, dataset manifests and their on-disk format.

Layout of a dataset root::

    index.json                 {unit, tasks: [{name, kind}], sequences: [relative paths]}
    <sequence_id>/meta.json    {sequence_id, patient_id, timestamps, unit, labels, split}
    <sequence_id>/frame_0000.png ...   8-bit grayscale
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from ..errors import ConfigError, ContractError

SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)
TASK_KINDS = ("classification", "regression")


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")


@dataclass
class SequenceRecord:
    sequence_id: str
    patient_id: str
    frames: np.ndarray  # (K, H, W) uint8
    timestamps: np.ndarray  # (K,) float64
    labels: dict[str, float] = field(default_factory=dict)
    split: str = "train"

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.validate()

    def __len__(self) -> int:
        return len(self.timestamps)

    def validate(self, tasks: Iterable[TaskSpec] = ()) -> None:
        if self.frames.ndim != 3:
            raise ContractError(f"{self.sequence_id}: frames must be (K, H, W), got {self.frames.shape}")
        if len(self.frames) != len(self.timestamps) or len(self.timestamps) < 1:
            raise ContractError(f"{self.sequence_id}: need len(frames) == len(timestamps) >= 1")
        if len(self.timestamps) > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise ContractError(f"{self.sequence_id}: timestamps must be strictly increasing")
        if self.split not in SPLITS:
            raise ContractError(f"{self.sequence_id}: unknown split {self.split!r}")
        for task in tasks:
            value = self.labels.get(task.name)
            if value is None or not math.isfinite(value):
                raise ContractError(f"{self.sequence_id}: label {task.name!r} missing or non-finite")

    def float_frames(self) -> np.ndarray:
        return self.frames.astype(np.float32) / 255.0


@dataclass
class DatasetManifest:
    unit: str
    tasks: list[TaskSpec]
    records: list[SequenceRecord]
    split_fractions: tuple[float, float, float] = SPLIT_FRACTIONS
    root: Path | None = None

    def __post_init__(self):
        for r in self.records:
            r.validate(self.tasks)

    def split(self, name: str) -> list[SequenceRecord]:
        return [r for r in self.records if r.split == name]

    def task(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise ConfigError(f"task {name!r} not in manifest (have {[t.name for t in self.tasks]})")

    def record(self, sequence_id: str) -> SequenceRecord:
        for r in self.records:
            if r.sequence_id == sequence_id:
                return r
        raise KeyError(sequence_id)

    @property
    def image_size(self) -> int:
        return int(self.records[0].frames.shape[-1])

    def write(self, root: str | Path) -> Path:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        paths = []
        for rec in self.records:
            d = root / rec.sequence_id
            d.mkdir(parents=True, exist_ok=True)
            for i, frame in enumerate(rec.frames):
                Image.fromarray(np.ascontiguousarray(frame, dtype=np.uint8)).save(d / f"frame_{i:04d}.png")
            meta = {
                "sequence_id": rec.sequence_id,
                "patient_id": rec.patient_id,
                "timestamps": [float(t) for t in rec.timestamps],
                "unit": self.unit,
                "labels": {k: float(v) for k, v in rec.labels.items()},
                "split": rec.split,
            }
            (d / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
            paths.append(rec.sequence_id)
        index = {
            "unit": self.unit,
            "tasks": [{"name": t.name, "kind": t.kind} for t in self.tasks],
            "sequences": paths,
        }
        (root / "index.json").write_text(json.dumps(index, indent=2) + "\n")
        self.root = root
        return root

    @classmethod
    def read(cls, root: str | Path) -> "DatasetManifest":
        root = Path(root)
        index_path = root / "index.json"
        if not index_path.exists():
            raise ConfigError(f"no index.json under {root}")
        index = json.loads(index_path.read_text())
        records = []
        for rel in index["sequences"]:
            d = root / rel
            meta = json.loads((d / "meta.json").read_text())
            if meta["unit"] != index["unit"]:
                raise ContractError(f"{rel}: unit {meta['unit']!r} differs from index unit {index['unit']!r}")
            n = len(meta["timestamps"])
            frames = np.stack([np.array(Image.open(d / f"frame_{i:04d}.png")) for i in range(n)])
            records.append(
                SequenceRecord(
                    sequence_id=meta["sequence_id"],
                    patient_id=meta["patient_id"],
                    frames=frames,
                    timestamps=np.array(meta["timestamps"], dtype=np.float64),
                    labels=dict(meta["labels"]),
                    split=meta["split"],
                )
            )
        tasks = [TaskSpec(t["name"], t["kind"]) for t in index["tasks"]]
        check_patient_exclusive(records)
        return cls(unit=index["unit"], tasks=tasks, records=records, root=root)


def split_counts(n_patients: int, fractions: Sequence[float] = SPLIT_FRACTIONS) -> list[int]:
    """Largest-remainder allocation of patients to splits."""
    raw = [f * n_patients for f in fractions]
    counts = [int(math.floor(x)) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n_patients - sum(counts)]:
        counts[i] += 1
    return counts


def assign_splits(
    patient_ids: Sequence[str], rng: np.random.Generator, fractions: Sequence[float] = SPLIT_FRACTIONS
) -> dict[str, str]:
    """Map each distinct patient to exactly one split."""
    unique = sorted(set(patient_ids))
    perm = rng.permutation(len(unique))
    counts = split_counts(len(unique), fractions)
    out, pos = {}, 0
    for split, c in zip(SPLITS, counts):
        for j in perm[pos : pos + c]:
            out[unique[j]] = split
        pos += c
    return out


def check_patient_exclusive(records: Iterable[SequenceRecord]) -> dict[str, str]:
    """Raise if any patient has sequences in two splits; returns patient -> split."""
    owner: dict[str, str] = {}
    for r in records:
        prev = owner.setdefault(r.patient_id, r.split)
        if prev != r.split:
            raise ContractError(f"patient {r.patient_id} appears in both {prev} and {r.split}")
    return owner


def check_split_integrity(manifest: DatasetManifest, tol: float = 0.02) -> dict[str, float]:
    """Assert patient exclusivity and 70/15/15 patient fractions within ``tol``.

    Returns the observed patient fraction per split.
    """
    owner = check_patient_exclusive(manifest.records)
    n = len(owner)
    observed = {s: sum(1 for v in owner.values() if v == s) / n for s in SPLITS}
    for s, target in zip(SPLITS, manifest.split_fractions):
        if abs(observed[s] - target) > tol:
            raise ContractError(f"split {s}: patient fraction {observed[s]:.3f} outside {target}±{tol}")
    return observed
