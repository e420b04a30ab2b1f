"""PCA trajectories of temporal-encoder output tokens."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from ..data.records import SequenceRecord
from ..errors import ContractError
from .probe import _as_encoder, _record_tokens, _window_batch, record_windows

log = logging.getLogger(__name__)


@dataclass
class Trajectory:
    frame_indices: np.ndarray
    times: np.ndarray
    coords: np.ndarray  # (n, 2), centred
    explained_variance: np.ndarray  # top-2 eigenvalues
    total_variance: float
    degenerate: bool
    csv_path: Optional[Path] = None
    plot_path: Optional[Path] = None

    @property
    def explained_ratio(self) -> float:
        return float(self.explained_variance.sum() / self.total_variance) if self.total_variance > 0 else 0.0


def temporal_tokens(model, record: SequenceRecord, policy: str) -> tuple[np.ndarray, np.ndarray]:
    """Temporal-encoder output token per policy-grid frame, averaged over overlapping windows."""
    encoder = _as_encoder(model)
    cap = encoder.cfg.clip_capacity
    encoder.eval()
    windows = record_windows(record, policy, cap)
    with torch.no_grad():
        tokens = _record_tokens(encoder, record)
        tok, times, valid = _window_batch([tokens] * len(windows), [record.timestamps] * len(windows), windows, cap)
        out = encoder.encode_sequence(tok, valid, times if encoder.cfg.use_time_embedding else None)
    out = out.output_tokens.double().numpy()
    frames = np.unique(np.concatenate(windows))
    acc = {int(f): [] for f in frames}
    for w, idx in enumerate(windows):
        for pos, f in enumerate(idx):
            acc[int(f)].append(out[w, pos])
    return frames, np.stack([np.mean(acc[int(f)], axis=0) for f in frames])


def pca_2d(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, float, bool]:
    """Project rows of ``x`` onto the top-2 covariance eigenvectors.

    Returns ``(coords, top2_eigenvalues, total_variance, degenerate)``.
    """
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(axis=0, keepdims=True)
    cov = xc.T @ xc / max(1, len(x) - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    total = float(np.clip(evals, 0, None).sum())
    if total <= 1e-12:
        return np.zeros((len(x), 2)), np.zeros(2), 0.0, True
    coords = xc @ evecs[:, :2]
    return coords - coords.mean(axis=0), np.clip(evals[:2], 0, None), total, False


def export_trajectory(
    model,
    record: SequenceRecord,
    policy: str,
    out_dir: str | Path | None = None,
    plot: bool = True,
) -> Trajectory:
    if len(record) < 3:
        raise ContractError(f"{record.sequence_id}: trajectory needs >= 3 frames")
    frames, tokens = temporal_tokens(model, record, policy)
    coords, evals, total, degenerate = pca_2d(tokens)
    if degenerate:
        log.warning("%s: all temporal tokens identical; emitting zero coordinates", record.sequence_id)
    times = record.timestamps[frames] - record.timestamps[0]
    traj = Trajectory(frames, times, coords, evals, total, degenerate)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        traj.csv_path = out_dir / f"{record.sequence_id}_trajectory.csv"
        with traj.csv_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame_index", "time", "pc1", "pc2"])
            for f, t, (a, b) in zip(frames, times, coords):
                w.writerow([int(f), repr(float(t)), repr(float(a)), repr(float(b))])
        if plot:
            traj.plot_path = out_dir / f"{record.sequence_id}_trajectory.png"
            render_trajectory(traj, traj.plot_path, title=record.sequence_id)
    return traj


def render_trajectory(traj: Trajectory, path: Path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    x, y = traj.coords[:, 0], traj.coords[:, 1]
    ax.plot(x, y, "-", color="0.7", lw=1)
    sc = ax.scatter(x, y, c=traj.times, cmap="viridis", s=22, zorder=3)
    for f, a, b in zip(traj.frame_indices, x, y):
        ax.annotate(str(int(f)), (a, b), fontsize=6, xytext=(2, 2), textcoords="offset points")
    fig.colorbar(sc, ax=ax, label="time")
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.set_title(title + (" (degenerate)" if traj.degenerate else ""))
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def closure_ratio(traj: Trajectory) -> float:
    """Distance between first and last point relative to the mean step length.

    Small values indicate a loop-shaped (periodic) trajectory.
    """
    steps = np.linalg.norm(np.diff(traj.coords, axis=0), axis=1)
    if steps.mean() == 0:
        return 0.0
    return float(np.linalg.norm(traj.coords[-1] - traj.coords[0]) / steps.mean())
