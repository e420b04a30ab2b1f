"""Synthetic stand-ins for the cardiac video and longitudinal scan datasets.

Both generators are fully determined by ``(n, config, seed)``.

Cardiac: 50 frames over 1.6 s of a bright ellipse on a static striped
background. The ellipse area (in percent of the field of view) follows

    A(t) = A0 * (1 - e * (1 + sin(2 pi f t + phi)) / 2)

so A_max = A0 and A_max - A_min = A0 * e. Labels are
``output_analog = (A_max - A_min) * f``, ``ef_analog = (A_max - A_min) / A_max``
and the background stripe orientation ``texture_class``.

Longitudinal: K in [4, 12] scans with exponential inter-scan gaps showing a
lesion of radius (percent of field width) ``r(t) = r0 + g * t / 365.25`` where
t is days since the first scan and g is the growth in percent per year.
Labels are ``growth_rate = g``, ``prognosis = r(t_last + horizon) > threshold``
and ``stage_class = r(t_last) > threshold``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..seeding import GENERATE, derive_rng
from .records import DatasetManifest, SequenceRecord, TaskSpec, assign_splits

SUPERSAMPLE = 4


@dataclass(frozen=True)
class CardiacConfig:
    image_size: int = 128
    n_frames: int = 50
    frame_interval: float = 0.032  # seconds
    area_range: tuple[float, float] = (10.0, 22.0)  # A0, percent of image area
    contraction_range: tuple[float, float] = (0.2, 0.6)  # e
    frequency_range: tuple[float, float] = (0.7, 1.5)  # Hz
    aspect_range: tuple[float, float] = (0.7, 1.0)  # minor / major axis
    center_jitter: float = 0.08  # fraction of image size
    background_range: tuple[float, float] = (0.1, 0.3)
    texture_amplitude: float = 0.08
    ellipse_intensity: float = 0.85
    noise_std: float = 0.02

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LongitudinalConfig:
    image_size: int = 128
    scans_range: tuple[int, int] = (4, 12)
    mean_gap_days: float = 90.0
    min_gap_days: float = 1.0
    radius_range: tuple[float, float] = (8.0, 20.0)  # r0, percent of image width
    growth_range: tuple[float, float] = (0.0, 8.0)  # g, percent per year
    threshold: float = 24.0  # percent of image width
    horizon_days: float = 365.25
    center_jitter: float = 0.06
    lesion_intensity: float = 0.8
    edge_softness: float = 0.6  # pixels
    noise_std: float = 0.04
    second_eye_p: float = 0.5

    def to_dict(self) -> dict:
        return asdict(self)


def ellipse_area(t, a0, e, f, phi):
    """Analytic ellipse area (percent of image) at time ``t`` seconds."""
    return a0 * (1.0 - e * (1.0 + np.sin(2 * np.pi * f * np.asarray(t) + phi)) / 2.0)


def lesion_radius(t_days, r0, g):
    return r0 + g * np.asarray(t_days) / 365.25


def prognosis_label(r0: float, g: float, t_last: float, cfg: LongitudinalConfig) -> int:
    return int(lesion_radius(t_last + cfg.horizon_days, r0, g) > cfg.threshold)


def _supersampled_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    s = SUPERSAMPLE
    c = (np.arange(size * s) + 0.5) / s
    return np.meshgrid(c, c, indexing="ij")


def _coverage(inside: np.ndarray, size: int) -> np.ndarray:
    s = SUPERSAMPLE
    return inside.reshape(size, s, size, s).mean(axis=(1, 3))


def _stripes(size: int, rng: np.random.Generator, vertical: bool, amplitude: float) -> np.ndarray:
    period = rng.uniform(size / 10, size / 4)
    phase = rng.uniform(0, 2 * np.pi)
    x = np.arange(size) + 0.5
    wave = amplitude * np.sin(2 * np.pi * x / period + phase)
    return np.tile(wave[None, :], (size, 1)) if vertical else np.tile(wave[:, None], (1, size))


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def render_ellipse_frame(size, area_pct, aspect, cy, cx, theta, background, intensity):
    yy, xx = _supersampled_grid(size)
    area_px = area_pct / 100.0 * size * size
    a = math.sqrt(area_px / (math.pi * aspect))
    b = a * aspect
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    cov = _coverage((u / a) ** 2 + (v / b) ** 2 <= 1.0, size)
    return background * (1 - cov) + intensity * cov


def generate_cardiac_synthetic(n: int, config: CardiacConfig | None = None, seed: int = 0) -> DatasetManifest:
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = config or CardiacConfig()
    rng = derive_rng(seed, GENERATE, 0)
    size = cfg.image_size
    t = np.arange(cfg.n_frames) * cfg.frame_interval
    records = []
    for i in range(n):
        a0 = rng.uniform(*cfg.area_range)
        e = rng.uniform(*cfg.contraction_range)
        f = rng.uniform(*cfg.frequency_range)
        phi = rng.uniform(0, 2 * np.pi)
        aspect = rng.uniform(*cfg.aspect_range)
        theta = rng.uniform(0, np.pi)
        cy, cx = size / 2 + rng.uniform(-1, 1, size=2) * cfg.center_jitter * size
        texture_class = int(rng.integers(2))
        background = rng.uniform(*cfg.background_range) + _stripes(
            size, rng, vertical=bool(texture_class), amplitude=cfg.texture_amplitude
        )
        areas = ellipse_area(t, a0, e, f, phi)
        frames = []
        for area in areas:
            img = render_ellipse_frame(size, area, aspect, cy, cx, theta, background, cfg.ellipse_intensity)
            img = img + rng.normal(0, cfg.noise_std, img.shape)
            frames.append(_quantize(img))
        stroke = a0 * e
        records.append(
            SequenceRecord(
                sequence_id=f"seq_{i:05d}",
                patient_id=f"patient_{i:05d}",
                frames=np.stack(frames),
                timestamps=t.copy(),
                labels={
                    "output_analog": float(stroke * f),
                    "ef_analog": float(stroke / a0),
                    "texture_class": float(texture_class),
                    # generator parameters, kept for oracles and plots
                    "param_a0": float(a0),
                    "param_e": float(e),
                    "param_f": float(f),
                    "param_phi": float(phi),
                },
            )
        )
    splits = assign_splits([r.patient_id for r in records], rng)
    for r in records:
        r.split = splits[r.patient_id]
    tasks = [
        TaskSpec("output_analog", "regression"),
        TaskSpec("ef_analog", "regression"),
        TaskSpec("texture_class", "classification"),
    ]
    return DatasetManifest(unit="seconds", tasks=tasks, records=records)


def render_lesion_frame(size, radius_pct, cy, cx, background, cfg: LongitudinalConfig):
    yy, xx = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    r_px = radius_pct / 100.0 * size
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    blob = 1.0 / (1.0 + np.exp((dist - r_px) / cfg.edge_softness))
    return background * (1 - blob) + cfg.lesion_intensity * blob


def _retina_background(size: int, rng: np.random.Generator) -> np.ndarray:
    y = np.arange(size) + 0.5
    centre = size * rng.uniform(0.35, 0.65)
    width = size * rng.uniform(0.25, 0.4)
    band = 0.25 * np.exp(-(((y - centre) / width) ** 2))
    layers = 0.05 * np.sin(2 * np.pi * y / rng.uniform(size / 8, size / 4) + rng.uniform(0, 2 * np.pi))
    return np.tile((0.1 + band + layers)[:, None], (1, size))


def generate_longitudinal_synthetic(
    n: int, config: LongitudinalConfig | None = None, seed: int = 0
) -> DatasetManifest:
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = config or LongitudinalConfig()
    rng = derive_rng(seed, GENERATE, 1)
    size = cfg.image_size
    records = []
    patient = 0
    eyes_left = 0
    for i in range(n):
        if eyes_left == 0:
            patient += 1
            eyes_left = 2 if rng.random() < cfg.second_eye_p else 1
        eyes_left -= 1
        k = int(rng.integers(cfg.scans_range[0], cfg.scans_range[1] + 1))
        gaps = np.maximum(rng.exponential(cfg.mean_gap_days, size=k - 1), cfg.min_gap_days)
        offset = float(rng.uniform(0, 365.0))
        timestamps = np.round(offset + np.concatenate([[0.0], np.cumsum(gaps)]), 6)
        rel = timestamps - timestamps[0]
        r0 = rng.uniform(*cfg.radius_range)
        g = rng.uniform(*cfg.growth_range)
        cy, cx = size / 2 + rng.uniform(-1, 1, size=2) * cfg.center_jitter * size
        background = _retina_background(size, rng)
        frames = []
        for r in lesion_radius(rel, r0, g):
            img = render_lesion_frame(size, r, cy, cx, background, cfg)
            img = img + rng.normal(0, cfg.noise_std, img.shape)
            frames.append(_quantize(img))
        t_last = float(rel[-1])
        records.append(
            SequenceRecord(
                sequence_id=f"seq_{i:05d}",
                patient_id=f"patient_{patient:05d}",
                frames=np.stack(frames),
                timestamps=timestamps,
                labels={
                    "growth_rate": float(g),
                    "prognosis": float(prognosis_label(r0, g, t_last, cfg)),
                    "stage_class": float(lesion_radius(t_last, r0, g) > cfg.threshold),
                    "param_r0": float(r0),
                },
            )
        )
    splits = assign_splits([r.patient_id for r in records], rng)
    for r in records:
        r.split = splits[r.patient_id]
    tasks = [
        TaskSpec("growth_rate", "regression"),
        TaskSpec("prognosis", "classification"),
        TaskSpec("stage_class", "classification"),
    ]
    return DatasetManifest(unit="days", tasks=tasks, records=records)
