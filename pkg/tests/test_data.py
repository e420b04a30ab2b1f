import numpy as np
import pytest
import torch
from scipy import ndimage

from tvrl.data.records import (
    DatasetManifest,
    SequenceRecord,
    TaskSpec,
    assign_splits,
    check_split_integrity,
    split_counts,
)
from tvrl.data.sampling import (
    AugParams,
    AugmentConfig,
    apply_augmentation,
    augment_clip,
    clip_from_indices,
    crop_sample_coords,
    make_view_pair,
    mask_count,
    resized_crop,
    sample_aug_params,
    sample_clip,
    sample_clip_pair,
    sample_mask_plan,
    valid_starts,
)
from tvrl.data.synthetic import (
    CardiacConfig,
    LongitudinalConfig,
    ellipse_area,
    generate_cardiac_synthetic,
    generate_longitudinal_synthetic,
    lesion_radius,
)
from tvrl.errors import ConfigError, ContractError, UnusableRecordError


def record(k, size=8, times=None, rid="s0"):
    rng = np.random.default_rng(k)
    frames = rng.integers(0, 256, size=(k, size, size), dtype=np.uint8)
    times = np.arange(k, dtype=float) if times is None else times
    return SequenceRecord(rid, "p0", frames, times, {"y": 1.0})


class TestRecords:
    def test_non_increasing_timestamps_rejected(self):
        with pytest.raises(ContractError):
            record(3, times=np.array([0.0, 2.0, 2.0]))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            SequenceRecord("a", "p", np.zeros((3, 4, 4), np.uint8), np.arange(2.0))

    def test_unknown_task_kind(self):
        with pytest.raises(ConfigError):
            TaskSpec("x", "ranking")

    def test_round_trip_bitwise(self, tmp_path, tiny_manifest):
        tiny_manifest.write(tmp_path / "ds")
        back = DatasetManifest.read(tmp_path / "ds")
        assert back.unit == tiny_manifest.unit and back.tasks == tiny_manifest.tasks
        assert len(back.records) == len(tiny_manifest.records)
        for a, b in zip(tiny_manifest.records, back.records):
            assert a.sequence_id == b.sequence_id and a.patient_id == b.patient_id and a.split == b.split
            assert a.frames.dtype == b.frames.dtype and np.array_equal(a.frames, b.frames)
            assert a.timestamps.tobytes() == b.timestamps.tobytes()
            assert a.labels == b.labels


class TestSplits:
    def test_largest_remainder(self):
        assert split_counts(10) == [7, 2, 1] or split_counts(10) == [7, 1, 2]
        assert sum(split_counts(7)) == 7
        assert split_counts(100) == [70, 15, 15]

    def test_patient_exclusive_and_fractions(self):
        m = generate_longitudinal_synthetic(600, LongitudinalConfig(image_size=8), seed=0)
        observed = check_split_integrity(m, tol=0.02)
        assert abs(observed["train"] - 0.70) <= 0.02

    def test_assignment_is_per_patient(self):
        ids = [f"p{i // 2}" for i in range(50)]
        owner = assign_splits(ids, np.random.default_rng(0))
        assert set(owner) == set(ids)

    def test_leak_detected(self, tiny_manifest):
        m = DatasetManifest("days", [], [
            record(3, rid="a"), record(3, rid="b"),
        ])
        m.records[0].split, m.records[1].split = "train", "test"
        with pytest.raises(ContractError):
            check_split_integrity(m, tol=1.0)


class TestClips:
    def test_dense_starts_for_50_frames(self):
        assert list(valid_starts(50, "dense-stride-2")) == list(range(36))

    def test_short_record_prefix_padding(self):
        r = record(5, times=np.array([0.0, 30.0, 100.0, 400.0, 410.0]))
        clip = sample_clip(r, "successive", np.random.default_rng(0))
        assert clip.validity.tolist() == [True] * 5 + [False] * 3
        assert np.all(clip.frames[5:] == 0)
        assert clip.relative_times[:5].tolist() == [0.0, 30.0, 100.0, 400.0, 410.0]

    def test_relative_times_from_clip_start(self):
        r = record(12, times=np.cumsum(np.arange(1, 13, dtype=float)))
        clip = sample_clip(r, "successive", np.random.default_rng(0), start=3)
        assert clip.relative_times[0] == 0.0
        np.testing.assert_array_equal(clip.relative_times, r.timestamps[3:11] - r.timestamps[3])

    def test_dense_stride(self):
        r = record(20)
        clip = sample_clip(r, "dense-stride-2", np.random.default_rng(0), start=2)
        assert clip.frame_indices.tolist() == [2, 4, 6, 8, 10, 12, 14, 16]

    def test_single_frame_unusable(self):
        with pytest.raises(UnusableRecordError):
            sample_clip(record(1), "successive", np.random.default_rng(0))

    def test_unknown_policy(self):
        with pytest.raises(ConfigError):
            sample_clip(record(4), "random", np.random.default_rng(0))

    def test_invalid_start(self):
        with pytest.raises(ContractError):
            sample_clip(record(10), "successive", np.random.default_rng(0), start=5)

    def test_multiclip_pairs_disjoint_when_possible(self):
        rng = np.random.default_rng(0)
        for k in (4, 8, 12, 50):
            a, b = sample_clip_pair(record(k), "successive", rng)
            ia, ib = a.frame_indices[a.validity], b.frame_indices[b.validity]
            assert len(ia) == len(ib) >= 2
            assert not set(ia) & set(ib)

    def test_multiclip_short_record_maximal_offset(self):
        a, b = sample_clip_pair(record(3), "successive", np.random.default_rng(1))
        starts = sorted([a.frame_indices[0], b.frame_indices[0]])
        assert starts == [0, 1]


def identity_params(**kw):
    base = dict(top=0.0, left=0.0, height=16.0, width=16.0, flip=False, brightness=1.0, contrast=1.0,
                blur_sigma=None)
    base.update(kw)
    return AugParams(**base)


class TestAugmentation:
    def test_identical_frames_stay_identical(self):
        frame = np.random.default_rng(0).random((16, 16)).astype(np.float32)
        clip = clip_from_indices(SequenceRecord("a", "p", np.stack([(frame * 255).astype(np.uint8)] * 6),
                                                np.arange(6.0)), np.arange(6))
        for seed in range(20):
            out, _ = augment_clip(clip, AugmentConfig(), np.random.default_rng(seed))
            for t in range(1, 6):
                assert np.array_equal(out.frames[0], out.frames[t])
            assert np.all(out.frames[6:] == 0)

    def test_identity_parameters(self):
        x = np.random.default_rng(0).random((3, 16, 16)).astype(np.float32)
        np.testing.assert_allclose(apply_augmentation(x, identity_params()), x, atol=1e-6)

    def test_determinism(self):
        clip = clip_from_indices(record(8, size=16), np.arange(8))
        a = make_view_pair(clip, AugmentConfig(), np.random.default_rng(5))
        b = make_view_pair(clip, AugmentConfig(), np.random.default_rng(5))
        assert np.array_equal(a.view_i.frames, b.view_i.frames) and np.array_equal(a.view_j.frames, b.view_j.frames)

    def test_crop_box_inside_image(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            p = sample_aug_params(rng, AugmentConfig(), 32)
            assert p.top >= 0 and p.left >= 0 and p.top + p.height <= 32 + 1e-9 and p.left + p.width <= 32 + 1e-9
            assert 0.5 * 32 * 32 - 1e-6 <= p.height * p.width <= 32 * 32 + 1e-6 or p.height == 32

    def test_crop_matches_interpolation_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.random((2, 16, 16))
        for _ in range(10):
            p = sample_aug_params(rng, AugmentConfig(), 16)
            got = resized_crop(torch.from_numpy(x), p).numpy()
            rows, cols = crop_sample_coords(p, 16)
            rr, cc = np.meshgrid(rows, cols, indexing="ij")
            for t in range(2):
                ref = ndimage.map_coordinates(x[t], [rr, cc], order=1, mode="nearest")
                np.testing.assert_allclose(got[t], ref, atol=1e-5)

    def test_flip(self):
        x = np.random.default_rng(0).random((1, 16, 16)).astype(np.float32)
        np.testing.assert_allclose(apply_augmentation(x, identity_params(flip=True)), x[..., ::-1], atol=1e-6)

    def test_blur_preserves_constant_image(self):
        x = np.full((1, 16, 16), 0.4, dtype=np.float32)
        np.testing.assert_allclose(apply_augmentation(x, identity_params(blur_sigma=1.5)), x, atol=1e-6)


class TestMasks:
    def test_counts(self):
        assert mask_count(8, 0.15) == 1
        assert mask_count(8, 0.5) == 4
        assert mask_count(2, 0.15) == 1
        assert mask_count(10, 0.15) == 2  # 1.5 rounds up

    def test_plan_within_valid_prefix(self):
        rng = np.random.default_rng(0)
        for v in range(1, 9):
            plan = sample_mask_plan(v, 0.5, rng)
            assert all(0 <= i < v for i in plan.indices) and len(set(plan.indices)) == plan.m

    def test_uniform_over_positions(self):
        rng = np.random.default_rng(0)
        counts = np.zeros(8)
        for _ in range(10_000):
            counts[list(sample_mask_plan(8, 0.15, rng).indices)] += 1
        assert np.all(np.abs(counts - 1250) <= 100), counts

    def test_empty_clip(self):
        with pytest.raises(ContractError):
            sample_mask_plan(0, 0.15, np.random.default_rng(0))


class TestCardiacSynthetic:
    def test_pixel_area_tracks_analytic_curve(self):
        m = generate_cardiac_synthetic(2, CardiacConfig(image_size=128), seed=0)
        for r in m.records:
            lab = r.labels
            expected = ellipse_area(r.timestamps, lab["param_a0"], lab["param_e"], lab["param_f"], lab["param_phi"])
            counted = (r.frames.astype(float) / 255 > 0.6).sum(axis=(1, 2)) / 128**2 * 100
            rel = np.abs(counted - expected) / expected
            assert rel.max() < 0.03, rel.max()

    def test_determinism(self):
        a = generate_cardiac_synthetic(3, CardiacConfig(image_size=16), seed=4)
        b = generate_cardiac_synthetic(3, CardiacConfig(image_size=16), seed=4)
        assert all(np.array_equal(x.frames, y.frames) for x, y in zip(a.records, b.records))

    def test_zero_contraction(self):
        m = generate_cardiac_synthetic(3, CardiacConfig(image_size=16, contraction_range=(0.0, 0.0)), seed=0)
        for r in m.records:
            assert r.labels["output_analog"] == 0.0 and r.labels["ef_analog"] == 0.0

    def test_doubled_frequency_doubles_output(self):
        a = generate_cardiac_synthetic(3, CardiacConfig(image_size=16, frequency_range=(1.0, 1.0)), seed=0)
        b = generate_cardiac_synthetic(3, CardiacConfig(image_size=16, frequency_range=(2.0, 2.0)), seed=0)
        for x, y in zip(a.records, b.records):
            assert y.labels["output_analog"] == pytest.approx(2 * x.labels["output_analog"], rel=1e-12)
            assert y.labels["ef_analog"] == x.labels["ef_analog"]

    def test_shape_and_unit(self):
        m = generate_cardiac_synthetic(1, CardiacConfig(image_size=16), seed=0)
        assert m.unit == "seconds" and m.records[0].frames.shape == (50, 16, 16)


class TestLongitudinalSynthetic:
    def test_labels_recomputed(self):
        cfg = LongitudinalConfig(image_size=8)
        m = generate_longitudinal_synthetic(100, cfg, seed=7)
        for r in m.records:
            assert cfg.scans_range[0] <= len(r) <= cfg.scans_range[1]
            rel = r.timestamps - r.timestamps[0]
            assert np.all(np.diff(rel) >= cfg.min_gap_days - 1e-6)
            r0, g = r.labels["param_r0"], r.labels["growth_rate"]
            future = lesion_radius(rel[-1] + cfg.horizon_days, r0, g)
            assert r.labels["prognosis"] == float(future > cfg.threshold)
            assert r.labels["stage_class"] == float(lesion_radius(rel[-1], r0, g) > cfg.threshold)

    def test_both_prognosis_classes_present(self):
        m = generate_longitudinal_synthetic(200, LongitudinalConfig(image_size=8), seed=0)
        frac = np.mean([r.labels["prognosis"] for r in m.records])
        assert 0.2 < frac < 0.8

    def test_lesion_grows(self):
        cfg = LongitudinalConfig(image_size=64, growth_range=(8.0, 8.0), noise_std=0.0)
        r = generate_longitudinal_synthetic(1, cfg, seed=0).records[0]
        bright = (r.frames > 0.5 * 255).sum(axis=(1, 2))
        assert bright[-1] >= bright[0]


def test_leaky_dataset_rejected_on_read(tmp_path, tiny_manifest):
    import json

    tiny_manifest.write(tmp_path / "ds")
    first, second = [r for r in tiny_manifest.records if r.split == "train"][:2]
    meta_path = tmp_path / "ds" / second.sequence_id / "meta.json"
    meta = json.loads(meta_path.read_text())
    meta["patient_id"], meta["split"] = first.patient_id, "test"
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(ContractError):
        DatasetManifest.read(tmp_path / "ds")


@pytest.mark.parametrize("policy", ["successive", "dense-stride-2"])
def test_clip_determinism(policy):
    r = record(30, times=np.cumsum(np.full(30, 2.5)))
    a = sample_clip(r, policy, np.random.default_rng(9))
    b = sample_clip(r, policy, np.random.default_rng(9))
    assert np.array_equal(a.frames, b.frames) and np.array_equal(a.frame_indices, b.frame_indices)
    valid = a.relative_times[a.validity]
    assert np.all(np.diff(valid) > 0)
