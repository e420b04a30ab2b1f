import json
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from oracles import ntxent_bruteforce
from tvrl.checkpoint import load_checkpoint, save_checkpoint
from tvrl.data.sampling import AugmentConfig
from tvrl.data.synthetic import LongitudinalConfig, generate_longitudinal_synthetic
from tvrl.encoder import EncoderConfig
from tvrl.errors import CheckpointMismatchError, ConfigError, ContractError, DegenerateBatchError
from tvrl.objectives import LossConfig
from tvrl.training import (
    PretrainConfig,
    build_model,
    build_pairs,
    collate,
    compute_loss,
    lr_at,
    make_optimizer,
    pretrain,
    pretrain_step,
    read_metrics,
    steps_per_epoch,
)

NO_AUG = AugmentConfig(crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), flip_p=0.0, brightness=0.0, contrast=0.0,
                       blur_p=0.0)


def config(tiny_cfg, strategy="tvrl", **kw):
    enc = replace(tiny_cfg, use_time_embedding=strategy == "csimclr-te")
    base = dict(strategy=strategy, epochs=2, warmup_epochs=1, batch_size=8, seed=0, encoder=enc, save_every=0)
    base.update(kw)
    return PretrainConfig(**base)


def batch_for(manifest, cfg, n=6, seed=0):
    recs = manifest.split("train")[:n]
    return collate(build_pairs(recs, cfg, "successive", np.random.default_rng(seed)))


class TestSchedule:
    cfg = PretrainConfig(epochs=200, warmup_epochs=20, base_lr=2e-4)

    def test_anchor_points(self):
        total = 2000
        assert lr_at(0, total, self.cfg) == 0.0
        assert abs(lr_at(200, total, self.cfg) - 2e-4) <= 1e-9
        assert abs(lr_at(1100, total, self.cfg) - 1e-4) <= 1e-9
        assert abs(lr_at(total, total, self.cfg)) <= 1e-9

    def test_monotone_phases(self):
        lrs = [lr_at(s, 2000, self.cfg) for s in range(2001)]
        assert all(a <= b for a, b in zip(lrs[:200], lrs[1:201]))
        assert all(a >= b for a, b in zip(lrs[200:], lrs[201:]))

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            lr_at(2001, 2000, self.cfg)
        with pytest.raises(ContractError):
            lr_at(-1, 2000, self.cfg)


class TestConfig:
    def test_te_coupling(self, tiny_cfg):
        with pytest.raises(ConfigError):
            PretrainConfig(strategy="csimclr-te", encoder=tiny_cfg)
        with pytest.raises(ConfigError):
            PretrainConfig(strategy="tvrl", encoder=replace(tiny_cfg, use_time_embedding=True))

    def test_unknown_strategy(self):
        with pytest.raises(ConfigError):
            PretrainConfig(strategy="byol")

    def test_batch_size(self):
        with pytest.raises(ConfigError):
            PretrainConfig(batch_size=1)

    def test_from_dict_sets_te_flag(self):
        cfg = PretrainConfig.from_dict({"strategy": "csimclr-te", "encoder": {"image_size": 32, "patch_size": 4}})
        assert cfg.encoder.use_time_embedding

    def test_from_dict_unknown_key(self):
        with pytest.raises(ConfigError):
            PretrainConfig.from_dict({"strategy": "tvrl", "momentum": 0.9})

    def test_steps_per_epoch_drops_singleton(self):
        assert steps_per_epoch(65, 32) == 2
        assert steps_per_epoch(66, 32) == 3


class TestLoss:
    def test_lambda_zero_is_contrastive(self, tiny_cfg, tiny_manifest):
        cfg = config(tiny_cfg, loss=LossConfig(lambda_weight=0.0))
        model = build_model(cfg)
        loss, parts = compute_loss(model, batch_for(tiny_manifest, cfg), cfg, np.random.default_rng(0))
        assert loss.item() == pytest.approx(parts["contrastive"], abs=1e-7)

    def test_tvrl_combination(self, tiny_cfg, tiny_manifest):
        cfg = config(tiny_cfg, loss=LossConfig(lambda_weight=0.3))
        model = build_model(cfg)
        loss, parts = compute_loss(model, batch_for(tiny_manifest, cfg), cfg, np.random.default_rng(0))
        assert loss.item() == pytest.approx(0.7 * parts["contrastive"] + 0.3 * parts["masked"], abs=1e-6)
        assert 0.0 <= parts["masked"] <= 2.0

    def test_separate_pass_changes_contrastive_only(self, tiny_cfg, tiny_manifest):
        cfg = config(tiny_cfg)
        model = build_model(cfg)
        batch = batch_for(tiny_manifest, cfg)
        _, a = compute_loss(model, batch, cfg, np.random.default_rng(1))
        _, b = compute_loss(model, batch, replace(cfg, separate_contrastive_pass=True), np.random.default_rng(1))
        assert a["masked"] == b["masked"] and a["contrastive"] != b["contrastive"]

    def test_identical_views_match_oracle(self, tiny_cfg, tiny_manifest):
        cfg = config(tiny_cfg, strategy="csimclr", augment=NO_AUG)
        model = build_model(cfg).double().eval()
        batch = batch_for(tiny_manifest, cfg, n=4)
        assert torch.equal(batch.frames[0], batch.frames[1])
        loss, _ = compute_loss(model, batch, cfg, np.random.default_rng(0))
        with torch.no_grad():
            z = model.head_p(model.encoder(batch.frames.double(), batch.validity).cls_embedding).numpy()
        assert loss.item() == pytest.approx(ntxent_bruteforce(z, 0.1), abs=1e-9)
        # positives are exact copies, so the loss is below the uniform value ln(2N - 1)
        assert loss.item() < math.log(7)

    def test_multiclip_has_no_masked_term(self, tiny_cfg, tiny_manifest):
        cfg = config(tiny_cfg, strategy="multiclip")
        _, parts = compute_loss(build_model(cfg), batch_for(tiny_manifest, cfg), cfg, np.random.default_rng(0))
        assert set(parts) == {"contrastive"}

    def test_te_strategy_uses_times(self, tiny_cfg, tiny_manifest):
        cfg = config(tiny_cfg, strategy="csimclr-te")
        model = build_model(cfg)
        batch = batch_for(tiny_manifest, cfg)
        a, _ = compute_loss(model, batch, cfg, np.random.default_rng(0))
        batch.times = batch.times * 2
        b, _ = compute_loss(model, batch, cfg, np.random.default_rng(0))
        assert a.item() != b.item()

    def test_degenerate_batch(self, tiny_cfg, tiny_manifest):
        cfg = config(tiny_cfg)
        with pytest.raises(DegenerateBatchError):
            compute_loss(build_model(cfg), batch_for(tiny_manifest, cfg, n=1), cfg, np.random.default_rng(0))


class TestStep:
    @pytest.mark.parametrize("strategy", ["csimclr", "csimclr-te", "tvrl", "multiclip"])
    def test_small_step_descends(self, tiny_cfg, tiny_manifest, strategy):
        cfg = config(tiny_cfg, strategy=strategy, base_lr=1e-5)
        model = build_model(cfg).double()
        opt = torch.optim.SGD(model.parameters(), lr=1e-3)
        batch = batch_for(tiny_manifest, cfg, n=8)
        before, _ = compute_loss(model, batch, cfg, np.random.default_rng(0))
        pretrain_step(batch, model, cfg, opt, np.random.default_rng(0))
        after, _ = compute_loss(model, batch, cfg, np.random.default_rng(0))
        assert after.item() < before.item()

    def test_step_returns_float(self, tiny_cfg, tiny_manifest):
        cfg = config(tiny_cfg)
        model = build_model(cfg)
        pairs = build_pairs(tiny_manifest.split("train")[:4], cfg, "successive", np.random.default_rng(0))
        value = pretrain_step(pairs, model, cfg, make_optimizer(model, cfg), np.random.default_rng(0))
        assert isinstance(value, float) and math.isfinite(value)


def weights(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


class TestPretrain:
    def test_zero_epochs_keeps_init(self, tiny_cfg, tiny_manifest, tmp_path):
        cfg = config(tiny_cfg, epochs=0, warmup_epochs=0)
        model, manifest = load_checkpoint(pretrain(cfg, tiny_manifest, tmp_path))
        init = build_model(cfg).state_dict()
        assert all(torch.equal(init[k], v) for k, v in model.state_dict().items())
        assert manifest["epoch"] == 0

    def test_deterministic(self, tiny_cfg, tiny_manifest, tmp_path):
        cfg = config(tiny_cfg, epochs=1, warmup_epochs=0)
        a, _ = load_checkpoint(pretrain(cfg, tiny_manifest, tmp_path / "a"))
        b, _ = load_checkpoint(pretrain(cfg, tiny_manifest, tmp_path / "b"))
        sa, sb = a.state_dict(), b.state_dict()
        assert all(torch.equal(sa[k], sb[k]) for k in sa)
        assert read_metrics(tmp_path / "a" / "metrics.jsonl") == read_metrics(tmp_path / "b" / "metrics.jsonl")

    def test_seed_changes_result(self, tiny_cfg, tiny_manifest, tmp_path):
        a, _ = load_checkpoint(pretrain(config(tiny_cfg, epochs=1, warmup_epochs=0), tiny_manifest, tmp_path / "a"))
        b, _ = load_checkpoint(pretrain(config(tiny_cfg, epochs=1, warmup_epochs=0, seed=1), tiny_manifest,
                                        tmp_path / "b"))
        assert not torch.equal(a.encoder.temporal.cls_token, b.encoder.temporal.cls_token)

    def test_loss_trends_down(self, tiny_cfg, tmp_path):
        manifest = generate_longitudinal_synthetic(92, LongitudinalConfig(image_size=16), seed=11)
        assert len(manifest.split("train")) >= 60
        cfg = config(tiny_cfg, strategy="csimclr", epochs=5, warmup_epochs=1, batch_size=16, base_lr=1e-3)
        pretrain(cfg, manifest, tmp_path)
        losses = [m["loss"] for m in read_metrics(tmp_path / "metrics.jsonl")]
        assert len(losses) == 5
        assert np.mean(losses[-2:]) < np.mean(losses[:2])

    def test_intermediate_checkpoints(self, tiny_cfg, tiny_manifest, tmp_path):
        cfg = config(tiny_cfg, epochs=2, warmup_epochs=0, save_every=1)
        final = pretrain(cfg, tiny_manifest, tmp_path)
        assert (tmp_path / "ckpt_epoch_0001" / "weights.pt").exists()
        assert final == tmp_path / "ckpt"

    def test_image_size_mismatch(self, tiny_manifest, tmp_path):
        cfg = PretrainConfig(strategy="tvrl", epochs=1, warmup_epochs=0, batch_size=4,
                             encoder=EncoderConfig.desk())
        with pytest.raises(ConfigError):
            pretrain(cfg, tiny_manifest, tmp_path)


class TestCheckpoint:
    def test_round_trip(self, tiny_cfg, tmp_path):
        cfg = config(tiny_cfg)
        model = build_model(cfg)
        path = save_checkpoint(model, tmp_path / "c", strategy="tvrl", epoch=3, seed=0)
        back, manifest = load_checkpoint(path, expected_encoder=cfg.encoder)
        assert manifest["strategy"] == "tvrl" and manifest["epoch"] == 3
        s = model.state_dict()
        assert all(torch.equal(s[k], v) for k, v in back.state_dict().items())

    def test_expected_encoder_mismatch(self, tiny_cfg, tmp_path):
        path = save_checkpoint(build_model(config(tiny_cfg)), tmp_path / "c", strategy="tvrl", epoch=0, seed=0)
        with pytest.raises(CheckpointMismatchError):
            load_checkpoint(path, expected_encoder=replace(tiny_cfg, hidden_dim=32))

    def test_tampered_config(self, tiny_cfg, tmp_path):
        path = save_checkpoint(build_model(config(tiny_cfg)), tmp_path / "c", strategy="tvrl", epoch=0, seed=0)
        meta = json.loads((path / "checkpoint.json").read_text())
        meta["encoder_config"]["temporal_layers"] = 2
        (path / "checkpoint.json").write_text(json.dumps(meta))
        with pytest.raises(CheckpointMismatchError):
            load_checkpoint(path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CheckpointMismatchError):
            load_checkpoint(tmp_path)


def test_checkpoint_forward_bitwise(tiny_cfg, tiny_manifest, tmp_path):
    cfg = config(tiny_cfg, epochs=1, warmup_epochs=0)
    path = pretrain(cfg, tiny_manifest, tmp_path)
    a, _ = load_checkpoint(path)
    b, _ = load_checkpoint(path)
    batch = batch_for(tiny_manifest, cfg)
    with torch.no_grad():
        out_a = a.eval().encoder(batch.frames, batch.validity)
        out_b = b.eval().encoder(batch.frames, batch.validity)
    assert torch.equal(out_a.cls_embedding, out_b.cls_embedding)
    assert torch.equal(out_a.output_tokens, out_b.output_tokens)
