import inspect
from dataclasses import replace

import numpy as np
import pytest
import torch

from gazeobj import geometry, losses
from gazeobj.config import ConfigError, LossWeights, ModelConfig, RunConfig, load_config
from gazeobj.model import GazeObjectNet
from gazeobj.training import (Trainer, compute_losses, load_checkpoint, make_batch,
                              model_from_checkpoint, smoothed)


def params_equal(a, b):
    return all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


class TestConfig:
    def test_toml_and_json(self, tmp_path):
        (tmp_path / "c.toml").write_text('lr = 0.01\n[model]\nupsample = "interpolate"\n')
        cfg = load_config(tmp_path / "c.toml")
        assert cfg.lr == 0.01 and cfg.model.upsample == "interpolate"
        (tmp_path / "c.json").write_text('{"batch_size": 3, "weights": {"eng": 0}}')
        assert load_config(tmp_path / "c.json").weights == LossWeights(1, 1, 0)

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"learning_rate": 1})
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"model": {"width": 3}})

    def test_invalid_values(self):
        with pytest.raises(ConfigError):
            ModelConfig(upsample="nearest")
        with pytest.raises(ConfigError):
            RunConfig(lr=0)

    def test_roundtrip(self):
        cfg = RunConfig(model=ModelConfig(upsample="interpolate"), max_steps=7)
        assert RunConfig.from_dict(cfg.to_dict()) == cfg

    def test_grid_arithmetic(self):
        cfg = ModelConfig()
        assert cfg.det_grid == 56 and cfg.det_stride == 4 and cfg.c5_size == 7


class TestTrainer:
    def test_loss_decreases(self, small_samples, small_cfg):
        cfg = replace(small_cfg, max_steps=200, batch_size=3)
        tr = Trainer(cfg, small_samples).fit()
        assert smoothed(tr.history, at=200, window=10) < smoothed(tr.history, at=10, window=10)

    def test_resume_matches_uninterrupted(self, small_samples, small_cfg, tmp_path):
        full = Trainer(small_cfg, small_samples).fit()
        part = Trainer(replace(small_cfg, max_steps=2), small_samples).fit()
        part.save(tmp_path / "ck.pt")
        resumed = Trainer.resume(tmp_path / "ck.pt", small_samples)
        resumed.cfg = small_cfg
        resumed.fit()
        assert [h["total"] for h in resumed.history] == [h["total"] for h in full.history]
        assert params_equal(resumed.model, full.model)

    def test_deterministic_runs(self, small_samples, small_cfg):
        a = Trainer(small_cfg, small_samples).fit()
        b = Trainer(small_cfg, small_samples).fit()
        assert a.history == b.history and params_equal(a.model, b.model)

    def test_augmented_step_runs(self, small_samples, small_cfg):
        tr = Trainer(replace(small_cfg, augment=True, max_steps=2), small_samples).fit()
        assert len(tr.history) == 2

    def test_checkpoint_contents(self, small_samples, small_cfg, tmp_path):
        tr = Trainer(replace(small_cfg, max_steps=1), small_samples).fit(tmp_path)
        ck = load_checkpoint(tmp_path / "last.pt")
        assert {"format_version", "config", "params", "optimizer", "step", "epoch", "history"} <= set(ck)
        model, cfg = model_from_checkpoint(ck)
        assert params_equal(model, tr.model) and cfg == tr.cfg

    def test_bad_checkpoint_version(self, tmp_path):
        torch.save({"format_version": 99}, tmp_path / "x.pt")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "x.pt")

    def test_empty_training_set(self, small_cfg):
        with pytest.raises(ValueError):
            Trainer(small_cfg, [])

    def test_energy_weight_zero(self, small_samples, small_cfg):
        cfg = replace(small_cfg, weights=LossWeights(1, 1, 0))
        torch.manual_seed(0)
        model = GazeObjectNet(cfg.model)
        batch = make_batch(small_samples[:2], cfg.model, cfg.sigma)
        total, parts, _ = compute_losses(model, batch, cfg)
        assert total.item() == pytest.approx((parts["l_det"] + parts["l_gaze"]).item())


@pytest.mark.parametrize("override", [
    {"input_specific": False}, {"gaze_specific": False}, {"upsample": "interpolate"},
    {"share_backbone": False}, {"num_det_heads": 3},
])
def test_ablation_switch_trains(small_samples, small_cfg, override):
    cfg = replace(small_cfg, model=replace(small_cfg.model, **override), max_steps=1)
    rec = Trainer(cfg, small_samples).fit().history[0]
    assert np.isfinite(rec["total"])


def test_energy_ablation_trains(small_samples, small_cfg):
    cfg = replace(small_cfg, weights=LossWeights(1, 1, 0), max_steps=1)
    assert np.isfinite(Trainer(cfg, small_samples).fit().history[0]["total"])


class TestSharingContracts:
    def test_backbone_shared_after_step(self, small_samples, small_cfg):
        tr = Trainer(replace(small_cfg, max_steps=1), small_samples).fit()
        ext = tr.model.extractor
        seen = []
        handle = ext.backbone.register_forward_hook(lambda m, a, o: seen.append(
            [p.detach().clone() for p in m.parameters()]))
        batch = make_batch(small_samples[:1], tr.cfg.model, 3.0)
        with torch.no_grad():
            tr.model(batch.scene, batch.head, batch.mask)
        handle.remove()
        assert ext.head_backbone is None
        assert len(seen) == 2
        assert all(torch.equal(a, b) for a, b in zip(*seen))

    def test_mask_never_reaches_backbone(self, small_samples, small_cfg):
        torch.manual_seed(0)
        model = GazeObjectNet(small_cfg.model).eval()
        assert "mask" not in inspect.signature(model.extractor.forward).parameters
        inputs = []
        handle = model.extractor.backbone.register_forward_hook(
            lambda m, a, o: inputs.append(a[0].clone()))
        batch = make_batch(small_samples[:1], small_cfg.model, 3.0)
        other = torch.zeros_like(batch.mask)
        other[..., 10:30, 10:30] = 1.0
        with torch.no_grad():
            out_a = model(batch.scene, batch.head, batch.mask)
            out_b = model(batch.scene, batch.head, other)
        handle.remove()
        assert all(x.shape[1] == small_cfg.model.stem_channels for x in inputs)
        assert torch.equal(inputs[0], inputs[2]) and torch.equal(inputs[1], inputs[3])
        assert torch.equal(out_a["det"], out_b["det"])
        assert not torch.equal(out_a["heatmap"], out_b["heatmap"])

    def test_selector_and_loss_share_energy(self, monkeypatch):
        assert losses.box_mean_energy is geometry.box_mean_energy
        calls = []
        original = geometry.box_mean_energy

        def spy(*a, **k):
            calls.append(1)
            return original(*a, **k)

        monkeypatch.setattr(geometry, "box_mean_energy", spy)
        monkeypatch.setattr(losses, "box_mean_energy", spy)
        m = np.ones((8, 8))
        b = geometry.BoundingBox(0, 0, 32, 32)
        geometry.select_gaze_index(m, [b, b], (64, 64))
        losses.energy_aggregation_loss(m, b, (64, 64))
        assert len(calls) == 3
