import math

import numpy as np
import pytest
import torch

from crossvideo.config import TrainConfig
from crossvideo.errors import CheckpointError, ValidationError
from crossvideo.evaluation import evaluate
from crossvideo.model import load_checkpoint
from crossvideo.train import (
    contrastive_loss,
    finetune_segmentation,
    load_segmentation_model,
    load_train_state,
    lr_schedule,
    pretrain,
    save_segmentation_model,
    subsample_split,
)

from helpers import small_config


def test_lr_schedule_examples():
    cfg = TrainConfig()
    assert lr_schedule(0, 10, cfg) == 0.0
    assert lr_schedule(50, 10, cfg) == 0.01
    assert lr_schedule(25, 10, cfg) == pytest.approx(0.005, abs=1e-15)
    assert lr_schedule(10_000, 10, cfg) == 0.01
    lrs = [lr_schedule(s, 10, cfg) for s in range(60)]
    assert all(b >= a for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValidationError):
        lr_schedule(-1, 10, cfg)
    cfg.warmup_epochs = 0
    assert lr_schedule(0, 10, cfg) == 0.01


def test_pretrain_smoke_one_epoch(tiny):
    cfg = small_config(total_epochs=1, warmup_epochs=0, batch_size=8)
    res = pretrain(tiny["pretrain"][:8], cfg)
    assert len(res.loss_curve) == 1 and math.isfinite(res.loss_curve[0])
    assert res.state.step == 1


def test_all_toggles_off_rejected(tiny):
    cfg = small_config()
    cfg.loss_toggles = {t: False for t in cfg.loss_toggles}
    with pytest.raises(ValidationError):
        pretrain(tiny["pretrain"], cfg)


def test_pretrain_rejects_bad_inputs(tiny):
    with pytest.raises(ValidationError):
        pretrain([], small_config())
    with pytest.raises(ValidationError):
        pretrain(tiny["pretrain"][:3], small_config())


def test_pretrain_is_deterministic(tiny):
    a = pretrain(tiny["pretrain"], small_config())
    b = pretrain(tiny["pretrain"], small_config())
    np.testing.assert_allclose(a.state.step_losses, b.state.step_losses, atol=1e-6, rtol=0)
    assert len(a.state.step_losses) == 2 * 4


def test_resume_matches_uninterrupted(tiny, tmp_path):
    cfg = small_config(total_epochs=3)
    full = pretrain(tiny["pretrain"], cfg)
    pretrain(tiny["pretrain"], cfg, out_dir=tmp_path, stop_after_epoch=1)
    assert load_train_state(tmp_path / "state.ckpt").epoch == 1
    resumed = pretrain(tiny["pretrain"], cfg, out_dir=tmp_path, resume_from=tmp_path / "state.ckpt")
    np.testing.assert_allclose(resumed.state.step_losses, full.state.step_losses, atol=1e-6, rtol=0)
    for (name, p), (_, q) in zip(full.model.named_parameters(), resumed.model.named_parameters()):
        assert (p - q).abs().max().item() <= 1e-6, name
    assert load_checkpoint(tmp_path / "model.ckpt").meta["epoch"] == 3


def test_train_state_rejects_model_checkpoint(tiny, tmp_path):
    pretrain(tiny["pretrain"], small_config(total_epochs=1, warmup_epochs=0), out_dir=tmp_path)
    with pytest.raises(CheckpointError):
        load_train_state(tmp_path / "model.ckpt")


def test_disabled_term_sends_no_gradient():
    g = torch.Generator().manual_seed(0)
    shapes = [(4, 6), (4, 6), (4, 3, 6), (4, 3, 6), (4, 6), (4, 3, 6)]
    tensors = [torch.randn(*s, generator=g, dtype=torch.float64, requires_grad=True) for s in shapes]
    mask = torch.ones(4, 3, dtype=torch.bool)
    toggles = {"intra_video": True, "intra_frame": True, "cross_video": False, "cross_frame": False}
    loss, _ = contrastive_loss(*tensors, mask, 0.07, toggles)
    loss.backward()
    assert not tensors[4].grad.any() and not tensors[5].grad.any()
    assert tensors[0].grad.abs().sum() > 0


@pytest.fixture(scope="module")
def pretrained(tiny):
    return pretrain(tiny["pretrain"], small_config()).model


def test_linear_probe_freezes_encoder(tiny, pretrained):
    before = {k: v.clone() for k, v in pretrained.point_encoder.state_dict().items()}
    seg = finetune_segmentation(tiny["train"], pretrained, small_config(), mode="linear_probe")
    for k, v in seg.encoder.state_dict().items():
        assert torch.equal(v, before[k]), k
    for k, v in pretrained.point_encoder.state_dict().items():
        assert torch.equal(v, before[k]), k
    assert all(not p.requires_grad for p in seg.encoder.parameters())


def test_full_finetune_updates_encoder(tiny, pretrained):
    seg = finetune_segmentation(tiny["train"], pretrained, small_config(), mode="full")
    changed = [not torch.equal(a, b) for a, b in zip(seg.encoder.parameters(), pretrained.point_encoder.parameters())]
    assert any(changed)


def test_scratch_zero_epochs_is_random_init(tiny, pretrained):
    cfg = small_config()
    cfg.finetune.epochs = 0
    a = finetune_segmentation(tiny["train"], pretrained, cfg, mode="scratch")
    b = finetune_segmentation(tiny["train"], None, cfg, mode="scratch")
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)
    pred = a.predict(tiny["test"][0])
    assert pred.shape == (len(tiny["test"][0].points),)


def test_checkpoint_path_and_mode_alias(tiny, pretrained, tmp_path):
    from crossvideo.model import save_checkpoint

    save_checkpoint(pretrained, tmp_path / "m.ckpt")
    a = finetune_segmentation(tiny["train"], tmp_path / "m.ckpt", small_config(), mode="linear")
    b = finetune_segmentation(tiny["train"], pretrained, small_config(), mode="linear_probe")
    for s in tiny["test"]:
        np.testing.assert_array_equal(a.predict(s), b.predict(s))


def test_finetune_errors(tiny):
    cfg = small_config()
    with pytest.raises(ValidationError):
        finetune_segmentation(tiny["train"], None, cfg, mode="full")
    with pytest.raises(ValidationError):
        finetune_segmentation(tiny["train"], None, cfg, mode="bogus")
    with pytest.raises(ValidationError):
        finetune_segmentation([], None, cfg, mode="scratch")
    cfg.finetune.num_classes = 2  # the fixture data uses labels 0..3
    with pytest.raises(ValidationError):
        finetune_segmentation(tiny["train"], None, cfg, mode="scratch")


def test_semantic_task(tiny):
    cfg = small_config()
    cfg.finetune.epochs = 1
    seg = finetune_segmentation(tiny["train"], None, cfg, mode="scratch", task="semantic")
    s = tiny["test"][0]
    assert seg.predict(s).shape == s.points.frames.shape[:2]


def test_segmentation_checkpoint_round_trip(tiny, pretrained, tmp_path):
    seg = finetune_segmentation(tiny["train"], pretrained, small_config(), mode="linear_probe")
    save_segmentation_model(seg, tmp_path / "seg.ckpt")
    back = load_segmentation_model(tmp_path / "seg.ckpt")
    for s in tiny["test"]:
        np.testing.assert_array_equal(seg.predict(s), back.predict(s))
    with pytest.raises(CheckpointError):
        from crossvideo.model import save_checkpoint

        save_checkpoint(pretrained, tmp_path / "m.ckpt")
        load_segmentation_model(tmp_path / "m.ckpt")


def test_full_finetune_fits_64_sequences(tmp_path):
    from crossvideo.datagen import generate_dataset, load_dataset

    generate_dataset(tmp_path, {"train": 64}, frames=8, points=128, seed=0, layout_seed=0)
    train = load_dataset(tmp_path, "train")
    cfg = TrainConfig()
    assert cfg.finetune.epochs == 50
    # the default SGD settings reach only about 64% here; Adam fits the set
    cfg.finetune.optimizer, cfg.finetune.learning_rate = "adam", 1e-3
    seg = finetune_segmentation(train, None, cfg, mode="scratch")
    assert evaluate(seg, train).accuracy >= 90.0


def test_subsample_split_examples():
    data = [f"s{i}" for i in range(20)]
    assert subsample_split(data, 1.0, 3) == data
    assert len(subsample_split(data, 0.1, 3)) == 2
    assert subsample_split(data, 0.35, 7) == subsample_split(data, 0.35, 7)
    a, b = set(subsample_split(data, 0.5, 0)), set(subsample_split(data, 0.5, 1))
    assert a != b
    assert a.isdisjoint(set(data) - a) and len(a) == 10
    assert set(subsample_split(data, 0.1, 4)) <= set(subsample_split(data, 0.4, 4))
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(ValidationError):
            subsample_split(data, bad, 0)


def test_default_pretrain_loss_trends_down(tmp_path):
    from crossvideo.datagen import generate_dataset, load_dataset
    generate_dataset(tmp_path, {"pretrain": 64}, frames=8, points=128, seed=0, layout_seed=0)
    res = pretrain(load_dataset(tmp_path, "pretrain"), TrainConfig())
    curve = res.loss_curve
    assert len(curve) == 30
    assert np.mean(curve[-5:]) < np.mean(curve[:5])
