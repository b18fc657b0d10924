from dataclasses import replace

import numpy as np
import pytest
import torch

from helpers import fd_check, grad_setup, small_vocab, two_object_record
from topicsg.captioner import Captioner
from topicsg.checkpoint import params_digest
from topicsg.core import EOS_IDX, TrainingScene
from topicsg.features import ConfigError, ModelConfig, scene_features, synth_features
from topicsg.synth import GenConfig, generate_split
from topicsg.trainer import (
    TrainConfig, TrainingError, make_head, mixed_ce_loss, prepare_distillation, stage2_kl, train_stage1,
    train_stage2, train_stage2_label,
)

SMOKE_MODEL = ModelConfig(d_v=16, d_l=12, d_h=16, d_a=8, d_e=8, d_u=16, d_s=8, d_sem=4, d_tr=16, heads=2,
                          enc_layers=1, dec_layers=1)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lam=-0.1)
    with pytest.raises(ConfigError):
        TrainConfig(epochs_stage1=0)
    with pytest.raises(ConfigError):
        TrainConfig(pooling="min")


def test_lambda_zero_is_image_ce():
    _, _, scene, fs, model = grad_setup()
    loss, img, rel = mixed_ce_loss(model, scene, fs, 0.0, parts=True)
    assert loss.item() == img.item()
    assert rel.item() > 0


def test_loss_decomposition():
    _, _, scene, fs, model = grad_setup()
    loss, img, rel = mixed_ce_loss(model, scene, fs, 0.7, parts=True)
    assert loss.item() == pytest.approx(img.item() + 0.7 * rel.item(), abs=1e-12)


def test_certain_model_has_zero_loss():
    vocab = small_vocab()
    cfg = ModelConfig(**{**SMOKE_MODEL.to_dict(), "d_l": 4})
    rec = two_object_record(vocab)
    scene = TrainingScene("eos", rec.objects, (), (EOS_IDX,))
    model = Captioner(cfg, len(vocab)).double()
    with torch.no_grad():
        model.decoder.out.weight.zero_()
        model.decoder.out.bias.fill_(-1e3)
        model.decoder.out.bias[EOS_IDX] = 0.0
    assert mixed_ce_loss(model, scene, synth_features(rec, cfg), 0.7).item() == 0.0


@pytest.mark.parametrize("backbone", ["updown", "transformer"])
def test_relational_gradient_linear_in_lambda(backbone):
    _, _, scene, fs, model = grad_setup(backbone)

    def grads(lam):
        model.zero_grad()
        mixed_ce_loss(model, scene, fs, lam).backward()
        return {n: p.grad.clone() for n, p in model.named_parameters() if n.startswith(("union.", "geometry."))}

    g0, g1, g2 = grads(0.0), grads(0.7), grads(1.4)
    assert g0 and all(torch.all(v == 0) for v in g0.values())
    for n in g1:
        np.testing.assert_allclose(g2[n].numpy(), 2 * g1[n].numpy(), atol=1e-6)


@pytest.mark.parametrize("backbone", ["updown", "transformer"])
def test_mixed_ce_gradients_match_finite_differences(backbone):
    _, _, scene, fs, model = grad_setup(backbone)
    errors = fd_check(model, lambda: mixed_ce_loss(model, scene, fs, 0.7), h=1e-4, max_entries=30)
    assert len(errors) == len(list(model.parameters()))
    bad = {n: e for n, e in errors.items() if e >= 1e-3}
    assert not bad, bad


@pytest.mark.parametrize("features", ["SOUS", "SO"])
def test_stage2_kl_gradients_match_finite_differences(features):
    vocab, _, scene, fs, model = grad_setup()
    cfg = TrainConfig(feature_mode=features)
    ex = prepare_distillation([scene], [fs], model, vocab, cfg)[0]
    head = make_head(model, len(vocab), cfg)
    with torch.no_grad():
        for p in head.parameters():
            p.add_(torch.randn_like(p) * 0.3)
    errors = fd_check(head, lambda: stage2_kl(head, ex), h=1e-4)
    bad = {n: e for n, e in errors.items() if e >= 1e-3}
    assert not bad, bad


@pytest.fixture(scope="module")
def smoke():
    cfg = GenConfig(num_scenes=10, n_min=4, n_max=6, seed=3)
    recs = generate_split(cfg, "train")
    return cfg.vocab.vocabulary(), recs, scene_features(recs, SMOKE_MODEL)


@pytest.fixture(scope="module")
def smoke_captioner(smoke):
    vocab, recs, feats = smoke
    return train_stage1(recs, feats, len(vocab), SMOKE_MODEL, TrainConfig(epochs_stage1=15))


def test_stage1_smoke_monotone(smoke_captioner):
    _, report = smoke_captioner
    combined = [e["combined"] for e in report.epochs]
    for prev, cur in zip(combined[1:], combined[2:]):
        assert cur <= prev + 1e-3
    for e in report.epochs:
        assert e["combined"] == pytest.approx(e["image_ce"] + 0.7 * e["relational_ce"], rel=1e-6)  # float32 losses
        assert all(np.isfinite(v) and v >= 0 for k, v in e.items() if k != "epoch")


def test_stage1_deterministic(smoke, smoke_captioner):
    vocab, recs, feats = smoke
    again, _ = train_stage1(recs, feats, len(vocab), SMOKE_MODEL, TrainConfig(epochs_stage1=15))
    assert params_digest(again) == params_digest(smoke_captioner[0])


def test_stage1_reports_nan(smoke):
    vocab, recs, feats = smoke
    bad = [replace(f, visual=f.visual * np.nan) for f in feats[:2]]
    with pytest.raises(TrainingError, match="stage1: non-finite loss at epoch 1 step 0"):
        train_stage1(recs[:2], bad, len(vocab), SMOKE_MODEL, TrainConfig(epochs_stage1=1))


def test_stage1_empty():
    with pytest.raises(TrainingError):
        train_stage1([], [], 10, SMOKE_MODEL, TrainConfig())


def test_stage2_halves_kl_and_freezes_captioner(smoke, smoke_captioner):
    vocab, recs, feats = smoke
    model, _ = smoke_captioner
    before = params_digest(model)
    head, report = train_stage2(recs, feats, model, vocab, TrainConfig(epochs_stage2=30))
    assert params_digest(model) == before
    kls = [e["kl"] for e in report.epochs]
    assert kls[-1] <= 0.5 * kls[0]
    assert all(p.requires_grad for p in model.parameters())


def test_stage2_deterministic(smoke, smoke_captioner):
    vocab, recs, feats = smoke
    a, _ = train_stage2(recs, feats, smoke_captioner[0], vocab, TrainConfig(epochs_stage2=3))
    b, _ = train_stage2(recs, feats, smoke_captioner[0], vocab, TrainConfig(epochs_stage2=3))
    assert params_digest(a) == params_digest(b)


def test_training_accepts_flag_free_scenes(smoke, smoke_captioner):
    vocab, recs, feats = smoke
    scenes = [r.for_training() for r in recs]
    assert not any(hasattr(s, "important_flags") for s in scenes)
    train_stage1(scenes[:3], feats[:3], len(vocab), SMOKE_MODEL, TrainConfig(epochs_stage1=1))
    for pooling, masking in [("max", False), ("mean", False), ("max", True)]:
        train_stage2(scenes, feats, smoke_captioner[0], vocab,
                     TrainConfig(epochs_stage2=1, pooling=pooling, mask_non_nouns=masking))


def test_label_mode(smoke, smoke_captioner):
    vocab, recs, feats = smoke
    before = params_digest(smoke_captioner[0])
    head, report = train_stage2_label(recs, feats, smoke_captioner[0], vocab, TrainConfig(epochs_stage2=5))
    assert params_digest(smoke_captioner[0]) == before
    assert len(report.epochs) == 5


def test_label_mode_degenerate(smoke, smoke_captioner):
    vocab, recs, feats = smoke
    flat = [replace(r, important_flags=tuple(False for _ in r.relations)) for r in recs]
    with pytest.raises(TrainingError, match="degenerate supervision"):
        train_stage2_label(flat, feats, smoke_captioner[0], vocab, TrainConfig())
