"""Latent autoregression: causality, cache integrity and distillation."""

import numpy as np
import pytest

from stpt import tensor as T
from stpt.graph import patchify
from stpt.latent_ar import (ARConfig, EmptyCacheError, LatentAR, LatentCache, causal_encoder, distill,
                            dump_trace, rollout, single_step_mfvi, teacher_latents, training_step)
from stpt.verify import check_causality, tiny_config


@pytest.fixture
def model():
    return LatentAR(tiny_config(), ARConfig(n_future=3), T.make_rng(0))


def test_causal_encoder_ignores_future(model):
    cfg = model.cfg
    x = np.random.default_rng(1).standard_normal((2, cfg.n_channels, cfg.seq_len))
    base = causal_encoder(patchify(x, cfg.patch_len), model).tensor().data
    x2 = x.copy()
    x2[..., -cfg.patch_len:] += 5.0
    moved = causal_encoder(patchify(x2, cfg.patch_len), model).tensor().data
    np.testing.assert_array_equal(base[:, :, :-1], moved[:, :, :-1])
    assert not np.array_equal(base[:, :, -1], moved[:, :, -1])


def test_causality_check_passes():
    info = check_causality()
    assert info["max_leak"] <= 1e-12 and info["teacher_student_gap"] <= 1e-12


def test_rollout_shapes_and_trace(model, tmp_path):
    cfg = model.cfg
    x = np.random.default_rng(2).standard_normal((2, cfg.n_channels, cfg.seq_len))
    ro = rollout(x, model, pred_len=10)
    assert ro.y_hat.shape == (2, cfg.n_channels, 10)
    assert len(ro.cache) == cfg.n_patches + 3 and len(ro.traces) == 3
    for tr in ro.traces:
        assert tr["mass_temporal"] + tr["mass_channel"] == pytest.approx(1.0)
    dump_trace(ro.traces, tmp_path / "t.jsonl")
    assert len((tmp_path / "t.jsonl").read_text().splitlines()) == 3
    with pytest.raises(ValueError):
        rollout(x, model, pred_len=100)


def test_rollout_leaves_given_cache_alone(model):
    cfg = model.cfg
    x = np.random.default_rng(3).standard_normal((1, cfg.n_channels, cfg.seq_len))
    cache = causal_encoder(patchify(x, cfg.patch_len), model)
    snap = [s.data.copy() for s in cache.slices]
    rollout(x, model, cache=cache)
    assert len(cache) == len(snap)
    assert all(np.array_equal(a, s.data) for a, s in zip(snap, cache.slices))


def test_single_step_needs_cache(model):
    with pytest.raises(EmptyCacheError):
        single_step_mfvi(T.zeros((1, 2, 1, model.cfg.d_model)), LatentCache([], 0), model)


def test_teacher_history_matches_student(model):
    cfg = model.cfg
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, cfg.n_channels, cfg.seq_len))
    y = rng.standard_normal((2, cfg.n_channels, 10))
    teacher = teacher_latents(x, y, model).data
    student = causal_encoder(patchify(x, cfg.patch_len), model).tensor().data
    assert teacher.shape[2] == cfg.n_patches + 3  # padded to whole patches
    np.testing.assert_allclose(teacher[:, :, :cfg.n_patches], student, atol=1e-12)


def test_training_step_losses(model):
    cfg = model.cfg
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, cfg.n_channels, cfg.seq_len))
    y = rng.standard_normal((2, cfg.n_channels, 3 * cfg.patch_len))
    out = training_step(x, y, model, lambda_latent=0.5)
    assert out.total.item() == pytest.approx(out.mse.item() + 0.5 * out.distill.item())
    assert not out.teacher.requires_grad
    out.total.backward()
    assert model.alpha_ar_logit.grad is not None and np.all(np.isfinite(model.pred_head.weight.grad))


@pytest.mark.parametrize("kind", ["smooth_l1", "smooth_l1_plus_cosine", "kl_under_squared_softmax"])
def test_distill_is_zero_on_identical_inputs(kind):
    rng = np.random.default_rng(6)
    z = rng.random((2, 3, 4))
    z /= z.sum(-1, keepdims=True)
    assert abs(distill(T.Tensor(z), T.Tensor(z), kind).item()) < 1e-10
    assert distill(T.Tensor(z), T.Tensor(z[..., ::-1].copy()), kind).item() > 0


def test_ar_config_validation():
    with pytest.raises(ValueError):
        ARConfig(n_future=0)
    with pytest.raises(ValueError):
        ARConfig(distill_loss="l2")
