"""Diffusion algebra, basis mixing and the conditional denoiser."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stpt import tensor as T
from stpt.factor_gen import (PTFG, AttributeConditioner, BasisGenerator, DiffusionConfig, cfg_combine, ddim_step,
                             ddim_timesteps, dft_mats, eps_from_v, mix_basis, q_sample, sample, spectral_loss,
                             time_embedding, train_ptfg, v_target, x0_from_v)
from stpt.verify import check_ptfg_identity, tiny_config


@pytest.fixture(scope="module")
def sched():
    return DiffusionConfig(t_train=100, sample_steps=5)


def test_schedule_is_quadratic_and_monotone(sched):
    b = sched.betas()
    assert b[0] == pytest.approx(1e-4) and b[-1] == pytest.approx(2e-2)
    assert np.all(np.diff(np.sqrt(b)) > 0)
    np.testing.assert_allclose(np.diff(np.sqrt(b)), np.diff(np.sqrt(b))[0], rtol=1e-9)
    assert sched.abar(-1) == 1.0
    with pytest.raises(IndexError):
        sched.abar(100)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 99), st.integers(0, 10_000))
def test_v_parameterisation_round_trip(t, seed):
    s = DiffusionConfig(t_train=100)
    rng = np.random.default_rng(seed)
    x0, eps = rng.standard_normal((2, 3, 8)), rng.standard_normal((2, 3, 8))
    tt = np.full(2, t)
    xt = q_sample(x0, tt, eps, s)
    v = v_target(x0, eps, tt, s)
    np.testing.assert_allclose(x0_from_v(xt, v, tt, s), x0, atol=1e-12)
    np.testing.assert_allclose(eps_from_v(xt, v, tt, s), eps, atol=1e-12)


def test_ddim_oracle_single_step_to_clean(sched):
    rng = np.random.default_rng(0)
    x0, eps = rng.standard_normal((2, 2, 8)), rng.standard_normal((2, 2, 8))
    t = 60
    xt = q_sample(x0, np.full(2, t), eps, sched)
    out = ddim_step(xt, v_target(x0, eps, np.full(2, t), sched), t, -1, sched)
    np.testing.assert_allclose(out, x0, atol=1e-10)
    with pytest.raises(IndexError):
        ddim_step(xt, xt, 5, 5, sched)


def test_ddim_timesteps_descending(sched):
    ts = ddim_timesteps(sched)
    assert ts[0] == 99 and ts[-1] == 0 and ts == sorted(ts, reverse=True)


def test_cfg_combine_values():
    np.testing.assert_allclose(cfg_combine(np.array([2.0]), np.array([1.0]), 1.5), [2.5])
    np.testing.assert_allclose(cfg_combine(np.array([2.0]), np.array([1.0]), 1.0), [2.0])
    with pytest.raises(ValueError):
        cfg_combine(np.zeros(2), np.zeros(3), 1.0)


def test_dft_matrices_match_numpy_fft():
    x = np.random.default_rng(1).standard_normal(12)
    C, S = dft_mats(12)
    np.testing.assert_allclose(x @ C + 1j * (x @ S), np.fft.rfft(x), atol=1e-12)


def test_spectral_loss_shift_invariant():
    x = np.random.default_rng(2).standard_normal((1, 2, 16))
    assert spectral_loss(x, np.roll(x, 3, axis=-1)).item() < 1e-20
    assert spectral_loss(x, 2 * x).item() > 0


def test_time_embedding_shape():
    e = time_embedding([0, 5], 7)
    assert e.shape == (2, 7) and np.all(e[0, :3] == 0) and np.all(e[0, 3:6] == 1)


def test_zero_heads_reproduce_base():
    rng = np.random.default_rng(3)
    gen = BasisGenerator((2, 3, 4), 5, 4, rng)
    U0 = T.Tensor(rng.standard_normal((2, 3, 4)))
    out = gen(U0, T.Tensor(rng.standard_normal((3, 5)))).data
    for b in range(3):
        assert np.array_equal(out[b], U0.data)


def test_mix_basis_by_hand():
    U0 = T.Tensor(np.ones((2, 2)))
    bases = np.array([[1.0, 0, 0, 0], [0, 0, 0, 1.0]])
    out = mix_basis(U0, bases, np.array([[2.0, 3.0]]), np.array([[1.0, 2.0]]), np.array([[1.0, 0.5]]), (2, 2)).data
    np.testing.assert_allclose(out[0], [[3.0, 0.5], [2.0, 4.0]])


def test_neutral_mix_identity_and_attribute_isolation():
    info = check_ptfg_identity()
    assert info["bit_identical"] and info["cross_grad_independent"] == 0.0
    assert info["cross_grad_cross_talk"] > 0.0


def test_attribute_conditioner_modes():
    rng = np.random.default_rng(4)
    ids = np.array([[0, 2], [1, 1]])
    ind = AttributeConditioner([2, 3], 4, rng)
    assert ind(ids).shape == (2, 8)
    np.testing.assert_array_equal(ind(ids).data[0, 4:], ind.tables[1].data[2])
    with pytest.raises(ValueError):
        AttributeConditioner([2], 4, rng, mode="full")


def test_train_and_sample_small():
    cfg = tiny_config().with_(pred_len=tiny_config().seq_len)
    dcfg = DiffusionConfig(t_train=50, sample_steps=4)
    model = PTFG(cfg, 3, dcfg, T.make_rng(0))
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((6, cfg.n_channels, cfg.seq_len))
    conds = rng.standard_normal((6, 3))
    losses = train_ptfg(model, x0, conds, steps=3, seed=0, batch=4)
    assert len(losses) == 3 and all(np.isfinite(losses))
    a = sample(model, conds[:2], cfg.n_channels, seed=9)
    b = sample(model, conds[:2], cfg.n_channels, seed=9)
    assert a.shape == (2, cfg.n_channels, cfg.seq_len) and np.array_equal(a, b)


def test_config_validation():
    with pytest.raises(ValueError):
        DiffusionConfig(beta_start=0.1, beta_end=0.01)
    with pytest.raises(ValueError):
        DiffusionConfig(t_train=10, sample_steps=20)
