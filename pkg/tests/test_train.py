"""RevIN, metrics, splitting and a short end-to-end training run."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stpt.data import SynthSpec, generate, prior_spec_for
from stpt.priors import PriorSpec
from stpt.train import (MetricReport, TrainConfig, build_model, eval_metrics, noise_sweep, revin_denormalize,
                        revin_normalize, run_variant, standardize_splits)

SMALL = dict(max_epochs=2, batch_size=8, seq_len=16, pred_len=8, patch_len=4, d_model=8, d_ff=16, n_heads=2,
             n_iters=1)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 3, 10), elements=st.floats(-100, 100, allow_nan=False)))
def test_revin_round_trip(x):
    xn, state = revin_normalize(x)
    np.testing.assert_allclose(revin_denormalize(xn, state), x, atol=1e-8)


def test_revin_constant_channel_is_safe():
    x = np.ones((1, 1, 5))
    xn, state = revin_normalize(x)
    assert np.all(xn == 0) and np.all(np.isfinite(xn))


def test_metrics_hand_values():
    r = eval_metrics(np.array([1.0, 2.0]), np.array([0.0, 4.0]))
    assert r.mse == 2.5 and r.mae == 1.5
    with pytest.raises(ValueError):
        eval_metrics(np.zeros(2), np.zeros(3))
    agg = MetricReport.aggregate({1: MetricReport(1.0, 0.5), 2: MetricReport(3.0, 1.5)})
    assert agg.mse == 2.0 and agg.mse_std == 1.0 and agg.per_seed[2] == (3.0, 1.5)


def test_standardize_uses_train_split():
    ds = generate(SynthSpec("trend", 40))
    std_ds, mean, std = standardize_splits(ds)
    tr = std_ds.split("train")
    np.testing.assert_allclose(tr.mean(axis=(0, 2)), 0.0, atol=1e-12)
    np.testing.assert_allclose(tr.std(axis=(0, 2)), 1.0, atol=1e-12)


def test_variants_share_cornerstone_init():
    cfg = TrainConfig(**SMALL)
    ps = PriorSpec.from_dict(prior_spec_for("lag"))
    a = build_model("vanilla", 6, cfg, 42).bank.state_dict()
    b = build_model("lag", 6, cfg, 42, ps).bank.state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    with pytest.raises(ValueError):
        build_model("lag", 6, cfg, 42)
    with pytest.raises(ValueError):
        build_model("bogus", 6, cfg, 42)


def test_short_training_run_is_reproducible():
    ds = generate(SynthSpec("lag", 40, seq_len=16, pred_len=8))
    cfg = TrainConfig(**SMALL)
    r1 = run_variant(ds, "vanilla", cfg, 42)
    r2 = run_variant(ds, "vanilla", cfg, 42)
    assert r1.report.mse == r2.report.mse
    assert np.isfinite(r1.report.mse) and len(r1.history) == 2
    assert r1.best_val == min(h["val_mse"] for h in r1.history)


def test_noise_sweep_rows():
    ds = generate(SynthSpec("trend", 30, seq_len=16, pred_len=8))
    cfg = TrainConfig(**{**SMALL, "max_epochs": 1})
    rows = noise_sweep(ds, "trend", [0.0, 0.5], cfg, PriorSpec.from_dict(prior_spec_for("trend")), seeds=(1,))
    assert [r["sigma"] for r in rows] == [0.0, 0.5]
    for r in rows:
        assert r["delta"] == pytest.approx(r["mse_vanilla"] - r["mse_prior"])


def test_batch_larger_than_train_split_rejected():
    ds = generate(SynthSpec("lag", 10, seq_len=16, pred_len=8))
    with pytest.raises(ValueError):
        run_variant(ds, "vanilla", TrainConfig(**{**SMALL, "batch_size": 64}), 0)
