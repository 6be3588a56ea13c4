"""Synthetic generators checked against independent signal-processing oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stpt.data import (LAG_TAU, PERIODS, SeriesDataset, SynthSpec, add_noise, export_csv, generate,
                       history_r2, load_csv_series, load_dataset, prior_spec_for, save_dataset,
                       split_indices)


def xcorr_argmax(src, dst, max_lag=16):
    # |Pearson r| so negative affine gains still peak at the true lag
    scores = []
    for k in range(max_lag + 1):
        a, b = src[: len(src) - k], dst[k:]
        a, b = a - a.mean(), b - b.mean()
        scores.append(abs(a @ b) / np.sqrt((a @ a) * (b @ b)))
    return int(np.argmax(scores))


@pytest.fixture(scope="module")
def lag_clean():
    return generate(SynthSpec("lag", 100, base_noise=0.0))


def test_lag_pairs_peak_at_tau(lag_clean):
    for src, dst in [(0, 1), (2, 3), (4, 5)]:
        lags = [xcorr_argmax(x[src], x[dst]) for x in lag_clean.samples]
        assert all(k == LAG_TAU for k in lags), (src, dst, set(lags))


def test_lag_affine_channel_exact(lag_clean):
    x, meta = lag_clean.samples, lag_clean.metadata
    for i in range(5):
        np.testing.assert_allclose(x[i, 5, LAG_TAU:], meta["affine_m"][i] * x[i, 4, :-LAG_TAU] + meta["affine_b"][i],
                                   atol=1e-12)


def test_periodicity_fft_peaks():
    ds = generate(SynthSpec("periodicity", 20, base_noise=0.0))
    L = ds.length
    for ch in range(5):
        spec = np.abs(np.fft.rfft(ds.samples[:, ch], axis=-1)).mean(0)
        top = set(np.argsort(spec)[::-1][: len(PERIODS[ch])].tolist())
        expected = {round(L / p) for p in PERIODS[ch]}
        assert top == expected, (ch, top, expected)


def test_trend_residual_std_is_noise_floor():
    clean = generate(SynthSpec("trend", 50, base_noise=0.0))
    noisy = generate(SynthSpec("trend", 50))
    assert (noisy.samples - clean.samples).std() == pytest.approx(0.1, rel=0.1)


def test_masked_quadratic_history_is_near_linear():
    ds = generate(SynthSpec("trend", 20, base_noise=0.0))
    assert min(history_r2(x[6, :96]) for x in ds.samples) > 0.99
    assert np.abs(ds.samples).max() <= 5.0


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 2000))
def test_split_sizes(n):
    sp = split_indices(n)
    assert len(sp["val"]) == n * 10 // 100 and len(sp["test"]) == n * 20 // 100
    assert np.array_equal(np.concatenate([sp["train"], sp["val"], sp["test"]]), np.arange(n))


def test_samples_do_not_depend_on_dataset_size():
    small = generate(SynthSpec("lag", 5))
    big = generate(SynthSpec("lag", 12))
    assert np.array_equal(small.samples, big.samples[:5])


def test_generation_is_deterministic_and_seed_sensitive():
    a = generate(SynthSpec("periodicity", 4, seed=1)).samples
    b = generate(SynthSpec("periodicity", 4, seed=1)).samples
    c = generate(SynthSpec("periodicity", 4, seed=2)).samples
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_add_noise_scale_and_zero():
    ds = generate(SynthSpec("trend", 60))
    assert np.array_equal(add_noise(ds, 0.0, 0).samples, ds.samples)
    noisy = add_noise(ds, 0.5, 0)
    eps = noisy.samples - ds.samples
    ratio = eps.std(axis=(0, 2)) / ds.samples.std(axis=(0, 2))
    np.testing.assert_allclose(ratio, 0.5, rtol=0.05)
    assert np.array_equal(add_noise(ds, 0.5, 0).samples, noisy.samples)
    with pytest.raises(ValueError):
        add_noise(ds, -1.0, 0)


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec("weather")
    with pytest.raises(ValueError):
        SynthSpec("lag", n_samples=0)


def test_prior_spec_for_tasks():
    assert prior_spec_for("lag")["lag"][0] == [0, 1, LAG_TAU]
    assert len(prior_spec_for("periodicity")["periods"]) == 10
    with pytest.raises(ValueError):
        prior_spec_for("x")


def test_dataset_file_round_trip(tmp_path):
    ds = generate(SynthSpec("lag", 10))
    man = save_dataset(ds, tmp_path)
    back = load_dataset(man)
    assert np.array_equal(back.samples, ds.samples)
    assert back.channel_names == ds.channel_names
    assert np.array_equal(back.splits["test"], ds.splits["test"])
    raw = bytearray(man.with_suffix(".bin").read_bytes())
    raw[0] ^= 1
    man.with_suffix(".bin").write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="checksum"):
        load_dataset(man)


def test_csv_export_and_window_loader(tmp_path):
    ds = generate(SynthSpec("lag", 2, seq_len=8, pred_len=8))
    export_csv(ds, tmp_path / "long.csv")
    lines = (tmp_path / "long.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 * 16
    wide = tmp_path / "wide.csv"
    wide.write_text("date,a,b\n" + "\n".join(f"d{k},{k},{2 * k}" for k in range(30)))
    w = load_csv_series(wide, 8, 4)
    assert w.samples.shape == (19, 2, 12) and w.channel_names == ["a", "b"]
    assert np.array_equal(w.samples[3, 1], 2.0 * np.arange(3, 15))
    with pytest.raises(ValueError):
        load_csv_series(wide, 20, 20)


def test_replace_samples_keeps_layout():
    ds = generate(SynthSpec("lag", 10))
    new = ds.replace_samples(ds.samples * 0)
    assert isinstance(new, SeriesDataset) and new.split("train").shape == ds.split("train").shape
