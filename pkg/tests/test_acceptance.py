"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line
that is printed again in the terminal summary."""

import time

import numpy as np
import pytest

from stpt.data import SynthSpec, add_noise, generate, prior_spec_for
from stpt.priors import PriorSpec
from stpt.train import SEEDS, TrainConfig, run_variant
from stpt.verify import CHECKS


def _timed(name):
    t0 = time.perf_counter()
    try:
        info, err = CHECKS[name](), None
    except AssertionError as e:
        info, err = {}, str(e)
    return info, err, time.perf_counter() - t0


def _battery(record, num, name, budget, describe):
    info, err, secs = _timed(name)
    ok = err is None and secs < budget
    line = (describe(info) if err is None else err) + f" ({secs:.2f}s, budget {budget:g}s)"
    record(num, ok, line)
    assert err is None, err
    assert secs < budget, f"{name} took {secs:.2f}s"


def test_criterion_01_lowrank_equivalence(record):
    _battery(record, 1, "lowrank_equivalence", 1.0,
             lambda i: f"max rel err {i['max_rel_err']:.2e} < 1e-12")


def test_criterion_02_joint_softmax(record):
    _battery(record, 2, "joint_softmax", 10.0,
             lambda i: f"max row-sum err {i['max_sum_err']:.2e} over 1000 instances")


def test_criterion_03_damping_fixed_point(record):
    _battery(record, 3, "damping_fixed_point", 1.0,
             lambda i: "alpha=0 drift " + ", ".join(f"{k}={v:.1e}" for k, v in i.items()))


def test_criterion_04_causality(record):
    _battery(record, 4, "causality", 5.0,
             lambda i: f"future leak {i['max_leak']:.1e}, teacher/student gap {i['teacher_student_gap']:.1e}")


def test_criterion_05_gradients(record):
    _battery(record, 5, "gradients", 120.0,
             lambda i: "FD rel err " + ", ".join(f"{k}={v:.1e}" for k, v in i.items()) + " < 1e-4")


def test_criterion_06_prior_mechanics(record):
    _battery(record, 6, "prior_mechanics", 10.0, lambda i: f"trend L1 err {i['trend_l1_err']:.1e}")


def test_criterion_07_dataset_oracles(record):
    _battery(record, 7, "dataset_oracles", 30.0,
             lambda i: f"lag argmax 8, FFT bins ok, trend residual std {i['trend_residual_std']:.4f}")


def test_criterion_11_ptfg_identity(record):
    _battery(record, 11, "ptfg_identity", 10.0,
             lambda i: f"bit identical={i['bit_identical']}, independent cross grad {i['cross_grad_independent']:.1e}")


def test_criterion_12_ddim_roundtrip(record):
    _battery(record, 12, "ddim_roundtrip", 1.0,
             lambda i: f"ddim err {i['ddim_err']:.1e}, v round trip {i['v_roundtrip_err']:.1e}")


def test_criterion_13_ar_determinism(record):
    _battery(record, 13, "ar_determinism", 5.0,
             lambda i: f"bit identical={i['bit_identical']}, cache intact={i['cache_intact']}")


# ---------------------------------------------------------------------------
# training studies


@pytest.fixture(scope="module")
def lag_runs():
    ds = generate(SynthSpec("lag", 150, seed=42))
    ps = PriorSpec.from_dict(prior_spec_for("lag"))
    cfg = TrainConfig()
    t0 = time.perf_counter()
    mse = {v: [run_variant(ds, v, cfg, s, ps).report.mse for s in SEEDS] for v in ("vanilla", "lag", "indep")}
    return {v: float(np.mean(m)) for v, m in mse.items()}, time.perf_counter() - t0


def test_criterion_08_lag_prior_helps(record, lag_runs):
    mse, secs = lag_runs
    gain = (mse["vanilla"] - mse["lag"]) / mse["vanilla"]
    ok = mse["lag"] < mse["vanilla"] and gain >= 0.05 and secs < 1200
    record(8, ok, f"vanilla {mse['vanilla']:.4f}, lag {mse['lag']:.4f}, gain {gain:.1%} >= 5% ({secs:.0f}s)")
    assert ok


def test_criterion_09_indep_null_effect(record, lag_runs):
    mse, _ = lag_runs
    rel = abs(mse["indep"] - mse["vanilla"]) / mse["vanilla"]
    record(9, rel <= 0.05, f"vanilla {mse['vanilla']:.4f}, indep {mse['indep']:.4f}, |rel diff| {rel:.1%} <= 5%")
    assert rel <= 0.05


def test_criterion_10_trend_noise_sign_pattern(record):
    ds = generate(SynthSpec("trend", 150, seed=42))
    ps = PriorSpec.from_dict(prior_spec_for("trend"))
    cfg = TrainConfig()
    t0 = time.perf_counter()
    delta = {}
    for sigma in (0.1, 0.8):
        noisy = add_noise(ds, sigma, 0)
        van = np.mean([run_variant(noisy, "vanilla", cfg, s).report.mse for s in SEEDS])
        pri = np.mean([run_variant(noisy, "trend", cfg, s, ps).report.mse for s in SEEDS])
        delta[sigma] = float(van - pri)
    secs = time.perf_counter() - t0
    ok = delta[0.8] > delta[0.1] > 0 and secs < 1800
    record(10, ok, f"delta(0.1) {delta[0.1]:+.4f}, delta(0.8) {delta[0.8]:+.4f} ({secs:.0f}s)")
    assert ok
