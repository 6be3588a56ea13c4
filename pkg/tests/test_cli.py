"""Command-line frontend: exit codes, outputs, resume and fault injection."""

import csv
import json

import pytest

from stpt.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main

TINY_TRAIN = {"max_epochs": 1, "batch_size": 8, "d_model": 8, "d_ff": 16, "n_heads": 2, "n_iters": 1,
              "patch_len": 8}


def write_cfg(tmp_path, **kw):
    cfg = {"task": "lag", "n_samples": 20, "seeds": [1], "output_dir": str(tmp_path / "runs"),
           "train": TINY_TRAIN, **kw}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_gen_data_writes_files(tmp_path, capsys):
    assert main(["gen-data", "--config", str(write_cfg(tmp_path))]) == EXIT_OK
    files = {p.name for p in (tmp_path / "runs" / "data").rglob("*")}
    assert {"dataset.json", "dataset.bin", "dataset.csv"} <= files
    assert "sha256=" in capsys.readouterr().out


def test_run_resume_and_force(tmp_path):
    cfg = write_cfg(tmp_path, variants=["vanilla", "lag"])
    assert main(["run", "--config", str(cfg)]) == EXIT_OK
    (results,) = (tmp_path / "runs").glob("run-*/results.csv")
    first = rows(results)
    assert [(r["variant"], r["status"]) for r in first] == [("vanilla", "ok"), ("lag", "ok")]
    assert main(["run", "--config", str(cfg)]) == EXIT_OK
    assert rows(results) == first  # nothing recomputed
    assert main(["run", "--config", str(cfg), "--force"]) == EXIT_OK
    again = rows(results)
    assert len(again) == 4 and again[2]["mse"] == first[0]["mse"]
    summary = json.loads((results.parent / "summary.json").read_text())
    assert summary["delta_vs_vanilla"][0]["variant"] == "lag"


def test_sweep_noise_adds_vanilla_baseline(tmp_path):
    cfg = write_cfg(tmp_path, task="trend", variants=["trend"], sigmas=[0.0, 0.5])
    assert main(["sweep-noise", "--config", str(cfg), "--seed", "3"]) == EXIT_OK
    (results,) = (tmp_path / "runs").glob("sweep-noise-*/results.csv")
    got = {(r["variant"], float(r["sigma"]), int(r["seed"])) for r in rows(results)}
    assert got == {(v, s, 3) for v in ("vanilla", "trend") for s in (0.0, 0.5)}


def test_usage_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"task": "lag", "unknown_key": 1}))
    assert main(["run", "--config", str(bad)]) == EXIT_USAGE
    assert "unknown_key" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.toml")]) == EXIT_USAGE
    assert main(["sweep-noise", "--config", str(write_cfg(tmp_path))]) == EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        main(["run"])
    assert e.value.code == 2


def test_rollout_ar_writes_trace(tmp_path):
    cfg = write_cfg(tmp_path, ar={"steps": 2, "batch_size": 4})
    assert main(["rollout-ar", "--config", str(cfg)]) == EXIT_OK
    (out,) = (tmp_path / "runs").glob("rollout-ar-*")
    assert rows(out / "results.csv")[0]["status"] == "ok"
    assert (out / "trace-seed1.jsonl").read_text().count("\n") == 12


def test_gen_conditional_writes_samples(tmp_path):
    cfg = write_cfg(tmp_path, diffusion={"steps": 2, "batch_size": 4, "t_train": 20, "sample_steps": 2,
                                         "n_generate": 2, "condition": [1, 2]})
    assert main(["gen-conditional", "--config", str(cfg)]) == EXIT_OK
    (out,) = (tmp_path / "runs").glob("gen-conditional-*")
    side = json.loads((out / "samples-seed1.json").read_text())
    assert side["condition"] == {"impulse_period_class": 1, "affine_slope_class": 2}
    assert len(rows(out / "samples-seed1.csv")) == 2 * 192


def test_verify_passes_and_detects_injected_faults(capsys):
    assert main(["verify", "--checks", "causality,joint_softmax"]) == EXIT_OK
    assert main(["verify", "--checks", "causality", "--inject-fault", "causal_mask"]) == EXIT_FAIL
    assert main(["verify", "--checks", "joint_softmax", "--inject-fault", "self_mask"]) == EXIT_FAIL
    assert "FAIL" in capsys.readouterr().out
