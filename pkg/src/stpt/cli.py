"""Batch command-line frontend.

Every command reads a TOML or JSON config, writes into a directory named by
the config hash, and never prompts. Result rows are appended; a cell whose
(config hash, variant, sigma, seed) key is already recorded is skipped unless
``--force`` is given.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import faults
from .config import ConfigError, config_hash, load_config
from .data import SynthSpec, add_noise, export_csv, generate, load_dataset, prior_spec_for, save_dataset
from .priors import PriorSpec
from .train import SEEDS, DivergenceError, MetricReport, TrainConfig, run_variant

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
RESULT_FIELDS = ["config_hash", "task", "variant", "n", "sigma", "seed", "mse", "mae", "wall_time", "status"]


def _out_dir(cfg: dict, args, command: str) -> Path:
    root = Path(args.out or cfg.get("output_dir") or "runs")
    return root / f"{command}-{config_hash(cfg)[:12]}"


def _seeds(cfg: dict, args) -> list[int]:
    if args.seed is not None:
        return [args.seed]
    return list(cfg.get("seeds", SEEDS))


def _synth_spec(cfg: dict, args) -> SynthSpec:
    if "task" not in cfg:
        raise ConfigError("config needs a 'task'")
    seed = cfg.get("seed", 42)
    return SynthSpec(cfg["task"], cfg.get("n_samples", 150), seed=seed, noise_sigma=cfg.get("noise_sigma", 0.0))


def _dataset(cfg: dict, args):
    """Generate (or reuse) the dataset files for this config."""
    spec = _synth_spec(cfg, args)
    data_root = Path(args.out or cfg.get("output_dir") or "runs") / "data"
    directory = data_root / f"{spec.task}-{spec.n_samples}-seed{spec.seed}-noise{spec.noise_sigma:g}"
    manifest = directory / "dataset.json"
    if manifest.exists() and not args.force:
        return load_dataset(manifest), manifest
    ds = generate(spec)
    save_dataset(ds, directory)
    return ds, manifest


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg.get("train", {}))


def _prior_spec(cfg: dict) -> PriorSpec:
    return PriorSpec.from_dict(cfg.get("prior") or prior_spec_for(cfg["task"]))


# ---------------------------------------------------------------------------
# result bookkeeping


def _done_keys(path: Path) -> set[tuple]:
    if not path.exists():
        return set()
    with open(path, newline="") as fh:
        return {(r["config_hash"], r["variant"], float(r["sigma"]), int(r["seed"]))
                for r in csv.DictReader(fh) if r["status"] == "ok"}


def _append_rows(path: Path, rows: list[dict]) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow(r)


def _summarize(path: Path, cfg_hash: str) -> dict:
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["config_hash"] == cfg_hash and r["status"] == "ok"]
    cells: dict[tuple, list[dict]] = {}
    for r in rows:
        cells.setdefault((r["variant"], float(r["sigma"])), []).append(r)
    summary = []
    for (variant, sigma), rs in sorted(cells.items()):
        mses = np.array([float(r["mse"]) for r in rs])
        maes = np.array([float(r["mae"]) for r in rs])
        summary.append({"variant": variant, "sigma": sigma, "n_seeds": len(rs),
                        "mse_mean": float(mses.mean()), "mse_std": float(mses.std()),
                        "mae_mean": float(maes.mean()), "mae_std": float(maes.std())})
    by_sigma: dict[float, dict[str, float]] = {}
    for s in summary:
        by_sigma.setdefault(s["sigma"], {})[s["variant"]] = s["mse_mean"]
    deltas = [{"sigma": sig, "variant": v, "delta": m["vanilla"] - mse}
              for sig, m in sorted(by_sigma.items()) if "vanilla" in m
              for v, mse in sorted(m.items()) if v != "vanilla"]
    return {"config_hash": cfg_hash, "cells": summary, "delta_vs_vanilla": deltas}


# ---------------------------------------------------------------------------
# forecasting cells


def _run_cell(job: dict) -> dict:
    """Worker entry point; owns its dataset copy, model, tape and RNG."""
    ds = load_dataset(job["manifest"])
    if job["sigma"] > 0:
        ds = add_noise(ds, job["sigma"], job["noise_seed"])
    t0 = time.perf_counter()
    row = {"config_hash": job["hash"], "task": job["task"], "variant": job["variant"], "n": len(ds),
           "sigma": job["sigma"], "seed": job["seed"]}
    try:
        res = run_variant(ds, job["variant"], TrainConfig(**job["train"]), job["seed"],
                          PriorSpec(**job["prior"]), **job["model"])
        row.update(mse=res.report.mse, mae=res.report.mae, status="ok")
    except DivergenceError as e:
        row.update(mse=math.nan, mae=math.nan, status=f"diverged: {e}")
    row["wall_time"] = round(time.perf_counter() - t0, 3)
    return row


def _grid(cfg: dict, args, command: str, sigmas: list[float]) -> int:
    variants = cfg.get("variants", ["vanilla"])
    unsupported = [v for v in variants if v in ("pt-fg", "latent-ar")]
    if unsupported:
        raise ConfigError(f"variants {unsupported} are run by 'gen-conditional' / 'rollout-ar'")
    ds, manifest = _dataset(cfg, args)
    out = _out_dir(cfg, args, command)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True))
    h = config_hash(cfg)
    results = out / "results.csv"
    done = set() if args.force else _done_keys(results)
    prior = asdict(_prior_spec(cfg))
    jobs = [{"manifest": str(manifest), "hash": h, "task": cfg["task"], "variant": v, "sigma": float(s),
             "seed": seed, "noise_seed": cfg.get("seed", 42), "train": cfg.get("train", {}),
             "model": cfg.get("model", {}), "prior": prior}
            for s in sigmas for v in variants for seed in _seeds(cfg, args)
            if (h, v, float(s), seed) not in done]
    skipped = len(sigmas) * len(variants) * len(_seeds(cfg, args)) - len(jobs)
    print(f"{len(jobs)} cells to run, {skipped} already recorded", file=sys.stderr)
    rows = []
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for row in pool.map(_run_cell, jobs):
                _append_rows(results, [row])
                rows.append(row)
                _print_row(row)
    else:
        for job in jobs:
            row = _run_cell(job)
            _append_rows(results, [row])
            rows.append(row)
            _print_row(row)
    if results.exists():
        summary = _summarize(results, h)
        (out / "summary.json").write_text(json.dumps(summary, indent=1))
        for d in summary["delta_vs_vanilla"]:
            print(f"sigma={d['sigma']:g} {d['variant']}: delta = {d['delta']:+.4f}")
    print(f"results: {results}")
    return EXIT_FAIL if any(r["status"] != "ok" for r in rows) else EXIT_OK


def _print_row(row: dict) -> None:
    print(f"{row['variant']:>8} sigma={row['sigma']:<5g} seed={row['seed']:<4} "
          f"mse={row['mse']:.4f} mae={row['mae']:.4f} [{row['status']}] {row['wall_time']}s")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: dict, args) -> int:
    ds, manifest = _dataset(cfg, args)
    if not (manifest.parent / "dataset.csv").exists() or args.force:
        export_csv(ds, manifest.parent / "dataset.csv")
    man = json.loads(manifest.read_text())
    print(f"{manifest} shape={man['shape']} sha256={man['sha256']}")
    return EXIT_OK


def cmd_run(cfg: dict, args) -> int:
    return _grid(cfg, args, "run", [0.0])


def cmd_sweep_noise(cfg: dict, args) -> int:
    if "sigmas" not in cfg:
        raise ConfigError("sweep-noise needs 'sigmas'")
    variants = cfg.get("variants", ["vanilla"])
    if "vanilla" not in variants:
        cfg = {**cfg, "variants": ["vanilla", *variants]}
    return _grid(cfg, args, "sweep-noise", cfg["sigmas"])


def cmd_rollout_ar(cfg: dict, args) -> int:
    from . import tensor as T
    from .graph import ModelConfig
    from .latent_ar import ARConfig, LatentAR, dump_trace, rollout, training_step
    from .optim import AdamState, adam_step
    from .train import eval_metrics, revin_denormalize, revin_normalize, standardize_splits

    ds, _ = _dataset(cfg, args)
    ds, _, _ = standardize_splits(ds)
    out = _out_dir(cfg, args, "rollout-ar")
    out.mkdir(parents=True, exist_ok=True)
    tc = _train_config(cfg)
    arc = dict(cfg.get("ar", {}))
    steps, batch, lr = arc.pop("steps", 50), arc.pop("batch_size", 16), arc.pop("lr", 5e-4)
    want_trace = arc.pop("trace", True)
    n_future = math.ceil(tc.pred_len / tc.patch_len)
    ar_cfg = ARConfig(n_future=n_future, **arc)
    mcfg = tc.model_config(ds.n_channels, **cfg.get("model", {}))
    h = config_hash(cfg)
    results = out / "results.csv"
    done = set() if args.force else _done_keys(results)
    x_tr = ds.split("train")
    x_te = ds.split("test")
    failed = False
    for seed in _seeds(cfg, args):
        if (h, "latent-ar", 0.0, seed) in done:
            print(f"seed {seed}: already recorded")
            continue
        t0 = time.perf_counter()
        model = LatentAR(mcfg, ar_cfg, T.make_rng(seed))
        opt = AdamState(lr=lr, horizon=steps)
        rng = np.random.default_rng([seed, 3])
        status = "ok"
        for k in range(steps):
            idx = rng.choice(len(x_tr), size=min(batch, len(x_tr)), replace=False)
            xn, st = revin_normalize(x_tr[idx, :, :tc.seq_len])
            y = (x_tr[idx, :, tc.seq_len:] - st.mean) / st.std
            losses = training_step(xn, y, model)
            if not math.isfinite(losses.total.item()):
                status = f"diverged at step {k}"
                break
            model.zero_grad()
            losses.total.backward()
            adam_step(opt, model.parameters())
        mse = mae = math.nan
        if status == "ok":
            with T.no_grad():
                xn, st = revin_normalize(x_te[:, :, :tc.seq_len])
                ro = rollout(xn, model, pred_len=tc.pred_len)
                rep = eval_metrics(revin_denormalize(ro.y_hat.data, st), x_te[:, :, tc.seq_len:])
            mse, mae = rep.mse, rep.mae
            if want_trace:
                dump_trace(ro.traces, out / f"trace-seed{seed}.jsonl")
        failed |= status != "ok"
        row = {"config_hash": h, "task": cfg["task"], "variant": "latent-ar", "n": len(ds), "sigma": 0.0,
               "seed": seed, "mse": mse, "mae": mae, "wall_time": round(time.perf_counter() - t0, 3),
               "status": status}
        _append_rows(results, [row])
        _print_row(row)
    (out / "summary.json").write_text(json.dumps(_summarize(results, h), indent=1))
    return EXIT_FAIL if failed else EXIT_OK


def cmd_gen_conditional(cfg: dict, args) -> int:
    from . import tensor as T
    from .factor_gen import PTFG, AttributeConditioner, DiffusionConfig, sample, train_ptfg

    if cfg.get("task") != "lag":
        raise ConfigError("gen-conditional derives attributes from the lag generator; set task = 'lag'")
    ds, _ = _dataset(cfg, args)
    out = _out_dir(cfg, args, "gen-conditional")
    out.mkdir(parents=True, exist_ok=True)
    dc = dict(cfg.get("diffusion", {}))
    steps, batch, lr = dc.pop("steps", 30), dc.pop("batch_size", 32), dc.pop("lr", 1e-3)
    n_gen = dc.pop("n_generate", 4)
    mode = dc.pop("attribute_mode", "independent")
    condition = dc.pop("condition", [0, 0])
    dcfg = DiffusionConfig(**dc)
    # Attributes: impulse-period class and affine-slope class.
    periods = {16: 0, 20: 1, 24: 2}
    slopes = {-2.0: 0, 0.5: 1, 2.0: 2}
    ids = np.stack([[periods[int(p)] for p in ds.metadata["impulse_period"]],
                    [slopes[float(m)] for m in ds.metadata["affine_m"]]], axis=1)
    if len(condition) != 2 or not all(0 <= c < 3 for c in condition):
        raise ConfigError("condition must be two class ids in [0, 3)")
    tc = _train_config(cfg)
    x0 = ds.samples[ds.splits["train"]]
    mu = x0.mean(axis=(0, 2), keepdims=True)
    sd = x0.std(axis=(0, 2), keepdims=True)
    x0n = (x0 - mu) / sd
    seed = _seeds(cfg, args)[0]
    rng = T.make_rng(seed)
    attr = AttributeConditioner([3, 3], 8, rng, mode)
    mcfg = tc.model_config(ds.n_channels, **cfg.get("model", {})).with_(seq_len=ds.length, pred_len=ds.length)
    model = PTFG(mcfg, attr.out_dim, dcfg, rng)
    with T.no_grad():
        conds = attr(ids[ds.splits["train"]]).data
    losses = train_ptfg(model, x0n, conds, steps, seed, batch=batch, lr=lr)
    with T.no_grad():
        c = attr(np.tile(np.asarray(condition), (n_gen, 1))).data
    gen = sample(model, c, ds.n_channels, seed) * sd + mu
    csv_path = out / f"samples-seed{seed}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "t", *ds.channel_names])
        for i, x in enumerate(gen):
            for t in range(x.shape[1]):
                w.writerow([i, t, *(repr(float(v)) for v in x[:, t])])
    sidecar = {"condition": {"impulse_period_class": condition[0], "affine_slope_class": condition[1]},
               "seed": seed, "guidance_scale": dcfg.guidance_scale, "sample_steps": dcfg.sample_steps,
               "attribute_mode": mode, "train_steps": steps, "final_loss": losses[-1],
               "config_hash": config_hash(cfg)}
    csv_path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))
    print(f"wrote {n_gen} samples to {csv_path} (final train loss {losses[-1]:.4f})")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_battery

    names = args.checks.split(",") if args.checks else None
    t0 = time.perf_counter()
    with faults.inject(*(args.inject_fault or [])):
        results = run_battery(names)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.seconds:7.2f}s  {r.detail}")
    total = time.perf_counter() - t0
    n_fail = sum(not r.passed for r in results)
    print(f"{len(results) - n_fail}/{len(results)} checks passed in {total:.1f}s")
    return EXIT_FAIL if n_fail else EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "run": cmd_run,
    "sweep-noise": cmd_sweep_noise,
    "rollout-ar": cmd_rollout_ar,
    "gen-conditional": cmd_gen_conditional,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stpt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="TOML or JSON experiment config")
        sp.add_argument("--seed", type=int, default=None, help="run this single seed instead of the config's")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes for grid cells")
        sp.add_argument("--force", action="store_true", help="recompute cells already recorded")
        sp.add_argument("--out", default=None, help="output root (overrides output_dir)")
    vp = sub.add_parser("verify")
    vp.add_argument("--checks", default=None, help="comma-separated subset")
    vp.add_argument("--inject-fault", action="append", choices=faults.KNOWN,
                    help="deliberately break one mechanism (the battery must then fail)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "verify":
        return cmd_verify(args)
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
