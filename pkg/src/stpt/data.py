"""Seeded synthetic generators (lag, periodicity, trend), noise injection,
splits, and on-disk dataset files.

Every sample draws from its own stream ``default_rng([seed, index])`` so a
sample never depends on how many others were generated before it. Random
parameters are drawn first and additive noise last; switching the noise off
therefore leaves the clean signal bit-identical, which the oracles rely on.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

TASKS = ("lag", "periodicity", "trend")
LAG_TAU = 8
LAG_NOISE_STD = 0.05
TREND_NOISE_STD = 0.1
RED_ALPHA = 0.9
FORMAT_VERSION = 1

_NOISE_STREAM = 0x6E6F697365  # separates add_noise draws from generator draws


@dataclass
class SynthSpec:
    task: str
    n_samples: int = 150
    seq_len: int = 96
    pred_len: int = 96
    seed: int = 42
    noise_sigma: float = 0.0  # extra noise, scaled by per-channel std
    base_noise: float | None = None  # None uses the task's built-in floor

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")

    @property
    def length(self) -> int:
        return self.seq_len + self.pred_len


@dataclass
class SeriesDataset:
    samples: np.ndarray  # [n, N, L]
    splits: dict[str, np.ndarray]
    metadata: dict[str, np.ndarray] = field(default_factory=dict)
    spec: SynthSpec | None = None
    channel_names: list[str] = field(default_factory=list)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]

    @property
    def length(self) -> int:
        return self.samples.shape[2]

    def __len__(self) -> int:
        return self.samples.shape[0]

    def split(self, name: str) -> np.ndarray:
        return self.samples[self.splits[name]]

    def replace_samples(self, samples: np.ndarray) -> "SeriesDataset":
        return SeriesDataset(samples, self.splits, self.metadata, self.spec, list(self.channel_names))


def split_indices(n: int) -> dict[str, np.ndarray]:
    """Contiguous 70/10/20 split; val and test are floored, the rest goes to train."""
    n_val = (n * 10) // 100
    n_test = (n * 20) // 100
    n_train = n - n_val - n_test
    idx = np.arange(n)
    return {
        "train": idx[:n_train],
        "val": idx[n_train:n_train + n_val],
        "test": idx[n_train + n_val:],
    }


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


# ---------------------------------------------------------------------------
# lag


def _lag_sample(rng: np.random.Generator, L: int, noise: float) -> tuple[np.ndarray, dict]:
    tau = LAG_TAU
    t = np.arange(-tau, L, dtype=float)  # sources extend tau steps back so targets are defined
    phi = rng.uniform(0.0, 2.0 * np.pi)
    env_freq = float(rng.choice([1.0, 0.5]))
    ch0 = np.sin(2 * np.pi * t / 24 + phi) * np.cos(2 * np.pi * env_freq * t / L + phi)

    period = int(rng.choice([16, 20, 24]))
    offset = int(rng.integers(0, period))
    sign = float(rng.choice([-1.0, 1.0]))
    ch2 = np.zeros_like(t)
    ch2[offset::period] = sign
    # Leaky cumulative response: each impulse adds a step that decays by 0.9 per step.
    resp = np.zeros_like(t)
    acc = 0.0
    for k in range(len(t)):
        acc = 0.9 * acc + ch2[k]
        resp[k] = acc

    ch4 = ((t % 30) / 30.0) * 2.0 - 1.0
    m = float(rng.choice([-2.0, 0.5, 2.0]))
    b = float(rng.uniform(-1.0, 1.0))

    x = np.empty((6, L))
    x[0] = ch0[tau:]
    x[1] = ch0[:L]
    x[2] = ch2[tau:]
    x[3] = resp[:L]
    x[4] = ch4[tau:]
    x[5] = m * ch4[:L] + b
    if noise > 0:
        x += rng.standard_normal(x.shape) * noise
    meta = {"phase": phi, "envelope_freq": env_freq, "impulse_period": period, "impulse_offset": offset,
            "impulse_sign": sign, "affine_m": m, "affine_b": b}
    return x, meta


# ---------------------------------------------------------------------------
# periodicity

PERIODS = [[24], [12], [48], [24, 12], [24, 20], [24], [12], [24, 12], [24, 20], []]
PERIODIC_NOISE_STD = 0.3


def _red_noise(rng: np.random.Generator, L: int, alpha: float = RED_ALPHA) -> np.ndarray:
    """Stationary AR(1) with unit marginal variance."""
    e = rng.standard_normal(L) * math.sqrt(1.0 - alpha * alpha)
    out = np.empty(L)
    out[0] = rng.standard_normal()
    for k in range(1, L):
        out[k] = alpha * out[k - 1] + e[k]
    return out


def _periodicity_sample(rng: np.random.Generator, L: int, noise: float) -> tuple[np.ndarray, dict]:
    t = np.arange(L, dtype=float)
    phi = rng.uniform(0.0, 2.0 * np.pi)
    w = lambda T_: 2 * np.pi * t / T_  # noqa: E731
    base = [
        np.sin(w(24) + phi),
        np.cos(w(12) + phi),
        np.sin(w(48) + phi),
        np.sin(w(24) + phi) + 0.5 * np.sin(w(12) + 2 * phi),
        0.5 * (np.sin(w(24) + phi) + np.sin(w(20) + phi)),
    ]
    x = np.empty((10, L))
    x[:5] = base
    x[5:9] = base[0], base[1], base[3], base[4]
    if noise > 0:
        x[5] += rng.standard_normal(L) * noise  # white
        x[6] += _red_noise(rng, L) * noise  # red
        x[7] += rng.standard_normal(L) * noise
        x[8] += _red_noise(rng, L) * noise
    x[9] = _red_noise(rng, L)
    return x, {"phase": phi}


# ---------------------------------------------------------------------------
# trend

MASKED_QUAD_R2 = 0.99


def _trend_curves(rng: np.random.Generator, L: int, half: int) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free curves on normalised time (history [0, 1), forecast [1, 2))."""
    t = np.arange(L, dtype=float) / half
    pert = 1.0 + 0.1 * rng.uniform(-1.0, 1.0, size=10)
    x = np.empty((10, L))
    x[0] = 1.0 * pert[0] * t
    x[1] = -1.0 * pert[1] * t
    x[2] = 0.3 * pert[2] * t
    x[3] = 1.0 * pert[3] * t**2
    x[4] = np.exp(0.8 * pert[4] * t) - 1.0
    x[5] = 0.5 * pert[5] * t**3
    x[6] = 1.0 * t + 0.15 * pert[6] * t**2  # looks linear on the history window
    x[7] = pert[7] * np.log1p(3.0 * t)
    x[8] = 2.0 * pert[8] * np.sqrt(t)
    x[9] = 2.0 * pert[9] * (1.0 - 1.0 / (1.0 + 2.0 * t))
    return x, pert


def history_r2(y: np.ndarray) -> float:
    """R^2 of the best straight-line fit."""
    t = np.arange(len(y), dtype=float)
    coef = np.polyfit(t, y, 1)
    resid = y - np.polyval(coef, t)
    return 1.0 - resid.var() / y.var()


def _trend_sample(rng: np.random.Generator, L: int, noise: float, half: int) -> tuple[np.ndarray, dict]:
    x, pert = _trend_curves(rng, L, half)
    r2 = history_r2(x[6, :half])
    if r2 <= MASKED_QUAD_R2:
        raise AssertionError(f"noise-masked quadratic history is not near-linear (R^2={r2:.4f})")
    if np.abs(x).max() > 5.0:
        raise AssertionError("trend curve left [-5, 5]")
    if noise > 0:
        x = x + rng.standard_normal(x.shape) * noise
    return x, {"perturbation": pert}


# ---------------------------------------------------------------------------

CHANNEL_NAMES = {
    "lag": ["sine", "sine_lagged", "impulses", "step_response", "sawtooth", "sawtooth_affine"],
    "periodicity": ["sin24", "cos12", "sin48", "harmonic", "beating", "sin24_white", "cos12_red",
                    "harmonic_white", "beating_red", "red_noise"],
    "trend": ["linear_up", "linear_down", "linear_gentle", "quadratic", "exponential", "cubic",
              "masked_quadratic", "log", "sqrt", "saturating"],
}


def _default_noise(task: str) -> float:
    return {"lag": LAG_NOISE_STD, "periodicity": PERIODIC_NOISE_STD, "trend": TREND_NOISE_STD}[task]


def generate(spec: SynthSpec) -> SeriesDataset:
    L = spec.length
    noise = _default_noise(spec.task) if spec.base_noise is None else spec.base_noise
    rows, metas = [], []
    for i in range(spec.n_samples):
        rng = sample_rng(spec.seed, i)
        if spec.task == "lag":
            x, meta = _lag_sample(rng, L, noise)
        elif spec.task == "periodicity":
            x, meta = _periodicity_sample(rng, L, noise)
        else:
            x, meta = _trend_sample(rng, L, noise, spec.seq_len)
        rows.append(x)
        metas.append(meta)
    metadata = {k: np.array([m[k] for m in metas]) for k in metas[0]}
    ds = SeriesDataset(np.stack(rows), split_indices(spec.n_samples), metadata, spec,
                       list(CHANNEL_NAMES[spec.task]))
    if spec.noise_sigma > 0:
        ds = add_noise(ds, spec.noise_sigma, spec.seed)
    return ds


def gen_lag(spec: SynthSpec) -> SeriesDataset:
    if spec.task != "lag":
        raise ValueError("gen_lag needs task='lag'")
    return generate(spec)


def gen_periodicity(spec: SynthSpec) -> SeriesDataset:
    if spec.task != "periodicity":
        raise ValueError("gen_periodicity needs task='periodicity'")
    return generate(spec)


def gen_trend(spec: SynthSpec) -> SeriesDataset:
    if spec.task != "trend":
        raise ValueError("gen_trend needs task='trend'")
    return generate(spec)


def add_noise(ds: SeriesDataset, sigma: float, seed: int) -> SeriesDataset:
    """x + N(0, (sigma * std_channel)^2) from a stream disjoint from generation."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return ds.replace_samples(ds.samples.copy())
    std = ds.samples.std(axis=(0, 2))  # per channel over samples and time
    rng = np.random.default_rng([int(seed), _NOISE_STREAM, int(round(sigma * 1e6))])
    eps = rng.standard_normal(ds.samples.shape) * (sigma * std)[None, :, None]
    return ds.replace_samples(ds.samples + eps)


def prior_spec_for(task: str) -> dict:
    """Ground-truth structure each generator bakes in, in PriorSpec form."""
    if task == "lag":
        return {"lag": [[0, 1, LAG_TAU], [2, 3, LAG_TAU], [4, 5, LAG_TAU]],
                "partition": [[0, 1], [2, 3], [4, 5]]}
    if task == "periodicity":
        return {"periods": [list(map(float, p)) for p in PERIODS]}
    if task == "trend":
        return {"trend": {"d_m": 64}}
    raise ValueError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# files


def _sha256(buf: bytes) -> str:
    return hashlib.sha256(buf).hexdigest()


def save_dataset(ds: SeriesDataset, directory: str | Path, stem: str = "dataset") -> Path:
    """Little-endian float64 dump plus a JSON manifest. Returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    raw = np.ascontiguousarray(ds.samples, dtype="<f8").tobytes()
    (directory / f"{stem}.bin").write_bytes(raw)
    manifest = {
        "version": FORMAT_VERSION,
        "byte_order": "little",
        "dtype": "float64",
        "shape": list(ds.samples.shape),
        "sha256": _sha256(raw),
        "spec": asdict(ds.spec) if ds.spec else None,
        "channel_names": ds.channel_names,
        "splits": {k: v.tolist() for k, v in ds.splits.items()},
        "metadata": {k: v.tolist() for k, v in ds.metadata.items()},
        "prior_spec": prior_spec_for(ds.spec.task) if ds.spec else None,
    }
    path = directory / f"{stem}.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_dataset(manifest_path: str | Path) -> SeriesDataset:
    manifest_path = Path(manifest_path)
    man = json.loads(manifest_path.read_text())
    if man.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset version {man.get('version')}")
    raw = manifest_path.with_suffix(".bin").read_bytes()
    if _sha256(raw) != man["sha256"]:
        raise ValueError("dataset checksum mismatch")
    samples = np.frombuffer(raw, dtype="<f8").reshape(man["shape"]).astype(np.float64)
    spec = SynthSpec(**man["spec"]) if man["spec"] else None
    return SeriesDataset(samples, {k: np.array(v, dtype=int) for k, v in man["splits"].items()},
                         {k: np.array(v) for k, v in man["metadata"].items()}, spec, man["channel_names"])


def export_csv(ds: SeriesDataset, path: str | Path) -> None:
    """Long format: one row per (sample, step), one column per channel."""
    names = ds.channel_names or [f"ch{i}" for i in range(ds.n_channels)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "t", *names])
        for i, x in enumerate(ds.samples):
            for t in range(x.shape[1]):
                w.writerow([i, t, *(repr(float(v)) for v in x[:, t])])


def load_csv_series(path: str | Path, seq_len: int, pred_len: int, stride: int = 1,
                    columns: list[str] | None = None) -> SeriesDataset:
    """Slide windows over a wide CSV (one row per step, numeric columns become
    channels) and split them chronologically 70/10/20."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path} has no rows")
    if columns is None:
        columns = []
        for name in rows[0]:
            try:
                float(rows[0][name])
            except (TypeError, ValueError):
                continue
            columns.append(name)
    series = np.array([[float(r[c]) for c in columns] for r in rows]).T  # [N, len]
    L = seq_len + pred_len
    starts = range(0, series.shape[1] - L + 1, stride)
    windows = np.stack([series[:, s:s + L] for s in starts]) if series.shape[1] >= L else None
    if windows is None:
        raise ValueError(f"series of length {series.shape[1]} shorter than window {L}")
    return SeriesDataset(windows, split_indices(len(windows)), {}, None, list(columns))
