"""Experiment config files: TOML or JSON, validated against one schema that
rejects unknown keys, plus the hash that names output directories."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import jsonschema

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

VARIANTS = ("vanilla", "period", "trend", "lag", "indep", "pt-fg", "latent-ar")

_num = {"type": "number"}
_int = {"type": "integer"}
_pos_int = {"type": "integer", "minimum": 1}


def _obj(props: dict, required: list[str] | None = None) -> dict:
    out = {"type": "object", "properties": props, "additionalProperties": False}
    if required:
        out["required"] = required
    return out


SCHEMA = _obj({
    "task": {"enum": ["lag", "periodicity", "trend"]},
    "n_samples": _pos_int,
    "seed": _int,
    "noise_sigma": {"type": "number", "minimum": 0},
    "variants": {"type": "array", "items": {"enum": list(VARIANTS)}, "minItems": 1},
    "seeds": {"type": "array", "items": _int, "minItems": 1},
    "sigmas": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
    "output_dir": {"type": "string"},
    "prior": _obj({
        "periods": {"type": "array", "items": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}}},
        "gamma": _num,
        "trend": _obj({"d_m": _pos_int}),
        "lag": {"type": "array", "items": {"type": "array", "minItems": 3, "maxItems": 3, "items": _num}},
        "eta": _num,
        "partition": {"type": "array", "items": {"type": "array", "items": _int}},
    }),
    "train": _obj({
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "batch_size": _pos_int,
        "max_epochs": _pos_int,
        "patience": _pos_int,
        "d_model": _pos_int,
        "d_ff": _pos_int,
        "n_heads": _pos_int,
        "n_iters": {"type": "integer", "minimum": 0},
        "patch_len": _pos_int,
    }),
    "model": _obj({
        "z_normalizer": {"enum": ["softmax", "squared_softmax", "layernorm"]},
        "z_temperature": {"type": "number", "exclusiveMinimum": 0},
        "lambda_h": {"type": "number", "exclusiveMinimum": 0},
        "alpha_init": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "rope_time": {"type": "boolean"},
        "rope_chan": {"type": "boolean"},
    }),
    "ar": _obj({
        "k_enc": {"type": "integer", "minimum": 0},
        "k_dec": _pos_int,
        "lambda_latent": {"type": "number", "minimum": 0},
        "distill_loss": {"enum": ["smooth_l1", "smooth_l1_plus_cosine", "kl_under_squared_softmax"]},
        "steps": _pos_int,
        "batch_size": _pos_int,
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "trace": {"type": "boolean"},
    }),
    "diffusion": _obj({
        "t_train": _pos_int,
        "sample_steps": _pos_int,
        "p_null": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "guidance_scale": _num,
        "lambda_spec": {"type": "number", "minimum": 0},
        "steps": _pos_int,
        "batch_size": _pos_int,
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "n_generate": _pos_int,
        "attribute_mode": {"enum": ["independent", "cross_talk"]},
        "condition": {"type": "array", "items": _int},
    }),
})


class ConfigError(ValueError):
    pass


def parse_text(text: str, fmt: str) -> dict:
    if fmt == "toml":
        return tomllib.loads(text)
    if fmt == "json":
        return json.loads(text)
    raise ConfigError(f"unknown config format {fmt!r}")


def validate(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {e.message}") from None
    return cfg


def load_config(path: str | Path) -> dict:
    path = Path(path)
    fmt = "toml" if path.suffix.lower() == ".toml" else "json"
    try:
        cfg = parse_text(path.read_text(), fmt)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: {e}") from None
    return validate(cfg)


def config_hash(cfg: dict, exclude=("output_dir", "seeds", "variants", "sigmas")) -> str:
    """Stable hash of everything that changes a cell's result."""
    kept = {k: v for k, v in cfg.items() if k not in exclude}
    blob = json.dumps(kept, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
