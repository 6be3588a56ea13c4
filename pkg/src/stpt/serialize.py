"""Named-tensor checkpoints: a JSON manifest beside a flat little-endian
float64 blob, or a single self-contained JSON file."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .nn import Module

FORMAT = "stpt-tensors"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_state(state: dict[str, np.ndarray], path: str | Path, meta: dict | None = None,
               inline: bool = False) -> Path:
    """Write ``path`` (.json). Unless ``inline``, tensor bytes go to ``path.with_suffix('.bin')``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name in sorted(state):
        arr = np.asarray(state[name], dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        entry = {"name": name, "shape": list(arr.shape)}
        if inline:
            entry["data"] = arr.ravel().tolist()
        else:
            entry["offset"] = offset
            entry["count"] = int(arr.size)
            chunks.append(arr.tobytes())
            offset += arr.size
        entries.append(entry)
    manifest = {"format": FORMAT, "version": VERSION, "byte_order": "little", "dtype": "float64",
                "meta": meta or {}, "tensors": entries}
    if not inline:
        blob = b"".join(chunks)
        path.with_suffix(".bin").write_bytes(blob)
        manifest["sha256"] = hashlib.sha256(blob).hexdigest()
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_state(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    man = json.loads(path.read_text())
    if man.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} manifest")
    if man.get("version") != VERSION:
        raise CheckpointError(f"unsupported version {man.get('version')}")
    if man.get("byte_order") != "little" or man.get("dtype") != "float64":
        raise CheckpointError("only little-endian float64 is supported")
    blob = None
    if any("data" not in e for e in man["tensors"]):
        raw = path.with_suffix(".bin").read_bytes()
        if hashlib.sha256(raw).hexdigest() != man.get("sha256"):
            raise CheckpointError("checksum mismatch")
        blob = np.frombuffer(raw, dtype="<f8")
    state = {}
    for e in man["tensors"]:
        shape = tuple(e["shape"])
        if "data" in e:
            arr = np.array(e["data"], dtype=float)
        else:
            arr = blob[e["offset"]:e["offset"] + e["count"]].astype(float)
        state[e["name"]] = arr.reshape(shape)
    return state, man["meta"]


def save_module(module: Module, path: str | Path, meta: dict | None = None, inline: bool = False) -> Path:
    return save_state(module.state_dict(), path, meta, inline)


def load_module(module: Module, path: str | Path) -> dict:
    state, meta = load_state(path)
    module.load_state_dict(state)
    return meta
