"""Parameter checkpoints: ``manifest.json`` plus one raw little-endian float32 file per tensor."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .layers import ParamSet

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _filename(name: str) -> str:
    return name.replace("/", "_") + ".bin"


def save_params(params: ParamSet | dict, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = params.state_dict() if isinstance(params, ParamSet) else params
    entries = []
    for name, value in state.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        fname = _filename(name)
        (path / fname).write_bytes(arr.tobytes())
        entries.append({"name": name, "shape": list(arr.shape), "file": fname})
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": "float32",
        "endianness": "little",
        "params": entries,
        "extra": extra or {},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_manifest(path) -> dict:
    mpath = Path(path) / "manifest.json"
    if not mpath.exists():
        raise CheckpointError(f"no checkpoint at {path} (missing manifest.json)")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('format_version')}")
    return manifest


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    """Returns (name -> float64 array, extra metadata)."""
    path = Path(path)
    manifest = read_manifest(path)
    state = {}
    for entry in manifest["params"]:
        raw = (path / entry["file"]).read_bytes()
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        if len(raw) != expected:
            raise CheckpointError(f"{entry['name']}: expected {expected} bytes, found {len(raw)}")
        state[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    return state, manifest.get("extra", {})
