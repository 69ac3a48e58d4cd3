"""Checkpoints: a JSON manifest plus a sibling blob of little-endian f32 buffers."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import __version__
from .model import ModelConfig, parameter_shapes
from .numerics.tensor import Tensor

FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    """Manifest, blob or shape inconsistency."""


def blob_path(manifest_path) -> Path:
    return Path(manifest_path).with_suffix(".bin")


def _arrays(params: dict) -> dict:
    return {k: (v.data if isinstance(v, Tensor) else np.asarray(v)) for k, v in params.items()}


def save_checkpoint(params: dict, cfg: ModelConfig, path, metadata: dict | None = None) -> Path:
    """Write ``path`` (manifest) and ``path.with_suffix('.bin')``.

    ``metadata`` must be deterministic (no timestamps) so that equal
    parameters give byte-equal files.
    """
    path = Path(path)
    if path.suffix != ".json":
        raise CheckpointError(f"manifest path must end in .json, got {path.name}")
    arrays = _arrays(params)
    expected = parameter_shapes(cfg)
    if set(arrays) != set(expected):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise CheckpointError(f"parameter names differ from config: missing {missing}, extra {extra}")
    tensors = []
    offset = 0
    chunks = []
    for name in sorted(arrays):
        a = arrays[name]
        if tuple(a.shape) != tuple(expected[name]):
            raise CheckpointError(f"{name}: shape {tuple(a.shape)} != config shape {expected[name]}")
        buf = np.ascontiguousarray(a, dtype=_F32).tobytes()
        tensors.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": "float32-le",
        "blob": blob_path(path).name,
        "blob_bytes": offset,
        "model_config": cfg.to_dict(),
        "metadata": {"tool_version": __version__, **(metadata or {})},
        "tensors": tensors,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path(path).write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path) -> tuple:
    """``(params as Tensors requiring grad, ModelConfig, metadata)``."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read manifest {path}: {exc}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {manifest.get('format_version')}")
    try:
        cfg = ModelConfig(**manifest["model_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad model_config ({exc})") from None
    blob = (path.parent / manifest["blob"]).read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(
            f"{manifest['blob']}: expected {manifest['blob_bytes']} bytes, found {len(blob)}")
    expected = parameter_shapes(cfg)
    names = [t["name"] for t in manifest["tensors"]]
    if names != sorted(expected):
        missing = sorted(set(expected) - set(names))
        extra = sorted(set(names) - set(expected))
        raise CheckpointError(f"{path}: tensor list differs from config: missing {missing}, extra {extra}")
    params = {}
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if shape != tuple(expected[name]):
            raise CheckpointError(f"{name}: manifest shape {shape} != config shape {expected[name]}")
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        end = start + count * _F32.itemsize
        if end > len(blob):
            raise CheckpointError(
                f"{name}: needs bytes [{start}, {end}) but blob holds {len(blob)}")
        arr = np.frombuffer(blob, dtype=_F32, count=count, offset=start).astype(np.float64)
        params[name] = Tensor(arr.reshape(shape), requires_grad=True)
    return params, cfg, manifest["metadata"]
