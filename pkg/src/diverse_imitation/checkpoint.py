"""Checkpoints: a JSON manifest next to a flat little-endian float64 array."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .autodiff import ParamVector

FORMAT = 1


class CheckpointError(ValueError):
    pass


def _paths(prefix) -> tuple[Path, Path]:
    prefix = Path(prefix)
    return prefix.with_suffix(".json"), prefix.with_suffix(".bin")


def sha256_bytes(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(prefix, params: ParamVector, meta: dict | None = None) -> dict:
    """Write ``prefix.json`` and ``prefix.bin``; returns the manifest."""
    manifest_path, data_path = _paths(prefix)
    blob = np.ascontiguousarray(params.data, dtype="<f8").tobytes()
    manifest = {
        "format": FORMAT,
        "dtype": "float64-le",
        "size": int(params.size),
        "sha256": sha256_bytes(blob),
        "data_file": data_path.name,
        "parameters": [{"name": n, "shape": list(s), "offset": int(o)}
                       for n, s, o in zip(params.names, params.shapes, params.offsets)],
        "meta": meta or {},
    }
    data_path.write_bytes(blob)
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def load_checkpoint(prefix, expected: ParamVector | None = None) -> tuple[ParamVector, dict]:
    """Read and validate a checkpoint; ``expected`` additionally pins the layout."""
    manifest_path, data_path = _paths(prefix)
    if not manifest_path.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as err:
        raise CheckpointError(f"{manifest_path}: unreadable manifest ({err})") from err
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{manifest_path}: unsupported format {manifest.get('format')!r}")
    data_path = manifest_path.with_name(manifest.get("data_file", data_path.name))
    if not data_path.exists():
        raise FileNotFoundError(f"checkpoint data not found: {data_path}")
    blob = data_path.read_bytes()
    size = int(manifest["size"])
    if len(blob) != 8 * size:
        raise CheckpointError(f"{data_path}: expected {size} float64 values ({8 * size} bytes), "
                              f"found {len(blob)} bytes")
    if sha256_bytes(blob) != manifest["sha256"]:
        raise CheckpointError(f"{data_path}: sha256 does not match the manifest")
    entries = manifest["parameters"]
    starts = [int(e["offset"]) for e in entries]
    ends = starts[1:] + [size]
    if starts and starts[0] != 0:
        raise CheckpointError(f"parameter '{entries[0]['name']}': first offset must be 0")
    names, shapes = [], []
    for entry, start, end in zip(entries, starts, ends):
        name, shape = entry["name"], tuple(int(d) for d in entry["shape"])
        if any(d < 0 for d in shape):
            raise CheckpointError(f"parameter '{name}': negative extent in shape {shape}")
        extent = int(np.prod(shape, dtype=np.int64))
        if extent != end - start:
            raise CheckpointError(f"parameter '{name}': shape {shape} holds {extent} values, "
                                  f"manifest offsets leave room for {end - start}")
        names.append(name)
        shapes.append(shape)
    if not entries and size:
        raise CheckpointError(f"{manifest_path}: no parameters listed for {size} values")
    pv = ParamVector(names, shapes, np.frombuffer(blob, dtype="<f8").astype(np.float64))
    if expected is not None:
        if list(expected.names) != names:
            missing = sorted(set(expected.names) ^ set(names))
            raise CheckpointError(f"checkpoint parameters differ from the expected layout: {missing[:5]}")
        for n, s_exp, s in zip(names, expected.shapes, shapes):
            if tuple(s_exp) != tuple(s):
                raise CheckpointError(f"parameter '{n}': shape {s} in checkpoint, expected {tuple(s_exp)}")
    return pv, manifest
