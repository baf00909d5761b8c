"""Flat binary tensor archives: named float32 arrays plus a JSON manifest.

One ``.bin`` file holds the raw little-endian float32 data back to back; the
manifest records, per tensor name, its shape and byte offset, plus an
arbitrary ``extra`` dict (model config, vocabulary, ...). Writes are
deterministic: tensors are stored in sorted-name order and the manifest is
dumped with sorted keys, so rebuilding the same data yields identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_DTYPE = "<f4"  # little-endian float32


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], extra: dict | None = None) -> None:
    """Write ``tensors`` to ``path`` (.bin) with a ``path.manifest.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries: dict[str, dict] = {}
    offset = 0
    with open(path, "wb") as fh:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype=_DTYPE)
            fh.write(arr.tobytes())
            entries[name] = {"shape": list(arr.shape), "dtype": "float32", "offset": offset}
            offset += arr.nbytes
    manifest = {"tensors": entries, "extra": extra or {}}
    manifest_path = path.with_name(path.name + ".manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read an archive written by save_tensors; returns (tensors, extra)."""
    path = Path(path)
    manifest_path = path.with_name(path.name + ".manifest.json")
    if not path.exists() or not manifest_path.exists():
        raise FileNotFoundError(f"tensor archive missing: {path} / {manifest_path}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    raw = path.read_bytes()
    tensors: dict[str, np.ndarray] = {}
    for name, entry in manifest["tensors"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(raw, dtype=_DTYPE, count=count, offset=start)
        tensors[name] = arr.reshape(shape).copy()
    return tensors, manifest.get("extra", {})
