"""Parameter checkpoints: a JSON manifest plus one little-endian float64 buffer.

The manifest lists every parameter in write order with its shape, role tag
and byte offset.  Writing the same parameters twice yields identical bytes.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"TPLC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def role_of(name: str) -> str:
    if name.startswith("prompt."):
        return "prompt"
    if name.startswith("gate."):
        return "gate"
    if name.startswith("generator."):
        return "generator"
    if name.startswith("domain_prompt."):
        return "domain_prompt"
    return "backbone"


def save_parameters(path: str | os.PathLike, params: Mapping[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write ``<path>.json`` and ``<path>.bin``; returns the manifest path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [MAGIC, bytes([VERSION])], len(MAGIC) + 1
    for name, value in params.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f8"))
        entries.append({"name": name, "shape": list(arr.shape), "role": role_of(name), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"format": "TPLC", "version": VERSION, "buffer": path.name + ".bin", "buffer_bytes": offset,
                "meta": meta or {}, "parameters": entries}
    path.with_name(path.name + ".bin").write_bytes(b"".join(chunks))
    manifest_path = path.with_name(path.name + ".json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_parameters(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    """Inverse of :func:`save_parameters`; ``path`` may include the ``.json`` suffix."""
    path = Path(path)
    if path.suffix == ".json":
        path = path.with_suffix("")
    try:
        manifest = json.loads(path.with_name(path.name + ".json").read_text())
        blob = path.with_name(manifest["buffer"]).read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"missing checkpoint file: {e.filename}") from None
    if blob[:4] != MAGIC or len(blob) < 5 or blob[4] != VERSION:
        raise CheckpointError("bad checkpoint magic or version")
    if len(blob) != manifest["buffer_bytes"]:
        raise CheckpointError(f"buffer holds {len(blob)} bytes, expected {manifest['buffer_bytes']}")
    out = {}
    for e in manifest["parameters"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        out[e["name"]] = np.frombuffer(blob, dtype="<f8", count=count, offset=e["offset"]).reshape(e["shape"]).copy()
    return out, manifest.get("meta", {})
