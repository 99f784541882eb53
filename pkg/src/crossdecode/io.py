"""Directory container: ``manifest.json`` plus one little-endian float32 file per tensor."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

_LE_F32 = np.dtype("<f4")


def write_container(path, tensors: dict[str, np.ndarray], meta: dict, overwrite: bool = False,
                    filename: str = "manifest.json") -> Path:
    path = Path(path)
    manifest = path / filename
    if manifest.exists() and not overwrite:
        raise FileExistsError(f"{manifest} exists; pass overwrite=True to replace it")
    path.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in sorted(tensors.items()):
        arr = np.asarray(arr)
        fname = name.replace("/", "__") + ".f32"
        arr.astype(_LE_F32).tofile(path / fname)
        entries[name] = {"file": fname, "shape": list(arr.shape)}
    body = dict(meta)
    body["tensors"] = entries
    tmp = manifest.with_suffix(".tmp")
    tmp.write_text(json.dumps(body, indent=1, sort_keys=True))
    os.replace(tmp, manifest)
    return manifest


def read_container(path, filename: str = "manifest.json") -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = path / filename
    if not manifest.exists():
        raise FileNotFoundError(f"no {filename} in {path}")
    meta = json.loads(manifest.read_text())
    tensors = {}
    for name, entry in meta.pop("tensors").items():
        arr = np.fromfile(path / entry["file"], dtype=_LE_F32)
        tensors[name] = arr.reshape(entry["shape"]).astype(np.float32)
    return tensors, meta
