"""Checkpoint directories: ``manifest.json`` plus one raw ``<f8`` file per
parameter. Writes go to a sibling temp directory that is renamed into place,
so an interrupted save never leaves a partial checkpoint behind."""
from __future__ import annotations

import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

from .tensor import Parameter

MANIFEST = "manifest.json"
DTYPE = "<f8"


def _filename(name: str) -> str:
    return name.replace("/", "__") + ".bin"


def save(params: dict[str, Parameter], path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        entries = []
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name].data, dtype=DTYPE)
            fname = _filename(name)
            (tmp / fname).write_bytes(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "dtype": DTYPE, "file": fname})
        manifest = {"format": "dgpvae-checkpoint/1", "parameters": entries}
        if extra:
            manifest["extra"] = extra
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    # a directory cannot be replaced while non-empty: park the old one, swap, then drop it
    backup = None
    if path.exists():
        backup = Path(tempfile.mkdtemp(prefix=f".{path.name}.old.", dir=path.parent))
        os.rename(path, backup / "ck")
    try:
        os.replace(tmp, path)
    except BaseException:
        if backup is not None:
            os.rename(backup / "ck", path)
            shutil.rmtree(backup, ignore_errors=True)
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if backup is not None:
        shutil.rmtree(backup, ignore_errors=True)
    return path


def load(path) -> dict[str, np.ndarray]:
    path = Path(path)
    manifest = json.loads((path / MANIFEST).read_text())
    out = {}
    for entry in manifest["parameters"]:
        raw = (path / entry["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype=entry["dtype"]).astype(np.float64)
        out[entry["name"]] = arr.reshape(entry["shape"])
    return out


def load_into(params: dict[str, Parameter], path) -> None:
    values = load(path)
    missing = sorted(set(params) - set(values))
    if missing:
        raise KeyError(f"checkpoint {path} lacks parameters: {missing}")
    for name, p in params.items():
        if values[name].shape != p.shape:
            raise ValueError(f"checkpoint shape {values[name].shape} != {p.shape} for {name!r}")
        p.data = values[name].copy()
