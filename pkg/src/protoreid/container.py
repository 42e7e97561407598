"""Array container: ``manifest.json`` plus one raw little-endian binary per array.

Used for checkpoints and exported feature matrices. Float arrays are stored as
``<f4`` and integer arrays as ``<i4``, row-major.
"""
from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

FORMAT = "protoreid-container"
VERSION = 1
DTYPES = {"float32": "<f4", "int32": "<i4"}


class ContainerError(Exception):
    pass


def _file_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name) + ".bin"


def save_container(path, arrays: dict[str, np.ndarray], meta: dict | None = None, kind: str = "arrays") -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    used = set()
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if np.issubdtype(arr.dtype, np.floating):
            dtype = "float32"
        elif np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
            dtype = "int32"
            if arr.size and (arr.min() < np.iinfo(np.int32).min or arr.max() > np.iinfo(np.int32).max):
                raise ContainerError(f"array {name!r} does not fit in int32")
        else:
            raise ContainerError(f"array {name!r} has unsupported dtype {arr.dtype}")
        fname = _file_name(name)
        if fname in used:
            raise ContainerError(f"array name {name!r} collides with another after sanitizing")
        used.add(fname)
        data = np.ascontiguousarray(arr, dtype=DTYPES[dtype])
        (path / fname).write_bytes(data.tobytes(order="C"))
        entries.append({"name": name, "file": fname, "shape": list(arr.shape), "dtype": dtype})
    manifest = {"format": FORMAT, "version": VERSION, "kind": kind, "arrays": entries, "meta": meta or {}}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_container(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise ContainerError(f"missing manifest.json in {path}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise ContainerError(f"corrupted manifest in {path}: {e}") from e
    for key in ("format", "version", "kind", "arrays", "meta"):
        if key not in manifest:
            raise ContainerError(f"manifest field {key!r} is missing")
    if manifest["format"] != FORMAT:
        raise ContainerError(f"manifest field 'format' is {manifest['format']!r}, expected {FORMAT!r}")
    if manifest["version"] != VERSION:
        raise ContainerError(f"manifest field 'version' is {manifest['version']!r}, expected {VERSION}")
    if kind is not None and manifest["kind"] != kind:
        raise ContainerError(f"manifest field 'kind' is {manifest['kind']!r}, expected {kind!r}")
    arrays = {}
    for entry in manifest["arrays"]:
        name = entry.get("name", "?")
        for key in ("name", "file", "shape", "dtype"):
            if key not in entry:
                raise ContainerError(f"array entry {name!r} lacks field {key!r}")
        if entry["dtype"] not in DTYPES:
            raise ContainerError(f"array {name!r} has unknown dtype {entry['dtype']!r}")
        fpath = path / entry["file"]
        if not fpath.is_file():
            raise ContainerError(f"array {name!r}: file {entry['file']} is missing")
        raw = fpath.read_bytes()
        dt = np.dtype(DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if len(raw) != count * dt.itemsize:
            raise ContainerError(f"array {name!r}: expected {count * dt.itemsize} bytes, found {len(raw)}")
        arrays[name] = np.frombuffer(raw, dtype=dt).reshape(entry["shape"]).copy()
    return arrays, manifest["meta"]


def save_features(path, features, pids, camids, meta: dict | None = None) -> Path:
    return save_container(
        path,
        {"features": np.asarray(features, dtype=np.float32), "pids": np.asarray(pids), "camids": np.asarray(camids)},
        meta,
        kind="features",
    )


def load_features(path):
    arrays, meta = load_container(path, kind="features")
    for name in ("features", "pids", "camids"):
        if name not in arrays:
            raise ContainerError(f"feature container lacks array {name!r}")
    return arrays["features"], arrays["pids"], arrays["camids"], meta
