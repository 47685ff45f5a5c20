"""Checkpoint archive: a directory with ``params.bin`` and ``manifest.json``.

``params.bin`` is the concatenation of every parameter as raw little-endian
float64; the manifest maps each parameter name to its shape, dtype, byte
offset and byte length, and carries the model config.
"""
import json
from pathlib import Path

import numpy as np

FORMAT = "mantis-cd-checkpoint"
DATA_FILE = "params.bin"
MANIFEST = "manifest.json"
_DTYPE = np.dtype("<f8")


def save_checkpoint(path, module, config=None, extra=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {}
    offset = 0
    with open(path / DATA_FILE, "wb") as fh:
        for name, p in module.named_parameters():
            blob = np.ascontiguousarray(p.data, dtype=_DTYPE).tobytes()
            fh.write(blob)
            entries[name] = {
                "shape": list(p.shape),
                "dtype": _DTYPE.str,
                "offset": offset,
                "length": len(blob),
            }
            offset += len(blob)
    manifest = {
        "format": FORMAT,
        "version": 1,
        "data_file": DATA_FILE,
        "parameters": entries,
        "config": config or {},
    }
    if extra:
        manifest["extra"] = extra
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return path


def read_manifest(path):
    manifest = json.loads((Path(path) / MANIFEST).read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path} is not a {FORMAT} archive")
    return manifest


def read_arrays(path):
    path = Path(path)
    manifest = read_manifest(path)
    raw = (path / manifest["data_file"]).read_bytes()
    arrays = {}
    for name, e in manifest["parameters"].items():
        chunk = raw[e["offset"] : e["offset"] + e["length"]]
        arrays[name] = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).astype(np.float64).reshape(e["shape"])
    return arrays, manifest


def load_checkpoint(path, module):
    """Copy archived values into ``module`` in place; returns the manifest."""
    arrays, manifest = read_arrays(path)
    params = dict(module.named_parameters())
    missing = set(params) - set(arrays)
    unexpected = set(arrays) - set(params)
    if missing or unexpected:
        raise KeyError(f"checkpoint mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {arrays[name].shape} vs {p.shape}")
        p.data[...] = arrays[name]
    return manifest
