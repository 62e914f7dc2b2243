"""Checkpoint container: JSON manifest followed by raw little-endian arrays.

Layout: 4-byte magic, uint32 format version, uint64 manifest length, the
UTF-8 JSON manifest, then the concatenated array payload. Offsets in the
manifest are relative to the start of the payload. Round-trips are
bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

import numpy as np

from .errors import ConfigError

MAGIC = b"MSQ1"
FORMAT_VERSION = 1

_LE = {"float64": "<f8", "float32": "<f4", "int64": "<i8", "int32": "<i4"}


def save_checkpoint(path: str, arrays: dict[str, np.ndarray], config: dict, meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        key = str(arr.dtype)
        if key not in _LE:
            raise ConfigError(f"checkpoint: unsupported dtype {key} for {name}")
        blob = np.ascontiguousarray(arr, dtype=_LE[key]).tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": key, "offset": offset}
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "meta": meta or {},
        "arrays": entries,
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    header = MAGIC + FORMAT_VERSION.to_bytes(4, "little") + len(mbytes).to_bytes(8, "little")
    # write-temp-then-rename keeps partially written files invisible
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(mbytes)
            for blob in blobs:
                fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def load_checkpoint(path: str):
    """Returns (arrays, config, meta)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ConfigError(f"checkpoint: bad magic in {path}")
    version = int.from_bytes(raw[4:8], "little")
    if version != FORMAT_VERSION:
        raise ConfigError(f"checkpoint: unsupported format version {version}")
    mlen = int.from_bytes(raw[8:16], "little")
    manifest = json.loads(raw[16 : 16 + mlen].decode("utf-8"))
    payload = raw[16 + mlen :]
    arrays = {}
    for e in manifest["arrays"]:
        dt = np.dtype(_LE[e["dtype"]])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = e["offset"]
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=start)
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(e["dtype"], copy=True)
    return arrays, manifest["config"], manifest["meta"]


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
