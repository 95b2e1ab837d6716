"""Checkpoint serialization: versioned header, JSON manifest, float32 blob.

Layout:
    8 bytes   magic b"STSIMCK\\0"
    u32 LE    format version (currently 1)
    u64 LE    manifest length in bytes
    bytes     manifest: compact JSON, keys sorted
    bytes     little-endian float32 values, parameters then slots,
              each at the offset (in floats) its manifest entry declares

The manifest orders entries by name, so serializing the same values twice
yields identical bytes.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .params import ParamSet

MAGIC = b"STSIMCK\x00"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def _manifest_entries(arrays: dict) -> tuple[list, int]:
    entries = []
    offset = 0
    for name in sorted(arrays):
        arr = arrays[name]
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += int(arr.size)
    return entries, offset


def save_params(path, params: ParamSet, meta: "dict | None" = None) -> None:
    param_arrays = {n: t.data for n, t in params.items()}
    p_entries, p_count = _manifest_entries(param_arrays)
    s_entries, s_count = _manifest_entries(params.slots)
    manifest = {
        "dtype": "float32",
        "meta": dict(meta or {}),
        "params": p_entries,
        "slots": s_entries,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = np.empty(p_count + s_count, dtype="<f4")
    for entry in p_entries:
        arr = param_arrays[entry["name"]]
        blob[entry["offset"] : entry["offset"] + arr.size] = arr.ravel().astype("<f4")
    for entry in s_entries:
        arr = params.slots[entry["name"]]
        blob[p_count + entry["offset"] : p_count + entry["offset"] + arr.size] = arr.ravel().astype("<f4")
    # atomic: a crashed writer must never leave a truncated checkpoint behind
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(mbytes)))
        fh.write(mbytes)
        fh.write(blob.tobytes())
    os.replace(tmp, path)


def read_meta(path) -> dict:
    """Checkpoint metadata from the header alone; the value blob stays unread."""
    with open(path, "rb") as fh:
        head = fh.read(20)
        if head[:8] != MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        (version,) = struct.unpack_from("<I", head, 8)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (mlen,) = struct.unpack_from("<Q", head, 12)
        try:
            manifest = json.loads(fh.read(mlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt manifest: {exc}") from None
    return manifest["meta"]


def load_params(path, params: "ParamSet | None" = None) -> tuple[ParamSet, dict]:
    """Read a checkpoint. With an existing ParamSet, shapes must match and
    values are loaded into it; otherwise a fresh set is built."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (mlen,) = struct.unpack_from("<Q", raw, 12)
    try:
        manifest = json.loads(raw[20 : 20 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest: {exc}") from None
    blob = np.frombuffer(raw[20 + mlen :], dtype="<f4")
    p_count = sum(int(np.prod(e["shape"])) if e["shape"] else 1 for e in manifest["params"])
    expected = p_count + sum(
        int(np.prod(e["shape"])) if e["shape"] else 1 for e in manifest["slots"]
    )
    if blob.size != expected:
        raise CheckpointError(f"{path}: blob holds {blob.size} floats, manifest wants {expected}")

    def read_at(entry, base: int) -> np.ndarray:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        return blob[base + entry["offset"] : base + entry["offset"] + size].reshape(shape).copy()

    if params is None:
        params = ParamSet()
        for entry in manifest["params"]:
            params.add(entry["name"], read_at(entry, 0))
    else:
        names = set(params.names())
        loaded = {e["name"] for e in manifest["params"]}
        if names != loaded:
            missing = sorted(names - loaded)
            extra = sorted(loaded - names)
            raise CheckpointError(f"{path}: parameter names differ (missing {missing}, extra {extra})")
        for entry in manifest["params"]:
            t = params[entry["name"]]
            arr = read_at(entry, 0)
            if arr.shape != t.data.shape:
                raise CheckpointError(
                    f"{path}: {entry['name']!r} shape {arr.shape} vs expected {t.data.shape}"
                )
            t.data = arr.astype(t.data.dtype)
    params.slots = {e["name"]: read_at(e, p_count) for e in manifest["slots"]}
    return params, manifest["meta"]
