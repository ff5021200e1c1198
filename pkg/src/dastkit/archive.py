"""Weight persistence: a manifest plus raw little-endian array blocks.

One file holds everything. Layout: 4-byte magic, 4-byte little-endian
manifest length, the JSON manifest, then each array's raw bytes in manifest
order. Round trips are bitwise exact, and loading into a model with different
shapes fails with a full diff instead of silently truncating.
"""

from __future__ import annotations

import json
import struct
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

MAGIC = b"DKWA"
FORMAT_VERSION = 1


class ArchiveError(ValueError):
    """The file is not a valid weight archive or does not fit the model."""


def save_archive(path: str, named_arrays: Sequence[Tuple[str, np.ndarray]],
                 meta: Optional[dict] = None) -> None:
    entries = []
    blocks = []
    for name, arr in named_arrays:
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": le.dtype.str,
        })
        blocks.append(le.tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "precision": entries[0]["dtype"] if entries else "<f4",
        "entries": entries,
    }
    if meta:
        manifest.update(meta)
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for block in blocks:
            fh.write(block)


def load_archive(path: str) -> Tuple[dict, List[np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ArchiveError(f"{path}: not a weight archive (magic {magic!r})")
        (length,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(length))
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ArchiveError(
                f"{path}: unsupported format version {manifest.get('format_version')}")
        arrays = []
        for entry in manifest["entries"]:
            dtype = np.dtype(entry["dtype"])
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            raw = fh.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise ArchiveError(
                    f"{path}: truncated block for entry {entry['name']!r}")
            arrays.append(
                np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).copy())
        if fh.read(1):
            raise ArchiveError(f"{path}: trailing bytes after final block")
    return manifest, arrays


def save_model(path: str, model, meta: Optional[dict] = None) -> None:
    """Persist a model's parameters and buffers with its metadata."""
    info = dict(meta or {})
    arch_tag = getattr(model, "arch_tag", None)
    if arch_tag is not None and "arch_tag" not in info:
        info["arch_tag"] = arch_tag
    save_archive(path, model.named_arrays(), info)


def load_model(path: str, model) -> dict:
    """Load an archive into ``model``; returns the manifest.

    Shape agreement is checked entry by entry before anything is written, so
    a mismatched architecture never ends up half-loaded.
    """
    manifest, arrays = load_archive(path)
    targets = model.named_arrays()
    problems = []
    if len(arrays) != len(targets):
        problems.append(f"entry count: archive {len(arrays)} vs model {len(targets)}")
    for (name, dst), entry, src in zip(targets, manifest["entries"], arrays):
        if tuple(dst.shape) != tuple(src.shape):
            problems.append(
                f"{name}: archive {tuple(src.shape)} vs model {tuple(dst.shape)}")
    if problems:
        raise ArchiveError(
            f"{path} does not fit the model:\n  " + "\n  ".join(problems))
    model.load_arrays(arrays)
    return manifest


def save_state_dict(path: str, arrays: Dict[str, np.ndarray],
                    meta: Optional[dict] = None) -> None:
    """Persist a flat name -> array map (optimizer state, rng state, ...)."""
    save_archive(path, sorted(arrays.items()), meta)


def load_state_dict(path: str) -> Tuple[dict, Dict[str, np.ndarray]]:
    manifest, arrays = load_archive(path)
    names = [e["name"] for e in manifest["entries"]]
    return manifest, dict(zip(names, arrays))
