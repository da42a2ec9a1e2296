"""Binary checkpoint container: JSON manifest + named float32 arrays.

Layout:
    8 bytes   magic ``URCKPT01``
    4 bytes   little-endian uint32: manifest length in bytes
    manifest  UTF-8 JSON: {"meta": {...}, "sections": {section: {name: spec}}}
    data      concatenated raw arrays, little-endian float32, C order

Array specs carry shape, byte offset and length so sections can be read
selectively. Everything non-numeric (ids, config, hashes) lives in meta.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"URCKPT01"

Sections = dict[str, dict[str, np.ndarray]]


def save_checkpoint(path: str | Path, sections: Mapping[str, Mapping[str, np.ndarray]], meta: dict) -> None:
    manifest: dict = {"meta": meta, "sections": {}}
    blobs: list[bytes] = []
    offset = 0
    for section in sorted(sections):
        entry: dict = {}
        for name in sorted(sections[section]):
            arr = np.ascontiguousarray(np.asarray(sections[section][name], dtype=np.float64))
            data = arr.astype("<f4").tobytes()
            entry[name] = {"shape": list(arr.shape), "offset": offset, "nbytes": len(data)}
            blobs.append(data)
            offset += len(data)
        manifest["sections"][section] = entry
    payload = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[Sections, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (length,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(length).decode("utf-8"))
        data = fh.read()
    sections: Sections = {}
    for section, entries in manifest["sections"].items():
        out = {}
        for name, spec in entries.items():
            start, n = spec["offset"], spec["nbytes"]
            arr = np.frombuffer(data[start : start + n], dtype="<f4")
            out[name] = arr.reshape(spec["shape"]).copy()
        sections[section] = out
    return sections, manifest["meta"]
