"""Checkpoint format: ``manifest.json`` + ``params.bin``.

``params.bin`` starts with the 8-byte magic ``CHFGCKPT``, a little-endian
uint32 format version and a uint32 parameter count, followed by every
parameter's values as little-endian float64 in manifest order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ..exceptions import InvalidInputError, MissingInputError

MAGIC = b"CHFGCKPT"
VERSION = 1


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(directory, state: dict, config: dict, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = list(state)
    entries = [{"name": n, "shape": list(np.shape(state[n]))} for n in names]
    manifest = {"format": "chromoforge-checkpoint", "version": VERSION,
                "config": config, "config_hash": config_hash(config),
                "params": entries, "extra": extra or {}}
    with open(directory / "params.bin", "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(names)))
        for n in names:
            fh.write(np.ascontiguousarray(state[n], dtype="<f8").tobytes())
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory):
    """Return ``(state, config, extra)``."""
    directory = Path(directory)
    mf = directory / "manifest.json"
    if not mf.exists():
        raise MissingInputError(f"checkpoint manifest not found: {mf}")
    manifest = json.loads(mf.read_text())
    raw = (directory / "params.bin").read_bytes()
    if raw[:8] != MAGIC:
        raise InvalidInputError(f"{directory}: bad checkpoint magic")
    version, count = struct.unpack("<II", raw[8:16])
    if version != VERSION or count != len(manifest["params"]):
        raise InvalidInputError(f"{directory}: checkpoint header does not match manifest")
    offset = 16
    state = {}
    for e in manifest["params"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=offset)
        state[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
        offset += 8 * n
    if offset != len(raw):
        raise InvalidInputError(f"{directory}: trailing bytes in params.bin")
    return state, manifest["config"], manifest.get("extra", {})
