"""Checkpoint files: a plain-text JSON manifest followed by a raw payload of
little-endian float64 values.

Layout::

    FEDSLR-CHECKPOINT
    manifest-bytes <n>
    <n bytes of JSON manifest>
    <payload>

The manifest lists every stored ParamSet with its layer kinds, and for each
layer the byte offset and length inside the payload.
"""

import json
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .reshape import ParamSet, kind_from_dict, kind_to_dict

MAGIC = b"FEDSLR-CHECKPOINT\n"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


def checkpoint_save(path, params: Dict[str, ParamSet], meta: dict) -> None:
    """Write ``params`` (name -> ParamSet) plus JSON-serializable ``meta``."""
    entries, chunks, offset = [], [], 0
    for name, ps in params.items():
        layers = []
        for kind, v in zip(ps.kinds, ps.values):
            blob = np.ascontiguousarray(v, dtype="<f8").tobytes()
            layers.append({**kind_to_dict(kind), "offset": offset, "nbytes": len(blob)})
            chunks.append(blob)
            offset += len(blob)
        entries.append({"name": name, "layers": layers})
    manifest = {"version": VERSION, "meta": meta, "entries": entries, "payload_bytes": offset}
    text = json.dumps(manifest, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"manifest-bytes {len(text)}\n".encode())
        fh.write(text)
        for blob in chunks:
            fh.write(blob)
    tmp.replace(path)


def checkpoint_load(path) -> Tuple[Dict[str, ParamSet], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CorruptCheckpointError(f"{path}: missing checkpoint header")
    pos = len(MAGIC)
    nl = raw.find(b"\n", pos)
    header = raw[pos:nl].decode(errors="replace") if nl >= 0 else ""
    if not header.startswith("manifest-bytes "):
        raise CorruptCheckpointError(f"{path}: malformed manifest length line")
    try:
        n = int(header.split()[1])
    except (IndexError, ValueError):
        raise CorruptCheckpointError(f"{path}: malformed manifest length line") from None
    start = nl + 1
    if start + n > len(raw):
        raise CorruptCheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[start:start + n])
    except json.JSONDecodeError as exc:
        raise CorruptCheckpointError(f"{path}: unreadable manifest ({exc.msg})") from None
    version = manifest.get("version")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: checkpoint version {version} is not supported "
                                      f"(expected {VERSION})")
    payload = raw[start + n:]
    if len(payload) != manifest["payload_bytes"]:
        raise CorruptCheckpointError(f"{path}: payload has {len(payload)} bytes, manifest "
                                     f"declares {manifest['payload_bytes']}")
    params = {}
    for entry in manifest["entries"]:
        kinds, values = [], []
        for layer in entry["layers"]:
            layer = dict(layer)
            off, nbytes = layer.pop("offset"), layer.pop("nbytes")
            kind = kind_from_dict(layer)
            if nbytes != kind.size * 8 or off + nbytes > len(payload):
                raise CorruptCheckpointError(f"{path}: layer of {entry['name']} does not fit its shape")
            kinds.append(kind)
            values.append(np.frombuffer(payload, dtype="<f8", count=kind.size, offset=off)
                          .astype(np.float64))
        params[entry["name"]] = ParamSet(kinds, values)
    return params, manifest["meta"]
