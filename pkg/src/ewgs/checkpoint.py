"""Binary checkpoints.

Layout::

    b"EWGSCKPT" | uint32 format version | uint64 metadata length | metadata JSON | npz payload

Arrays live in the npz payload; the JSON metadata mirrors the nested state
with ``{"__array__": key}`` placeholders.  Quantizer scalars (b, l, u, delta,
alpha, mode) are stored as plain JSON numbers.
"""

from __future__ import annotations

import io
import json
import os
import struct
from typing import Any, Optional

import numpy as np

MAGIC = b"EWGSCKPT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def _split(obj: Any, arrays: dict, prefix: str) -> Any:
    if isinstance(obj, np.ndarray):
        key = prefix or "root"
        arrays[key] = obj
        return {"__array__": key}
    if isinstance(obj, dict):
        return {str(k): _split(v, arrays, f"{prefix}/{k}") for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_split(v, arrays, f"{prefix}/{i}") for i, v in enumerate(obj)]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _join(obj: Any, arrays) -> Any:
    if isinstance(obj, dict):
        if set(obj) == {"__array__"}:
            return np.array(arrays[obj["__array__"]])
        return {k: _join(v, arrays) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_join(v, arrays) for v in obj]
    return obj


def write_checkpoint(path: str | os.PathLike, payload: dict) -> None:
    arrays: dict[str, np.ndarray] = {}
    meta = _split(payload, arrays, "")
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def read_checkpoint(path: str | os.PathLike) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: file too short for a checkpoint header")
    magic, version, meta_len = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    start = _HEADER.size
    meta = json.loads(raw[start : start + meta_len].decode("utf-8"))
    with np.load(io.BytesIO(raw[start + meta_len :]), allow_pickle=False) as npz:
        arrays = {k: npz[k] for k in npz.files}
    return _join(meta, arrays)


def save_checkpoint(path, model, trainer=None, config: Optional[dict] = None) -> None:
    """Serialize weights, buffers, quantizer state and (optionally) trainer state."""
    payload = {
        "model_spec": model.spec.to_dict() if model.spec is not None else None,
        "model": model.state_dict(),
        "quantizers": model.quantizer_state(),
        "config": config,
        "trainer": trainer.state_dict() if trainer is not None else None,
    }
    write_checkpoint(path, payload)


def load_checkpoint(path, model, trainer=None) -> dict:
    """Restore ``model`` (and ``trainer``) in place; returns the raw payload."""
    ckpt = read_checkpoint(path)
    model.load_state(ckpt["model"], ckpt["quantizers"])
    if trainer is not None:
        if ckpt.get("trainer") is None:
            raise CheckpointError(f"{path}: no trainer state stored")
        trainer.load_state_dict(ckpt["trainer"])
    return ckpt
