"""Binary checkpoint container.

Layout::

    b"DYNCOEF\\0"                 magic, 8 bytes
    uint32 LE                    format version
    uint64 LE                    header length in bytes
    header                       UTF-8 JSON (sorted keys): config echo + blob table
    blobs                        raw little-endian arrays, in table order

Each blob table entry is ``{"name", "dtype", "shape", "offset", "nbytes"}``
with offsets relative to the start of the blob section.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .dataset import _atomic_write
from .field import AlphaMask
from .model import FieldConfig, RadianceField

MAGIC = b"DYNCOEF\0"
VERSION = 1
_DTYPES = {"f8": "<f8", "u1": "|u1", "i8": "<i8"}


class CheckpointError(RuntimeError):
    """A checkpoint file is truncated, corrupt or from another format version."""


def _encode(blobs: dict[str, np.ndarray], meta: dict) -> bytes:
    table, chunks, offset = [], [], 0
    for name, arr in blobs.items():
        kind = {"f": "f8", "b": "u1", "u": "u1", "i": "i8"}[arr.dtype.kind]
        data = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
        table.append({"name": name, "dtype": kind, "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"meta": meta, "blobs": table}, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)


def _decode(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(raw) < 20 or raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if len(raw) < 20 + hlen:
        raise CheckpointError("checkpoint truncated inside the header")
    try:
        header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    body = raw[20 + hlen:]
    total = sum(e["nbytes"] for e in header["blobs"])
    if len(body) != total:
        raise CheckpointError(f"checkpoint blob section has {len(body)} bytes, expected {total}")
    blobs = {}
    for e in header["blobs"]:
        chunk = body[e["offset"]:e["offset"] + e["nbytes"]]
        blobs[e["name"]] = np.frombuffer(chunk, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return header["meta"], blobs


def checkpoint_bytes(model: RadianceField, optimizer=None, extra: dict | None = None) -> bytes:
    blobs = {f"param/{k}": v.values for k, v in sorted(model.parameters().items())}
    meta = {"config": model.config.to_dict(), "seed": int(model.seed), "extra": extra or {}}
    if model.mask is not None:
        blobs["mask/occupancy"] = model.mask.occupancy.astype(np.uint8)
        meta["mask"] = {"resolution": list(model.mask.resolution), "bounds": model.mask.bounds.tolist(),
                        "threshold": model.mask.threshold}
    if optimizer is not None:
        meta["optimizer"] = optimizer.meta()
        for k, arr in sorted(optimizer.state_arrays().items()):
            blobs[f"optim/{k}"] = arr
    return _encode(blobs, meta)


def save_checkpoint(model: RadianceField, path, optimizer=None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = checkpoint_bytes(model, optimizer, extra)
    _atomic_write(path, lambda fh: fh.write(data))
    return path


def load_checkpoint(path, with_optimizer: bool = False):
    """Rebuild the model (and optionally the optimizer state) from ``path``."""
    meta, blobs = _decode(Path(path).read_bytes())
    config = FieldConfig.from_dict(meta["config"])
    model = RadianceField(config, seed=meta.get("seed", 0))
    params = model.parameters()
    expected = {f"param/{k}" for k in params}
    present = {k for k in blobs if k.startswith("param/")}
    if expected != present:
        raise CheckpointError(f"parameter set mismatch: missing {sorted(expected - present)}, "
                              f"unexpected {sorted(present - expected)}")
    for name, p in params.items():
        arr = blobs[f"param/{name}"]
        if arr.shape != p.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != {p.shape}")
        p.values = arr
    if "mask" in meta:
        m = meta["mask"]
        model.mask = AlphaMask(tuple(m["resolution"]), np.asarray(m["bounds"]),
                               blobs["mask/occupancy"].astype(bool), m["threshold"])
    if not with_optimizer:
        return model
    from .train import Adam

    opt = None
    if "optimizer" in meta:
        state = {k[len("optim/"):]: v for k, v in blobs.items() if k.startswith("optim/")}
        opt = Adam.from_state(meta["optimizer"], state)
    return model, opt
