"""Single-file checkpoint archive.

Layout::

    b"AVRFNCKP"                  magic, 8 bytes
    uint32 little-endian         header length in bytes
    header                       UTF-8 JSON, sorted keys, no whitespace
    payload                      named arrays as raw little-endian float64,
                                 in the order listed by header["arrays"]

The header carries the format version, the model spec, optimiser state
scalars, training counters, RNG seeds, an index of ``{name, shape, offset}``
entries and the SHA-256 of the payload.  Serialisation is canonical, so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path


import numpy as np

MAGIC = b"AVRFNCKP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    spec: dict
    params: "OrderedDict[str, np.ndarray]"
    optim: dict = field(default_factory=dict)
    optim_arrays: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    epoch: int = 0
    step: int = 0
    rng: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _arrays(ckpt: Checkpoint) -> "OrderedDict[str, np.ndarray]":
    out = OrderedDict()
    for k, v in ckpt.params.items():
        out[f"param/{k}"] = v
    for k, v in ckpt.optim_arrays.items():
        out[f"optim/{k}"] = v
    return out


def dumps(ckpt: Checkpoint) -> bytes:
    index, chunks, offset = [], [], 0
    for name, arr in _arrays(ckpt).items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "version": ckpt.version,
        "spec": ckpt.spec,
        "optim": ckpt.optim,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "rng": ckpt.rng,
        "extra": ckpt.extra,
        "arrays": index,
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hb)) + hb + payload


def loads(blob: bytes) -> Checkpoint:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<I", blob[8:12])
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    payload = blob[12 + hlen:]
    if len(payload) != header["payload_bytes"] or hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError("checkpoint payload is truncated or corrupt (hash mismatch)")
    params, optim_arrays = OrderedDict(), OrderedDict()
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"]).reshape(shape).astype(np.float64)
        kind, name = entry["name"].split("/", 1)
        (params if kind == "param" else optim_arrays)[name] = arr
    return Checkpoint(spec=header["spec"], params=params, optim=header["optim"], optim_arrays=optim_arrays,
                      epoch=header["epoch"], step=header["step"], rng=header["rng"], extra=header["extra"],
                      version=header["version"])


def save(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())


def model_from_checkpoint(ckpt: Checkpoint):
    from .model import ModelSpec, build_model

    model = build_model(ModelSpec.from_dict(ckpt.spec))
    model.load_state_dict(ckpt.params)
    return model
