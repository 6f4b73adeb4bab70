"""Versioned checkpoint container.

Layout (all little-endian)::

    8 bytes   magic b"TASNETCK"
    uint32    format version
    uint32    header length H
    H bytes   UTF-8 JSON header (sorted keys)
    ...       raw arrays, concatenated in header order

The header holds the ModelConfig, the parameter table (name, shape, dtype)
in ``SeparationModel.named_parameters()`` order, and optionally the optimizer
scalars plus the names of its first/second moment arrays, which follow the
parameters in the same order. Arrays are float32 unless the model runs in
64-bit mode.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, SeparationModel

MAGIC = b"TASNETCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: SeparationModel
    optimizer: dict | None
    meta: dict


def _dtype_name(arr: np.ndarray) -> str:
    return "<f8" if arr.dtype == np.float64 else "<f4"


def save_checkpoint(path: str | os.PathLike, model: SeparationModel, optimizer: dict | None = None,
                    meta: dict | None = None) -> None:
    """``optimizer``: ``{"scalars": {...}, "m": {name: array}, "v": {name: array}}``."""
    arrays = []
    table = []
    for name, p in model.named_parameters():
        dt = _dtype_name(p.data)
        table.append({"name": name, "shape": list(p.shape), "dtype": dt})
        arrays.append(np.ascontiguousarray(p.data, dtype=dt))
    header = {"format_version": FORMAT_VERSION, "config": model.config.to_dict(), "params": table,
              "meta": meta or {}, "optimizer": None}
    if optimizer is not None:
        header["optimizer"] = {"scalars": optimizer["scalars"]}
        for key in ("m", "v"):
            for entry in table:
                arr = optimizer[key][entry["name"]]
                arrays.append(np.ascontiguousarray(arr, dtype=entry["dtype"]))
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(blob)) + blob)
        for arr in arrays:
            f.write(arr.tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    cfg = ModelConfig.from_dict(header["config"])
    table = header["params"]
    dtypes = {e["dtype"] for e in table}
    dtype = np.float64 if dtypes == {"<f8"} else np.float32
    model = SeparationModel(cfg, dtype=dtype)
    expected = [(n, list(p.shape)) for n, p in model.named_parameters()]
    found = [(e["name"], e["shape"]) for e in table]
    if expected != found:
        for (en, es), (fn, fs) in zip(expected, found):
            if en != fn or es != fs:
                raise CheckpointError(f"{path}: parameter {fn} {fs} does not match config ({en} {es})")
        raise CheckpointError(f"{path}: {len(found)} parameters stored, config needs {len(expected)}")

    pos = 16 + hlen

    def take(entry):
        nonlocal pos
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = pos + count * dt.itemsize
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated while reading {entry['name']}")
        arr = np.frombuffer(blob[pos:end], dtype=dt).reshape(entry["shape"]).astype(dt.newbyteorder("="))
        pos = end
        return arr

    for (name, p), entry in zip(model.named_parameters(), table):
        p.data = take(entry)
    optimizer = None
    if header.get("optimizer") is not None:
        optimizer = {"scalars": header["optimizer"]["scalars"]}
        for key in ("m", "v"):
            optimizer[key] = {e["name"]: take(e) for e in table}
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return Checkpoint(model, optimizer, header.get("meta", {}))
