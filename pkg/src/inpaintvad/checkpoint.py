"""Named-tensor checkpoint container.

Layout: ``b"IVCK"`` magic, little-endian u32 header length, a UTF-8 JSON
header ``{"version", "precision", "hyper", "tensors": [{"name", "shape",
"offset"}]}``, then raw little-endian float data (float32, or float64 for
checkpoints written from a 64-bit run). Offsets are relative to the start
of the data block.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import PRECISIONS, ModelHyper, ModelParameters, parameter_shapes
from .tensor import Tensor

MAGIC = b"IVCK"
VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is unreadable or does not match expectations."""


def dumps(params: ModelParameters) -> bytes:
    precision = params.hyper.precision
    dtype = np.dtype(PRECISIONS[precision]).newbyteorder("<")
    directory, blobs, offset = [], [], 0
    for name, t in params:
        blob = np.ascontiguousarray(t.data, dtype=dtype).tobytes()
        directory.append({"name": name, "shape": list(t.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"version": VERSION, "precision": precision,
                         "hyper": params.hyper.to_dict(), "tensors": directory},
                        sort_keys=True).encode()
    return MAGIC + struct.pack("<I", len(header)) + header + b"".join(blobs)


def save_checkpoint(params: ModelParameters, path) -> None:
    Path(path).write_bytes(dumps(params))


def loads(raw: bytes, precision: str | None = None, source: str = "<bytes>") -> ModelParameters:
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (field 'magic')")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    if len(raw) < 8 + hlen:
        raise CheckpointError(f"{source}: truncated header (field 'header_length')")
    try:
        header = json.loads(raw[8:8 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt header (field 'header'): {exc}") from None
    for key in ("version", "precision", "hyper", "tensors"):
        if key not in header:
            raise CheckpointError(f"{source}: header lacks field '{key}'")
    if header["version"] != VERSION:
        raise CheckpointError(f"{source}: version {header['version']} unsupported (field 'version')")
    stored = header["precision"]
    if stored not in PRECISIONS:
        raise CheckpointError(f"{source}: unknown precision {stored!r} (field 'precision')")
    if precision is not None and precision != stored:
        raise CheckpointError(f"{source}: checkpoint precision is {stored}, requested {precision} "
                              f"(field 'precision')")
    try:
        hyper = ModelHyper(**header["hyper"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{source}: bad hyperparameters (field 'hyper'): {exc}") from None
    if hyper.precision != stored:
        raise CheckpointError(f"{source}: hyper precision disagrees with header (field 'precision')")
    expected = parameter_shapes(hyper)
    dtype = np.dtype(PRECISIONS[stored]).newbyteorder("<")
    data = memoryview(raw)[8 + hlen:]
    names = [entry.get("name") for entry in header["tensors"]]
    if names != list(expected):
        raise CheckpointError(f"{source}: tensor directory does not match hyperparameters (field 'tensors')")
    tensors, end = {}, 0
    for entry in header["tensors"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        if shape != expected[name]:
            raise CheckpointError(f"{source}: tensor {name} has shape {shape}, expected {expected[name]} "
                                  f"(field 'tensors.{name}.shape')")
        nbytes = int(np.prod(shape)) * dtype.itemsize
        if offset != end or offset + nbytes > len(data):
            raise CheckpointError(f"{source}: tensor {name} data out of range (field 'tensors.{name}.offset')")
        arr = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape)), offset=offset)
        tensors[name] = Tensor(arr.astype(PRECISIONS[stored]).reshape(shape), requires_grad=True)
        end = offset + nbytes
    if end != len(data):
        raise CheckpointError(f"{source}: {len(data) - end} trailing bytes after tensor data")
    return ModelParameters(hyper, tensors)


def load_checkpoint(path, precision: str | None = None) -> ModelParameters:
    """Load parameters; pass ``precision`` to insist on a numeric mode."""
    return loads(Path(path).read_bytes(), precision, str(path))
