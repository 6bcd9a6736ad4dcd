"""Single-file binary container for denoiser models.

Layout (all integers little-endian):

=========  ====================================================
bytes      content
=========  ====================================================
0..7       magic ``b"CTMODEL\\0"``
8..11      format version (uint32, currently 1)
12..15     reserved, zero
16..23     header length in bytes (uint64)
24..       UTF-8 JSON header
...        tensor payload: raw float32 little-endian blobs
=========  ====================================================

The header holds the architecture descriptor plus a tensor table listing, in
payload order, every parameter and batch-norm state array (layer index, group,
key, shape).  Order is: layers in graph order; within a layer, parameter keys
sorted, then state keys sorted.  Weights round-trip bitwise.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from ..errors import FormatError
from .model import DenoiserModel, LayerSpec

MAGIC = b"CTMODEL\0"
VERSION = 1


def _tensor_entries(model: DenoiserModel):
    for i in range(len(model.layers)):
        for key in sorted(model.params[i]):
            yield i, "params", key, model.params[i][key]
        for key in sorted(model.state[i]):
            yield i, "state", key, model.state[i][key]


def save_model(path, model: DenoiserModel) -> None:
    """Write a model container; weights are stored as float32."""
    table = []
    blobs = []
    for i, group, key, arr in _tensor_entries(model):
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        if not np.all(np.isfinite(arr32)):
            raise FormatError(f"layer {i} {group}[{key!r}] contains non-finite values")
        table.append({"layer": i, "group": group, "key": key, "shape": list(arr.shape)})
        blobs.append(arr32.tobytes())
    header = json.dumps(
        {"arch": model.arch_descriptor(), "tensors": table}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, 0))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_model(path) -> DenoiserModel:
    """Read a model container written by :func:`save_model`.

    Raises
    ------
    FormatError
        On bad magic, unsupported version, malformed header or truncation.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 24:
        raise FormatError(f"{path}: file too short for a model container")
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}")
    version, _reserved = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported model format version {version}")
    (header_len,) = struct.unpack_from("<Q", raw, 16)
    if 24 + header_len > len(raw):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[24 : 24 + header_len].decode("utf-8"))
        arch = header["arch"]
        table = header["tensors"]
        specs = [LayerSpec(**d) for d in arch["layers"]]
        pad_mode = arch["pad_mode"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed header: {exc}") from exc
    params: list[dict] = [dict() for _ in specs]
    state: list[dict] = [dict() for _ in specs]
    offset = 24 + header_len
    for entry in table:
        try:
            i = int(entry["layer"])
            group = entry["group"]
            key = entry["key"]
            shape = tuple(int(s) for s in entry["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: malformed tensor table: {exc}") from exc
        if not (0 <= i < len(specs)) or group not in ("params", "state"):
            raise FormatError(f"{path}: tensor table references unknown slot")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: truncated tensor payload")
        arr = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape)
        (params if group == "params" else state)[i][key] = arr.copy()
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return DenoiserModel(specs, params, state, pad_mode)
