"""Binary tensor files with JSON sidecar metadata.

Layout (integers little-endian unless the endianness flag says otherwise,
which only ever applies to the payload):

=========  =====================================================
bytes      content
=========  =====================================================
0..7       magic ``b"CTTENSR\\0"``
8..11      format version (uint32, currently 1)
12..15     reserved, zero
16         dtype code (uint8; 1 = float32)
17         payload endianness flag (uint8; 0 little, 1 big)
18..19     number of axes (uint16)
...        per axis: size (uint64)
...        per axis: 16-byte NUL-padded ASCII label
...        payload: raw float32, C order
=========  =====================================================

Writers always emit little-endian payloads; readers honor the flag.  A
sidecar ``<file>.json`` carries provenance (geometry, angle indices, energy
labels, seeds); the array file itself is self-describing for shape and axis
names.  Round-trips are bitwise for float32 data.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError
from .geometry import AngleSet, FanBeamGeometry, build_fan_geometry
from .projector import ENERGY_LABELS, Sinogram, Volume

MAGIC = b"CTTENSR\0"
VERSION = 1
_DTYPE_FLOAT32 = 1
_LABEL_BYTES = 16


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def save_tensor(path, array, axis_labels, meta: dict | None = None) -> None:
    """Write a float32 tensor file (and a sidecar when ``meta`` is given)."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    labels = tuple(axis_labels)
    if len(labels) != arr.ndim:
        raise ShapeError(
            f"need {arr.ndim} axis labels for shape {arr.shape}, got {len(labels)}"
        )
    encoded = []
    for lab in labels:
        raw = str(lab).encode("ascii")
        if not raw or len(raw) > _LABEL_BYTES:
            raise FormatError(f"axis label {lab!r} must be 1..{_LABEL_BYTES} ASCII bytes")
        encoded.append(raw.ljust(_LABEL_BYTES, b"\0"))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, 0))
        fh.write(struct.pack("<BBH", _DTYPE_FLOAT32, 0, arr.ndim))
        for size in arr.shape:
            fh.write(struct.pack("<Q", size))
        for raw in encoded:
            fh.write(raw)
        fh.write(arr.tobytes())
    if meta is not None:
        with open(sidecar_path(path), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_tensor(path):
    """Read a tensor file.

    Returns
    -------
    (array, axis_labels, meta)
        ``array`` is native-order float32, ``axis_labels`` a tuple of str,
        ``meta`` the sidecar dict or None if no sidecar exists.

    Raises
    ------
    FormatError
        On bad magic, version, dtype code, flag, or truncated/oversized data.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 20:
        raise FormatError(f"{path}: file too short for a tensor header")
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}")
    version, _reserved = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported tensor format version {version}")
    dtype_code, endian_flag, ndim = struct.unpack_from("<BBH", raw, 16)
    if dtype_code != _DTYPE_FLOAT32:
        raise FormatError(f"{path}: unsupported dtype code {dtype_code}")
    if endian_flag not in (0, 1):
        raise FormatError(f"{path}: bad endianness flag {endian_flag}")
    offset = 20
    if offset + 8 * ndim + _LABEL_BYTES * ndim > len(raw):
        raise FormatError(f"{path}: truncated axis table")
    shape = struct.unpack_from(f"<{ndim}Q", raw, offset)
    offset += 8 * ndim
    labels = []
    for _ in range(ndim):
        chunk = raw[offset : offset + _LABEL_BYTES]
        try:
            labels.append(chunk.rstrip(b"\0").decode("ascii"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: non-ASCII axis label") from exc
        offset += _LABEL_BYTES
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    nbytes = count * 4
    if len(raw) - offset != nbytes:
        raise FormatError(
            f"{path}: payload is {len(raw) - offset} bytes, expected {nbytes}"
        )
    dt = "<f4" if endian_flag == 0 else ">f4"
    arr = np.frombuffer(raw, dtype=dt, count=count, offset=offset).reshape(shape)
    arr = arr.astype(np.float32, copy=True)
    side = sidecar_path(path)
    meta = None
    if side.exists():
        with open(side, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    return arr, tuple(labels), meta


# -- container wrappers -------------------------------------------------------


def save_volume(path, volume: Volume, extra_meta: dict | None = None) -> None:
    """Write a volume as a tensor file with geometry in the sidecar."""
    meta = {
        "kind": "volume",
        "geometry": volume.geometry.to_dict(),
        "geometry_digest": volume.geometry.digest(),
        "energies": list(ENERGY_LABELS),
    }
    if extra_meta:
        meta.update(extra_meta)
    save_tensor(path, volume.data, ("energy", "z", "y", "x"), meta)


def load_volume(path) -> Volume:
    arr, labels, meta = load_tensor(path)
    if meta is None or meta.get("kind") != "volume":
        raise FormatError(f"{path}: sidecar missing or not a volume")
    if labels != ("energy", "z", "y", "x"):
        raise FormatError(f"{path}: unexpected axis labels {labels}")
    geometry = build_fan_geometry(meta["geometry"])
    return Volume(arr, geometry)


def save_sinogram(path, sinogram: Sinogram, extra_meta: dict | None = None) -> None:
    """Write a sinogram as a tensor file with geometry and angles in the sidecar."""
    meta = {
        "kind": "sinogram",
        "geometry": sinogram.geometry.to_dict(),
        "geometry_digest": sinogram.geometry.digest(),
        "angle_indices": [int(i) for i in sinogram.angles.indices],
        "energies": list(ENERGY_LABELS),
    }
    if extra_meta:
        meta.update(extra_meta)
    save_tensor(path, sinogram.data, ("energy", "theta", "z", "s"), meta)


def load_sinogram(path) -> Sinogram:
    arr, labels, meta = load_tensor(path)
    if meta is None or meta.get("kind") != "sinogram":
        raise FormatError(f"{path}: sidecar missing or not a sinogram")
    if labels != ("energy", "theta", "z", "s"):
        raise FormatError(f"{path}: unexpected axis labels {labels}")
    geometry = build_fan_geometry(meta["geometry"])
    angles = AngleSet(np.asarray(meta["angle_indices"], dtype=np.int64), geometry.n_views_full)
    return Sinogram(arr, geometry, angles)
