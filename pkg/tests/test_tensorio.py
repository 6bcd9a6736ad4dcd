"""Tensor container round-trip and corruption handling tests."""

import struct

import numpy as np
import pytest

from conftest import TINY, disk_volume

from sparsect.errors import FormatError, ShapeError
from sparsect.geometry import build_fan_geometry, sparse_angles
from sparsect.projector import Sinogram, Volume
from sparsect.tensorio import (
    load_sinogram,
    load_tensor,
    load_volume,
    save_sinogram,
    save_tensor,
    save_volume,
    sidecar_path,
)


def test_tensor_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.standard_normal((3, 4, 5)).astype(np.float32)
    path = tmp_path / "t.bin"
    save_tensor(path, arr, ("a", "b", "c"), {"note": 7})
    back, labels, meta = load_tensor(path)
    np.testing.assert_array_equal(back, arr)
    assert back.dtype == np.float32
    assert labels == ("a", "b", "c")
    assert meta == {"note": 7}


def test_tensor_without_sidecar(tmp_path):
    path = tmp_path / "t.bin"
    save_tensor(path, np.zeros((2, 2), dtype=np.float32), ("y", "x"))
    assert not sidecar_path(path).exists()
    _, _, meta = load_tensor(path)
    assert meta is None


def test_tensor_label_validation(tmp_path):
    arr = np.zeros((2, 2), dtype=np.float32)
    with pytest.raises(ShapeError):
        save_tensor(tmp_path / "t.bin", arr, ("only-one",))
    with pytest.raises(FormatError):
        save_tensor(tmp_path / "t.bin", arr, ("", "x"))
    with pytest.raises(FormatError):
        save_tensor(tmp_path / "t.bin", arr, ("a" * 17, "x"))


def test_big_endian_payload_is_honored(tmp_path):
    rng = np.random.default_rng(1)
    arr = rng.standard_normal((2, 3)).astype(np.float32)
    path = tmp_path / "t.bin"
    save_tensor(path, arr, ("y", "x"))
    raw = bytearray(path.read_bytes())
    header_end = 20 + 8 * 2 + 16 * 2
    raw[17] = 1  # flip the endianness flag
    raw[header_end:] = arr.astype(">f4").tobytes()
    path.write_bytes(bytes(raw))
    back, _, _ = load_tensor(path)
    np.testing.assert_array_equal(back, arr)
    assert back.dtype == np.float32


def test_tensor_corruption_errors(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    path = tmp_path / "t.bin"
    save_tensor(path, arr, ("y", "x"))
    raw = path.read_bytes()

    def expect_error(data, name):
        p = tmp_path / name
        p.write_bytes(data)
        with pytest.raises(FormatError):
            load_tensor(p)

    expect_error(raw[:12], "short.bin")
    expect_error(b"WRONGMG\0" + raw[8:], "magic.bin")
    expect_error(raw[:8] + struct.pack("<II", 3, 0) + raw[16:], "version.bin")
    expect_error(raw[:16] + bytes([9]) + raw[17:], "dtype.bin")
    expect_error(raw[:17] + bytes([2]) + raw[18:], "endflag.bin")
    expect_error(raw[:-4], "truncated.bin")
    expect_error(raw + b"\x00\x00\x00\x00", "oversized.bin")
    expect_error(raw[:30], "axes.bin")


def test_volume_round_trip(tmp_path, tiny_geometry):
    src = disk_volume(tiny_geometry, 2.0, -3.0, 18.0, n_z=2)
    vol = Volume(src.data.astype(np.float32), tiny_geometry)
    path = tmp_path / "vol.bin"
    save_volume(path, vol, {"case": "disk"})
    back = load_volume(path)
    np.testing.assert_array_equal(back.data, vol.data)
    assert back.geometry == tiny_geometry
    _, _, meta = load_tensor(path)
    assert meta["case"] == "disk"
    assert meta["geometry_digest"] == tiny_geometry.digest()


def test_sinogram_round_trip_rebuilds_angles(tmp_path, tiny_geometry):
    from sparsect.projector import forward_project

    theta = sparse_angles(tiny_geometry, 9)
    raw = forward_project(disk_volume(tiny_geometry, 0.0, 4.0, 16.0), tiny_geometry, theta, workers=1)
    sino = Sinogram(raw.data.astype(np.float32), tiny_geometry, raw.angles)
    path = tmp_path / "sino.bin"
    save_sinogram(path, sino)
    back = load_sinogram(path)
    np.testing.assert_array_equal(back.data, sino.data)
    assert back.geometry == tiny_geometry
    np.testing.assert_array_equal(back.angles.indices, sino.angles.indices)
    assert back.angles.n_views_full == tiny_geometry.n_views_full


def test_wrong_kind_is_rejected(tmp_path, tiny_geometry):
    src = disk_volume(tiny_geometry, 0.0, 0.0, 15.0)
    vol = Volume(src.data.astype(np.float32), tiny_geometry)
    path = tmp_path / "vol.bin"
    save_volume(path, vol)
    with pytest.raises(FormatError):
        load_sinogram(path)
    bare = tmp_path / "bare.bin"
    save_tensor(bare, vol.data, ("energy", "z", "y", "x"))
    with pytest.raises(FormatError):
        load_volume(bare)


def test_volume_geometry_survives_round_trip(tmp_path):
    g = build_fan_geometry(dict(TINY, n_detectors=32))
    vol = Volume(np.zeros((2, 1, g.roi_ny, g.roi_nx), dtype=np.float32), g)
    path = tmp_path / "vol.bin"
    save_volume(path, vol)
    assert load_volume(path).geometry == g


def test_sparse_sinogram_angle_subset(tmp_path, tiny_geometry):
    from sparsect.projector import forward_project

    theta = sparse_angles(tiny_geometry, 9)
    sino = forward_project(disk_volume(tiny_geometry, 0.0, 0.0, 14.0), tiny_geometry, theta, workers=1)
    sino = Sinogram(sino.data.astype(np.float32), tiny_geometry, theta)
    path = tmp_path / "s.bin"
    save_sinogram(path, sino)
    back = load_sinogram(path)
    assert list(back.angles.indices) == list(theta.indices)
