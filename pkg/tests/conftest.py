"""Shared fixtures: small geometries and canonical phantoms sized for speed."""

import numpy as np
import pytest

from sparsect.geometry import AngleSet, FanBeamGeometry, build_fan_geometry
from sparsect.projector import Volume, forward_project, sample_views

TINY = {
    "dsd_mm": 600.0,
    "dso_mm": 350.0,
    "n_detectors": 64,
    "det_pitch_mm": 4.0,
    "roi_nx": 48,
    "roi_ny": 48,
    "pixel_mm": 2.0,
    "n_views_full": 36,
}


@pytest.fixture(scope="session")
def tiny_geometry() -> FanBeamGeometry:
    """Small fan geometry whose field of view covers the ROI circumradius."""
    g = build_fan_geometry(TINY)
    assert g.fov_radius_mm >= g.roi_circumradius_mm
    return g


@pytest.fixture(scope="session")
def desk_geometry() -> FanBeamGeometry:
    from sparsect.presets import DESK_GEOMETRY

    return build_fan_geometry(DESK_GEOMETRY)


def disk_image(geometry: FanBeamGeometry, cx_mm: float, cy_mm: float, r_mm: float) -> np.ndarray:
    """Binary disk on the pixel grid (no anti-aliasing; oracle-simple)."""
    ny, nx = geometry.roi_ny, geometry.roi_nx
    xs = -geometry.roi_half_x_mm + (np.arange(nx) + 0.5) * geometry.pixel_mm
    ys = -geometry.roi_half_y_mm + (np.arange(ny) + 0.5) * geometry.pixel_mm
    xg, yg = np.meshgrid(xs, ys)
    return ((xg - cx_mm) ** 2 + (yg - cy_mm) ** 2 <= r_mm**2).astype(np.float64)


def disk_volume(geometry, cx_mm=0.0, cy_mm=0.0, r_mm=None, mu=(0.02, 0.015), n_z=1) -> Volume:
    if r_mm is None:
        r_mm = 0.6 * geometry.roi_half_x_mm
    img = disk_image(geometry, cx_mm, cy_mm, r_mm)
    data = np.stack([np.repeat(img[None], n_z, axis=0) * m for m in mu])
    return Volume(data, geometry)


def sino_nmse(recon: Volume, measured) -> np.ndarray:
    """Per-energy sinogram-domain NMSE of a reconstruction vs measured views."""
    g = measured.geometry
    dense = forward_project(recon, g, AngleSet.full(g), workers=1)
    resampled = sample_views(dense, measured.angles)
    diff = resampled.data - measured.data
    return np.sum(diff * diff, axis=(1, 2, 3)) / np.sum(measured.data**2, axis=(1, 2, 3))


def gaussian_volume(geometry, cx_mm=0.0, cy_mm=0.0, sigma_mm=25.0, amp=(0.02, 0.016), n_z=1) -> Volume:
    """Smooth blob; the right-inverse property is tightest on these."""
    ny, nx = geometry.roi_ny, geometry.roi_nx
    xs = -geometry.roi_half_x_mm + (np.arange(nx) + 0.5) * geometry.pixel_mm
    ys = -geometry.roi_half_y_mm + (np.arange(ny) + 0.5) * geometry.pixel_mm
    xg, yg = np.meshgrid(xs, ys)
    img = np.exp(-((xg - cx_mm) ** 2 + (yg - cy_mm) ** 2) / (2.0 * sigma_mm**2))
    data = np.stack([np.repeat(img[None], n_z, axis=0) * a for a in amp])
    return Volume(data, geometry)
