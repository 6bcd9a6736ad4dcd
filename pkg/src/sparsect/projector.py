"""Exact-intersection fan-beam projector and its matched adjoint.

The forward operator computes line integrals (Siddon traversal: every
ray-pixel intersection length contributes exactly once); the backprojector
scatters with identical traversal code, so the pair is adjoint up to
floating-point rounding by construction.

Data containers:

* :class:`Volume` holds attenuation maps indexed ``(energy, z, y, x)``.
* :class:`Sinogram` holds projection data indexed ``(energy, view, z, s)``.

Both carry the geometry they were produced under; the energy axis always has
exactly two channels, low kVp first.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ShapeError, ConfigError
from .geometry import AngleSet, FanBeamGeometry

ENERGY_LABELS = ("80kVp", "120kVp")


@dataclass(frozen=True)
class Volume:
    """Dual-energy attenuation volume of shape (2, n_z, roi_ny, roi_nx).

    Row index 0 is the smallest y coordinate (images are exported flipped so
    +y points up on screen).  Values are attenuation in 1/mm.
    """

    data: np.ndarray
    geometry: FanBeamGeometry

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 4:
            raise ShapeError(f"volume must be 4D (energy, z, y, x), got shape {arr.shape}")
        if arr.shape[0] != 2:
            raise ShapeError(f"volume needs exactly 2 energy channels, got {arr.shape[0]}")
        if arr.shape[2] != self.geometry.roi_ny or arr.shape[3] != self.geometry.roi_nx:
            raise ShapeError(
                f"volume plane {arr.shape[2]}x{arr.shape[3]} does not match ROI "
                f"{self.geometry.roi_ny}x{self.geometry.roi_nx}"
            )
        if not np.all(np.isfinite(arr)):
            raise ShapeError("volume contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def n_z(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Sinogram:
    """Dual-energy projection data of shape (2, n_views, n_z, n_detectors)."""

    data: np.ndarray
    geometry: FanBeamGeometry
    angles: AngleSet

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 4:
            raise ShapeError(f"sinogram must be 4D (energy, view, z, s), got shape {arr.shape}")
        if arr.shape[0] != 2:
            raise ShapeError(f"sinogram needs exactly 2 energy channels, got {arr.shape[0]}")
        if self.angles.n_views_full != self.geometry.n_views_full:
            raise ShapeError(
                "angle set refers to a different full view grid than the geometry"
            )
        if arr.shape[1] != len(self.angles):
            raise ShapeError(
                f"sinogram has {arr.shape[1]} views but the angle set has {len(self.angles)}"
            )
        if arr.shape[3] != self.geometry.n_detectors:
            raise ShapeError(
                f"sinogram has {arr.shape[3]} channels, geometry has {self.geometry.n_detectors}"
            )
        if not np.all(np.isfinite(arr)):
            raise ShapeError("sinogram contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def n_z(self) -> int:
        return self.data.shape[2]

    @property
    def n_views(self) -> int:
        return self.data.shape[1]


# -- ray tracing kernels ------------------------------------------------------


@njit(cache=True, nogil=True)
def _ray_trace(img, nx, ny, x0, y0, px, ax, ay, bx, by, scatter, val):
    """Traverse the segment (ax,ay)->(bx,by) through the pixel grid.

    In gather mode (scatter=False) returns the line integral of ``img``.
    In scatter mode adds ``val * segment_length`` into every crossed pixel of
    ``img`` and returns 0.  Both modes share the exact same traversal, which
    makes gather and scatter an adjoint pair up to rounding.
    """
    dx = bx - ax
    dy = by - ay
    length = math.sqrt(dx * dx + dy * dy)
    if length <= 0.0:
        return 0.0

    xmax = x0 + nx * px
    ymax = y0 + ny * px
    amin = 0.0
    amax = 1.0
    if dx != 0.0:
        a1 = (x0 - ax) / dx
        a2 = (xmax - ax) / dx
        if a1 > a2:
            a1, a2 = a2, a1
        if a1 > amin:
            amin = a1
        if a2 < amax:
            amax = a2
    elif ax < x0 or ax > xmax:
        return 0.0
    if dy != 0.0:
        a1 = (y0 - ay) / dy
        a2 = (ymax - ay) / dy
        if a1 > a2:
            a1, a2 = a2, a1
        if a1 > amin:
            amin = a1
        if a2 < amax:
            amax = a2
    elif ay < y0 or ay > ymax:
        return 0.0
    if amin >= amax:
        return 0.0

    # Starting cell (clamped; boundary hits are resolved by the loop guards).
    i = int(math.floor((ax + amin * dx - x0) / px))
    j = int(math.floor((ay + amin * dy - y0) / px))
    if i < 0:
        i = 0
    elif i > nx - 1:
        i = nx - 1
    if j < 0:
        j = 0
    elif j > ny - 1:
        j = ny - 1

    big = 1.0e308
    if dx > 0.0:
        istep = 1
        a_x = (x0 + (i + 1) * px - ax) / dx
        da_x = px / dx
    elif dx < 0.0:
        istep = -1
        a_x = (x0 + i * px - ax) / dx
        da_x = -px / dx
    else:
        istep = 0
        a_x = big
        da_x = big
    if dy > 0.0:
        jstep = 1
        a_y = (y0 + (j + 1) * px - ay) / dy
        da_y = px / dy
    elif dy < 0.0:
        jstep = -1
        a_y = (y0 + j * px - ay) / dy
        da_y = -px / dy
    else:
        jstep = 0
        a_y = big
        da_y = big

    acc = 0.0
    a = amin
    while a < amax - 1.0e-12:
        take_x = a_x <= a_y
        a_next = a_x if take_x else a_y
        if a_next > amax:
            a_next = amax
        seg = (a_next - a) * length
        if seg > 0.0 and 0 <= i < nx and 0 <= j < ny:
            if scatter:
                img[j, i] += val * seg
            else:
                acc += img[j, i] * seg
        a = a_next
        if a_next >= amax:
            break
        if take_x:
            i += istep
            a_x += da_x
        else:
            j += jstep
            a_y += da_y
    return acc


@njit(cache=True, nogil=True)
def _forward_slice(img, betas, det_u, dso, dsd, x0, y0, px):
    ny, nx = img.shape
    out = np.zeros((betas.size, det_u.size), dtype=np.float64)
    for v in range(betas.size):
        cb = math.cos(betas[v])
        sb = math.sin(betas[v])
        sx = -dso * sb
        sy = dso * cb
        cxd = (dsd - dso) * sb
        cyd = -(dsd - dso) * cb
        for s in range(det_u.size):
            ex = cxd + det_u[s] * cb
            ey = cyd + det_u[s] * sb
            out[v, s] = _ray_trace(img, nx, ny, x0, y0, px, sx, sy, ex, ey, False, 0.0)
    return out


@njit(cache=True, nogil=True)
def _back_slice(rows, betas, det_u, dso, dsd, x0, y0, px, ny, nx):
    img = np.zeros((ny, nx), dtype=np.float64)
    for v in range(betas.size):
        cb = math.cos(betas[v])
        sb = math.sin(betas[v])
        sx = -dso * sb
        sy = dso * cb
        cxd = (dsd - dso) * sb
        cyd = -(dsd - dso) * cb
        for s in range(det_u.size):
            ex = cxd + det_u[s] * cb
            ey = cyd + det_u[s] * sb
            _ray_trace(img, nx, ny, x0, y0, px, sx, sy, ex, ey, True, rows[v, s])
    return img


def _resolve_workers(workers) -> int:
    if workers is None:
        return os.cpu_count() or 1
    if not isinstance(workers, int) or workers < 1:
        raise ConfigError(f"workers must be a positive integer or None, got {workers!r}")
    return workers


def _run_tasks(tasks, fn, workers):
    n = _resolve_workers(workers)
    if n <= 1 or len(tasks) <= 1:
        for t in tasks:
            fn(t)
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            list(pool.map(fn, tasks))


# -- public operators ---------------------------------------------------------


def forward_project(
    volume: Volume,
    geometry: FanBeamGeometry,
    angles: AngleSet,
    workers: int | None = None,
) -> Sinogram:
    """Line integrals of ``volume`` at the selected view angles.

    Applied independently per energy channel and per z slice.  The result is
    deterministic and independent of the worker count (each slice is computed
    serially by one task).

    Raises
    ------
    ShapeError
        If the volume's geometry differs from ``geometry`` or the angle set
        refers to a different full view grid.
    """
    if volume.geometry != geometry:
        raise ShapeError("volume geometry does not match the projector geometry")
    if angles.n_views_full != geometry.n_views_full:
        raise ShapeError("angle set refers to a different full view grid than the geometry")
    betas = angles.angles_rad()
    det_u = geometry.detector_offsets_mm()
    x0 = -geometry.roi_half_x_mm
    y0 = -geometry.roi_half_y_mm
    n_z = volume.n_z
    out = np.zeros((2, len(angles), n_z, geometry.n_detectors), dtype=np.float64)
    src = np.ascontiguousarray(volume.data, dtype=np.float64)

    def task(ez):
        e, z = ez
        out[e, :, z, :] = _forward_slice(
            src[e, z], betas, det_u, geometry.dso_mm, geometry.dsd_mm, x0, y0, geometry.pixel_mm
        )

    _run_tasks([(e, z) for e in range(2) for z in range(n_z)], task, workers)
    return Sinogram(out, geometry, angles)


def back_project(sinogram: Sinogram, geometry: FanBeamGeometry, workers: int | None = None) -> Volume:
    """Exact adjoint of :func:`forward_project` on the sinogram's angle set.

    This is the unweighted transpose (no ramp filter, no angular weights);
    analytic reconstruction lives in :mod:`sparsect.analytic`.
    """
    if sinogram.geometry != geometry:
        raise ShapeError("sinogram geometry does not match the projector geometry")
    betas = sinogram.angles.angles_rad()
    det_u = geometry.detector_offsets_mm()
    x0 = -geometry.roi_half_x_mm
    y0 = -geometry.roi_half_y_mm
    n_z = sinogram.n_z
    out = np.zeros((2, n_z, geometry.roi_ny, geometry.roi_nx), dtype=np.float64)
    src = np.ascontiguousarray(sinogram.data, dtype=np.float64)

    def task(ez):
        e, z = ez
        out[e, z] = _back_slice(
            src[e, :, z, :],
            betas,
            det_u,
            geometry.dso_mm,
            geometry.dsd_mm,
            x0,
            y0,
            geometry.pixel_mm,
            geometry.roi_ny,
            geometry.roi_nx,
        )

    _run_tasks([(e, z) for e in range(2) for z in range(n_z)], task, workers)
    return Volume(out, geometry)


def sample_views(sinogram: Sinogram, angles: AngleSet) -> Sinogram:
    """Restrict a sinogram to a subset of its angle set.

    Raises
    ------
    ShapeError
        If ``angles`` is not a subset of the sinogram's angles.
    """
    if angles.n_views_full != sinogram.angles.n_views_full:
        raise ShapeError("angle set refers to a different full view grid")
    have = sinogram.angles.indices
    pos = np.searchsorted(have, angles.indices)
    if np.any(pos >= have.size) or np.any(have[np.minimum(pos, have.size - 1)] != angles.indices):
        raise ShapeError("requested angles are not all present in the sinogram")
    return Sinogram(sinogram.data[:, pos, :, :], sinogram.geometry, angles)


def zero_pad_views(sinogram: Sinogram, geometry: FanBeamGeometry) -> Sinogram:
    """Embed a sparse sinogram into the full view grid, zeros elsewhere."""
    if sinogram.geometry != geometry:
        raise ShapeError("sinogram geometry does not match")
    full = AngleSet.full(geometry)
    out = np.zeros(
        (2, geometry.n_views_full, sinogram.n_z, geometry.n_detectors), dtype=np.float64
    )
    out[:, sinogram.angles.indices, :, :] = sinogram.data
    return Sinogram(out, geometry, full)
