"""Fan-beam acquisition geometry, view selection and stationary-ring rebinning.

Conventions used throughout the package:

* The reconstruction plane is the (x, y) plane in millimetres with the origin
  at the rotation isocenter.  For a view angle ``beta`` the source sits at
  ``(-dso*sin(beta), dso*cos(beta))`` and the flat detector is centered at
  ``((dsd-dso)*sin(beta), -(dsd-dso)*cos(beta))`` with its axis along
  ``(cos(beta), sin(beta))``.
* Detector channel ``s`` is at signed offset ``(s - (n_detectors-1)/2) *
  det_pitch_mm`` from the detector center.
* View angles are ``2*pi*k / n_views_full`` for ``k = 0 .. n_views_full-1``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

# Published constants of the stationary dual-energy baggage scanner that the
# default geometry mirrors.
PAPER_SCANNER = {
    "dsd_mm": 1202.6,
    "dso_mm": 648.2,
    "n_detectors": 384,
    "det_pitch_mm": 1.5,
    "roi_nx": 256,
    "roi_ny": 256,
    "pixel_mm": 2.0,
    "n_views_full": 720,
}

_GEOMETRY_KEYS = tuple(PAPER_SCANNER)
_LAYOUT_KEYS = ("n_sources", "z_offsets_mm", "belt_mm_per_frame")
_CONFIG_KEYS = _GEOMETRY_KEYS + _LAYOUT_KEYS


@dataclass(frozen=True)
class FanBeamGeometry:
    """Immutable description of a 2D fan-beam acquisition.

    Parameters
    ----------
    dsd_mm : float
        Source-to-detector distance.
    dso_mm : float
        Source-to-isocenter distance.  Must exceed the ROI circumradius so
        the source ring clears the object.
    n_detectors : int
        Number of detector channels per view.
    det_pitch_mm : float
        Detector channel pitch on the physical (flat) detector.
    roi_nx, roi_ny : int
        Reconstruction grid size in pixels (x is the fast axis).
    pixel_mm : float
        Square pixel side length.
    n_views_full : int
        Number of equispaced view angles covering the full circle.
    """

    dsd_mm: float = PAPER_SCANNER["dsd_mm"]
    dso_mm: float = PAPER_SCANNER["dso_mm"]
    n_detectors: int = PAPER_SCANNER["n_detectors"]
    det_pitch_mm: float = PAPER_SCANNER["det_pitch_mm"]
    roi_nx: int = PAPER_SCANNER["roi_nx"]
    roi_ny: int = PAPER_SCANNER["roi_ny"]
    pixel_mm: float = PAPER_SCANNER["pixel_mm"]
    n_views_full: int = PAPER_SCANNER["n_views_full"]

    def __post_init__(self):
        for name in ("dsd_mm", "dso_mm", "det_pitch_mm", "pixel_mm"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be a positive finite number, got {value!r}")
        for name in ("n_detectors", "roi_nx", "roi_ny", "n_views_full"):
            value = getattr(self, name)
            if not (isinstance(value, int) and not isinstance(value, bool)):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
        if self.n_detectors < 2:
            raise ConfigError("n_detectors must be at least 2")
        if self.roi_nx < 1 or self.roi_ny < 1:
            raise ConfigError("ROI must contain at least one pixel")
        if self.n_views_full < 1:
            raise ConfigError("n_views_full must be at least 1")
        if self.dso_mm >= self.dsd_mm:
            raise ConfigError("source-isocenter distance must be smaller than source-detector distance")
        if self.dso_mm <= self.roi_circumradius_mm:
            raise ConfigError(
                "source ring (dso_mm=%g) does not clear the ROI circumradius %g mm"
                % (self.dso_mm, self.roi_circumradius_mm)
            )

    # -- derived quantities -------------------------------------------------

    @property
    def fan_half_angle_rad(self) -> float:
        """Half opening angle of the fan subtended by the detector."""
        return math.atan2(0.5 * self.n_detectors * self.det_pitch_mm, self.dsd_mm)

    @property
    def fov_radius_mm(self) -> float:
        """Radius of the circle seen by every view (may be smaller than the ROI)."""
        return self.dso_mm * math.sin(self.fan_half_angle_rad)

    @property
    def roi_half_x_mm(self) -> float:
        return 0.5 * self.roi_nx * self.pixel_mm

    @property
    def roi_half_y_mm(self) -> float:
        return 0.5 * self.roi_ny * self.pixel_mm

    @property
    def roi_circumradius_mm(self) -> float:
        """Distance from the isocenter to an ROI corner."""
        return math.hypot(self.roi_half_x_mm, self.roi_half_y_mm)

    @property
    def placement_radius_mm(self) -> float:
        """Radius inside which objects are guaranteed un-truncated views.

        The intersection of the inscribed ROI circle and the fan field of
        view.  Phantom generation confines material to this circle.
        """
        return min(self.roi_half_x_mm, self.roi_half_y_mm, self.fov_radius_mm)

    @property
    def view_step_rad(self) -> float:
        return 2.0 * math.pi / self.n_views_full

    @property
    def angles_full_rad(self) -> np.ndarray:
        """All view angles in radians, strictly increasing over [0, 2*pi)."""
        angles = np.arange(self.n_views_full, dtype=np.float64) * self.view_step_rad
        angles.flags.writeable = False
        return angles

    def detector_offsets_mm(self) -> np.ndarray:
        """Signed channel offsets from the detector center, shape (n_detectors,)."""
        idx = np.arange(self.n_detectors, dtype=np.float64)
        return (idx - 0.5 * (self.n_detectors - 1)) * self.det_pitch_mm

    def to_dict(self) -> dict:
        return {key: getattr(self, key) for key in _GEOMETRY_KEYS}

    def digest(self) -> str:
        """Stable hash of the geometry parameters (hex sha256)."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def build_fan_geometry(config: dict | None = None, **overrides) -> FanBeamGeometry:
    """Construct a :class:`FanBeamGeometry` from defaults plus overrides.

    Parameters
    ----------
    config : dict, optional
        Mapping of geometry keys (as produced by :func:`load_scanner_config`);
        layout keys are ignored here.
    **overrides
        Individual geometry fields, applied after ``config``.

    Returns
    -------
    FanBeamGeometry

    Raises
    ------
    ConfigError
        On unknown keys or invalid values.
    """
    params = dict(PAPER_SCANNER)
    if config is not None:
        for key, value in config.items():
            if key in _LAYOUT_KEYS:
                continue
            if key not in _GEOMETRY_KEYS:
                raise ConfigError(f"unknown geometry key {key!r}")
            params[key] = value
    for key, value in overrides.items():
        if key not in _GEOMETRY_KEYS:
            raise ConfigError(f"unknown geometry key {key!r}")
        params[key] = value
    return FanBeamGeometry(**params)


def load_scanner_config(path) -> dict:
    """Parse a plain-text ``key = value`` scanner description.

    Recognized keys are the geometry fields plus ``n_sources``,
    ``z_offsets_mm`` (comma-separated list) and ``belt_mm_per_frame``.
    Lines starting with ``#`` and blank lines are skipped.  Missing keys are
    simply absent from the returned dict; unknown keys raise.

    Returns
    -------
    dict
        Parsed values with integer fields as int, scalar fields as float and
        ``z_offsets_mm`` as a list of floats.
    """
    int_keys = {"n_detectors", "roi_nx", "roi_ny", "n_views_full", "n_sources"}
    out: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw_line in enumerate(fh, start=1):
            line = raw_line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw_line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in _CONFIG_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                if key == "z_offsets_mm":
                    out[key] = [float(tok) for tok in value.split(",") if tok.strip()]
                elif key in int_keys:
                    out[key] = int(value)
                else:
                    out[key] = float(value)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {value!r}") from exc
    return out


# -- view selection ---------------------------------------------------------


@dataclass(frozen=True)
class AngleSet:
    """An ordered subset of the full view-angle grid.

    Parameters
    ----------
    indices : ndarray of int64
        Strictly increasing view indices into the full grid.
    n_views_full : int
        Size of the full grid the indices refer to.
    """

    indices: np.ndarray
    n_views_full: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or idx.size == 0:
            raise ConfigError("angle set must be a non-empty 1D index array")
        if np.any(idx < 0) or np.any(idx >= self.n_views_full):
            raise ConfigError("angle indices out of range of the full view grid")
        if np.any(np.diff(idx) <= 0):
            raise ConfigError("angle indices must be strictly increasing")
        idx.flags.writeable = False
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return int(self.indices.size)

    @property
    def n_views(self) -> int:
        return len(self)

    @property
    def is_full(self) -> bool:
        return len(self) == self.n_views_full

    def angles_rad(self) -> np.ndarray:
        """View angles in radians for the selected indices."""
        return self.indices * (2.0 * math.pi / self.n_views_full)

    @classmethod
    def full(cls, geometry: FanBeamGeometry) -> "AngleSet":
        return cls(np.arange(geometry.n_views_full, dtype=np.int64), geometry.n_views_full)


def sparse_angles(geometry: FanBeamGeometry, n_views: int) -> AngleSet:
    """Equispaced sparse view subset starting at view 0.

    ``n_views`` must evenly divide ``geometry.n_views_full``; the resulting
    indices are ``{0, stride, 2*stride, ...}`` with
    ``stride = n_views_full // n_views``, so coarser sets nest inside finer
    ones whenever their counts divide each other.

    Raises
    ------
    ConfigError
        If ``n_views`` is not in ``[1, n_views_full]`` or does not divide the
        full view count.
    """
    if not isinstance(n_views, int) or isinstance(n_views, bool):
        raise ConfigError(f"n_views must be an integer, got {n_views!r}")
    if n_views < 1 or n_views > geometry.n_views_full:
        raise ConfigError(
            f"n_views must be in [1, {geometry.n_views_full}], got {n_views}"
        )
    if geometry.n_views_full % n_views != 0:
        raise ConfigError(
            f"n_views={n_views} does not divide n_views_full={geometry.n_views_full}"
        )
    stride = geometry.n_views_full // n_views
    return AngleSet(np.arange(n_views, dtype=np.int64) * stride, geometry.n_views_full)


# -- stationary multi-source layout and rebinning ---------------------------


@dataclass(frozen=True)
class StationaryLayout:
    """Fixed multi-source ring with per-source axial (z) stagger.

    Each source fires at every belt frame; source ``i`` is mounted at in-plane
    angle ``angular_positions_rad[i]`` and axial offset ``z_offsets_mm[i]``.
    The belt advances ``belt_mm_per_frame`` between frames, so a source whose
    offset exceeds another's by ``k`` frame-lengths sees the same material
    slice ``k`` frames later.

    Parameters
    ----------
    angular_positions_rad : ndarray
        Strictly increasing source angles in [0, 2*pi).
    z_offsets_mm : ndarray
        Non-decreasing axial mounting offsets; pairwise differences must be
        integer multiples of ``belt_mm_per_frame``.
    belt_mm_per_frame : float
        Belt advance per acquired frame.
    """

    angular_positions_rad: np.ndarray
    z_offsets_mm: np.ndarray
    belt_mm_per_frame: float

    def __post_init__(self):
        ang = np.asarray(self.angular_positions_rad, dtype=np.float64)
        zs = np.asarray(self.z_offsets_mm, dtype=np.float64)
        if ang.ndim != 1 or ang.size == 0:
            raise ConfigError("layout needs at least one source")
        if zs.shape != ang.shape:
            raise ConfigError("z_offsets_mm and angular_positions_rad must have equal length")
        if not np.all(np.isfinite(ang)) or not np.all(np.isfinite(zs)):
            raise ConfigError("layout parameters must be finite")
        if np.any(ang < 0.0) or np.any(ang >= 2.0 * math.pi):
            raise ConfigError("source angles must lie in [0, 2*pi)")
        if ang.size > 1 and np.any(np.diff(ang) <= 0):
            raise ConfigError("source angles must be strictly increasing")
        if np.any(np.diff(zs) < 0):
            raise ConfigError("z offsets must be non-decreasing")
        if not (math.isfinite(self.belt_mm_per_frame) and self.belt_mm_per_frame > 0):
            raise ConfigError("belt_mm_per_frame must be positive")
        ang.flags.writeable = False
        zs.flags.writeable = False
        object.__setattr__(self, "angular_positions_rad", ang)
        object.__setattr__(self, "z_offsets_mm", zs)
        # Cached relative shifts; also validates the integer-shift premise.
        object.__setattr__(self, "_frame_shifts", self._compute_frame_shifts())

    def _compute_frame_shifts(self) -> np.ndarray:
        rel = (self.z_offsets_mm - self.z_offsets_mm.min()) / self.belt_mm_per_frame
        shifts = np.rint(rel)
        if np.any(np.abs(rel - shifts) > 1e-9):
            raise ConfigError(
                "z offsets are not integer multiples of the belt advance per frame"
            )
        return shifts.astype(np.int64)

    @property
    def n_sources(self) -> int:
        return int(self.angular_positions_rad.size)

    def frame_shifts(self) -> np.ndarray:
        """Per-source frame delay relative to the least-offset source."""
        return self._frame_shifts.copy()

    @classmethod
    def ring(
        cls,
        n_sources: int,
        stagger_frames: int = 0,
        belt_mm_per_frame: float = 1.0,
    ) -> "StationaryLayout":
        """Equispaced full-circle ring with a uniform per-source frame stagger."""
        if not isinstance(n_sources, int) or n_sources < 1:
            raise ConfigError("n_sources must be a positive integer")
        ang = np.arange(n_sources, dtype=np.float64) * (2.0 * math.pi / n_sources)
        zs = np.arange(n_sources, dtype=np.float64) * (stagger_frames * belt_mm_per_frame)
        return cls(ang, zs, belt_mm_per_frame)


@dataclass(frozen=True)
class RawAcquisition:
    """Per-source frame stream: array of shape (2, n_sources, n_frames, n_detectors)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(
                f"raw acquisition must be 4D (energy, source, frame, channel), got shape {arr.shape}"
            )
        if arr.shape[0] != 2:
            raise ShapeError(f"raw acquisition needs exactly 2 energy channels, got {arr.shape[0]}")
        if not np.all(np.isfinite(arr)):
            raise ShapeError("raw acquisition contains non-finite samples")
        object.__setattr__(self, "data", arr)

    @property
    def n_sources(self) -> int:
        return self.data.shape[1]

    @property
    def n_frames(self) -> int:
        return self.data.shape[2]

    @property
    def n_detectors(self) -> int:
        return self.data.shape[3]


@dataclass(frozen=True)
class RebinResult:
    """Outcome of rebinning: the slice-aligned sinogram and the excluded count."""

    sinogram: "Sinogram"  # noqa: F821 - defined in projector, imported lazily
    n_excluded_slices: int


def rebin(raw: RawAcquisition, layout: StationaryLayout, geometry: FanBeamGeometry) -> RebinResult:
    """Reindex a stationary-ring frame stream into a slice-aligned sinogram.

    Source ``i`` sees material slice ``k`` at frame ``k + frame_shifts[i]``.
    Output entry ``(energy, view, k, channel)`` is copied from
    ``raw[energy, i, k + frame_shifts[i], channel]`` where ``view`` orders the
    sources by angular position.  Slices for which any source's frame falls
    outside the recorded stream are dropped and counted.

    Returns
    -------
    RebinResult
        Sinogram of shape (2, n_sources, n_slices_kept, n_detectors) plus the
        number of excluded (incomplete) slices.

    Raises
    ------
    ConfigError
        If source angles do not land on the geometry's view grid, detector
        counts disagree, or no complete slice remains.
    """
    from .projector import Sinogram  # local import to avoid a cycle

    if raw.n_sources != layout.n_sources:
        raise ConfigError(
            f"raw stream has {raw.n_sources} sources, layout has {layout.n_sources}"
        )
    if raw.n_detectors != geometry.n_detectors:
        raise ConfigError(
            f"raw stream has {raw.n_detectors} channels, geometry has {geometry.n_detectors}"
        )
    # Angular positions must coincide with full-grid views.
    rel = layout.angular_positions_rad / geometry.view_step_rad
    view_idx = np.rint(rel)
    if np.any(np.abs(rel - view_idx) > 1e-9):
        raise ConfigError("source angles do not lie on the full view grid")
    angle_set = AngleSet(view_idx.astype(np.int64), geometry.n_views_full)

    shifts = layout.frame_shifts()
    n_keep = raw.n_frames - int(shifts.max())
    n_excluded = raw.n_frames - max(n_keep, 0)
    if n_keep <= 0:
        raise ConfigError("stagger exceeds the recorded stream; no complete slice remains")

    out = np.empty((2, layout.n_sources, n_keep, raw.n_detectors), dtype=np.float64)
    for i in range(layout.n_sources):
        s = int(shifts[i])
        out[:, i, :, :] = raw.data[:, i, s : s + n_keep, :]
    return RebinResult(Sinogram(out, geometry, angle_set), n_excluded)
