"""Synthetic dual-energy phantoms and acquisition simulation.

Primitives live in normalized coordinates: positions and sizes are fractions
of the geometry's placement radius (the largest circle guaranteed un-truncated
views), so one spec rasterizes consistently under any geometry.  Attenuation
values are physical (1/mm) and carried per energy channel, low kVp first.

Overlapping primitives add their attenuations, which keeps rasterization
linear in the primitive list.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, ShapeError
from .geometry import AngleSet, FanBeamGeometry
from .projector import Sinogram, Volume, forward_project

_KINDS = ("disk", "rect", "annulus", "frame")

# (mu at 80 kVp, mu at 120 kVp) in 1/mm; attenuation drops with energy.
MATERIALS = {
    "water": (0.0227, 0.0190),
    "plastic": (0.0180, 0.0160),
    "fabric": (0.0080, 0.0070),
    "glass": (0.0450, 0.0350),
    "aluminum": (0.0700, 0.0500),
    "steel": (0.1500, 0.1100),
}


@dataclass(frozen=True)
class Primitive:
    """One phantom element in normalized (unit placement disk) coordinates.

    Parameters
    ----------
    kind : str
        "disk" (size1 = radius), "rect" (size1/size2 = full width/height),
        "annulus" (size1 = outer radius, thickness = ring width) or
        "frame" (rect outline: size1/size2 outer extent, thickness = border).
    cx, cy : float
        Center position, fractions of the placement radius.
    size1, size2 : float
        Primary extents (fractions of the placement radius).
    rot_rad : float
        In-plane rotation (rect and frame only).
    thickness : float
        Ring or border width (annulus and frame only).
    mu_low, mu_high : float
        Attenuation (1/mm) at the low and high kVp channel.
    z_lo, z_hi : float
        Axial extent as fractions of the slice stack, 0 <= z_lo < z_hi <= 1.
    """

    kind: str
    cx: float
    cy: float
    size1: float
    size2: float = 0.0
    rot_rad: float = 0.0
    thickness: float = 0.0
    mu_low: float = 0.02
    mu_high: float = 0.017
    z_lo: float = 0.0
    z_hi: float = 1.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown primitive kind {self.kind!r}")
        if self.size1 <= 0:
            raise ConfigError("size1 must be positive")
        if self.kind in ("rect", "frame") and self.size2 <= 0:
            raise ConfigError(f"{self.kind} needs a positive size2")
        if self.kind in ("annulus", "frame") and not (0 < self.thickness):
            raise ConfigError(f"{self.kind} needs a positive thickness")
        if self.kind == "annulus" and self.thickness > self.size1:
            raise ConfigError("annulus thickness exceeds its outer radius")
        if not (0.0 <= self.z_lo < self.z_hi <= 1.0):
            raise ConfigError(f"bad z extent [{self.z_lo}, {self.z_hi}]")
        if self.mu_low < 0 or self.mu_high < 0:
            raise ConfigError("attenuation must be non-negative")

    def circumradius(self) -> float:
        """Radius of the smallest origin-at-center circle containing the shape."""
        if self.kind in ("disk", "annulus"):
            return self.size1
        return 0.5 * math.hypot(self.size1, self.size2)

    def coverage(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Boolean membership of normalized sample points (x, y)."""
        dx = x - self.cx
        dy = y - self.cy
        if self.kind == "disk":
            return dx * dx + dy * dy <= self.size1**2
        if self.kind == "annulus":
            d2 = dx * dx + dy * dy
            inner = self.size1 - self.thickness
            return (d2 <= self.size1**2) & (d2 >= inner**2)
        c = math.cos(self.rot_rad)
        s = math.sin(self.rot_rad)
        xr = dx * c + dy * s
        yr = -dx * s + dy * c
        hx, hy = 0.5 * self.size1, 0.5 * self.size2
        outer = (np.abs(xr) <= hx) & (np.abs(yr) <= hy)
        if self.kind == "rect":
            return outer
        ix, iy = hx - self.thickness, hy - self.thickness
        if ix <= 0 or iy <= 0:
            return outer
        inner = (np.abs(xr) <= ix) & (np.abs(yr) <= iy)
        return outer & ~inner


@dataclass(frozen=True)
class PhantomSpec:
    """A named phantom: a list of primitives plus its corpus category."""

    name: str
    category: str  # "simple" or "bag"
    primitives: tuple

    def __post_init__(self):
        if self.category not in ("simple", "bag"):
            raise ConfigError(f"category must be 'simple' or 'bag', got {self.category!r}")
        prims = tuple(self.primitives)
        if not prims:
            raise ConfigError("phantom needs at least one primitive")
        for p in prims:
            if not isinstance(p, Primitive):
                raise ConfigError("primitives must be Primitive instances")
            if math.hypot(p.cx, p.cy) + p.circumradius() > 1.0 + 1e-9:
                raise ConfigError(
                    f"primitive of {self.name!r} leaves the unit placement disk"
                )
        object.__setattr__(self, "primitives", prims)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "category": self.category,
            "primitives": [asdict(p) for p in self.primitives],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        prims = tuple(Primitive(**p) for p in d["primitives"])
        return cls(d["name"], d["category"], prims)


def save_specs(path, specs) -> None:
    """Write phantom specs as JSON (stable key order, trailing newline)."""
    payload = [s.to_dict() for s in specs]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_specs(path) -> list:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return [PhantomSpec.from_dict(d) for d in payload]


# -- rasterization ------------------------------------------------------------

_SUBSAMPLES = 4  # per axis; 16 coverage samples per pixel


# Per-voxel attenuation ceiling (1/mm).  Overlapping primitives add, but two
# solids cannot interpenetrate, so the sum saturates at the densest material.
_MU_MAX = (0.17, 0.125)


def rasterize(spec: PhantomSpec, geometry: FanBeamGeometry, n_slices: int) -> Volume:
    """Render a phantom spec onto the reconstruction grid.

    Coverage is estimated with a 4x4 subpixel grid, so material boundaries are
    anti-aliased.  A primitive spans slices ``round(z_lo * n_slices)`` up to
    ``round(z_hi * n_slices) - 1``.  Overlap regions are clipped to a physical
    attenuation ceiling per energy.
    """
    if not isinstance(n_slices, int) or n_slices < 1:
        raise ConfigError("n_slices must be a positive integer")
    ny, nx = geometry.roi_ny, geometry.roi_nx
    scale = geometry.placement_radius_mm
    sub = _SUBSAMPLES
    # normalized coordinates of subpixel sample centers
    xs = (np.arange(nx * sub) + 0.5) / sub * geometry.pixel_mm - geometry.roi_half_x_mm
    ys = (np.arange(ny * sub) + 0.5) / sub * geometry.pixel_mm - geometry.roi_half_y_mm
    xg, yg = np.meshgrid(xs / scale, ys / scale)
    out = np.zeros((2, n_slices, ny, nx), dtype=np.float64)
    for p in spec.primitives:
        z0 = int(round(p.z_lo * n_slices))
        z1 = int(round(p.z_hi * n_slices))
        z0 = max(0, min(z0, n_slices))
        z1 = max(0, min(z1, n_slices))
        if z1 <= z0:
            continue
        mask = p.coverage(xg, yg)
        cov = mask.reshape(ny, sub, nx, sub).mean(axis=(1, 3))
        out[0, z0:z1] += p.mu_low * cov
        out[1, z0:z1] += p.mu_high * cov
    np.clip(out[0], 0.0, _MU_MAX[0], out=out[0])
    np.clip(out[1], 0.0, _MU_MAX[1], out=out[1])
    return Volume(out, geometry)


# -- corpus generation ---------------------------------------------------------

_Z_LATTICE = 8  # z extents are drawn on a 1/8 lattice


def _draw_z_extent(rng) -> tuple:
    lo = int(rng.integers(0, _Z_LATTICE - 1))
    hi = int(rng.integers(lo + 1, _Z_LATTICE + 1))
    return lo / _Z_LATTICE, hi / _Z_LATTICE


# Max normalized circumradius per material.  Dense items are kept small so the
# worst-case post-log line integral stays below ~10, where the post-log
# Gaussian noise model still sees tens of transmitted photons at the supported
# incident counts.
_SIZE_CAP = {
    "water": 0.55,
    "plastic": 0.65,
    "fabric": 0.80,
    "glass": 0.28,
    "aluminum": 0.17,
    "steel": 0.08,
}


def _draw_material(rng, names) -> tuple:
    name = names[int(rng.integers(0, len(names)))]
    base = MATERIALS[name]
    jitter = 1.0 + 0.1 * (2.0 * rng.random() - 1.0)
    return name, base[0] * jitter, base[1] * jitter


# Bulk materials eligible as the base object of a simple phantom; dense metal
# pieces only ever ride along as extras, so every case keeps a substantial
# attenuation mass and a healthy sinogram energy.
_BULK = ("water", "plastic", "glass")
# High-contrast extras guarantee visible streaking in every sparse-view FBP.
_CONTRAST = ("glass", "aluminum", "steel")


def _draw_primitive(
    rng,
    center_cap,
    region_cx=0.0,
    region_cy=0.0,
    region_r=1.0,
    materials=None,
    size_floor=0.3,
    z_span=None,
):
    """One random primitive confined to a disk of radius region_r."""
    names = materials or ("water", "plastic", "fabric", "glass", "aluminum", "steel")
    kind = _KINDS[int(rng.integers(0, 3))]  # disk, rect or annulus
    ang = rng.random() * 2.0 * math.pi
    rad = rng.random() * center_cap * region_r
    cx = region_cx + rad * math.cos(ang)
    cy = region_cy + rad * math.sin(ang)
    name, mu_low, mu_high = _draw_material(rng, names)
    room = min(region_r - rad, _SIZE_CAP[name])  # available circumradius
    z_lo, z_hi = z_span if z_span is not None else _draw_z_extent(rng)
    if kind == "disk":
        r = (size_floor + (0.95 - size_floor) * rng.random()) * room
        return Primitive("disk", cx, cy, max(r, 0.02), mu_low=mu_low, mu_high=mu_high, z_lo=z_lo, z_hi=z_hi)
    if kind == "annulus":
        r = (size_floor + (0.95 - size_floor) * rng.random()) * room
        r = max(r, 0.04)
        th = (0.15 + 0.5 * rng.random()) * r
        return Primitive(
            "annulus", cx, cy, r, thickness=th, mu_low=mu_low, mu_high=mu_high, z_lo=z_lo, z_hi=z_hi
        )
    w = (size_floor + 1.2 * (0.95 - size_floor) * rng.random()) * room
    h = (size_floor + 1.2 * (0.95 - size_floor) * rng.random()) * room
    # keep the half-diagonal inside the room
    diag = 0.5 * math.hypot(w, h)
    if diag > room:
        f = room / diag * 0.98
        w *= f
        h *= f
    rot = rng.random() * math.pi
    return Primitive(
        "rect", cx, cy, max(w, 0.03), max(h, 0.03), rot_rad=rot,
        mu_low=mu_low, mu_high=mu_high, z_lo=z_lo, z_hi=z_hi,
    )


def generate_corpus(n_simple: int, n_bags: int, seed: int) -> list:
    """Deterministically generate a phantom corpus.

    Simple phantoms model conveyor test trays: a bulk object spanning the full
    axial extent plus one or two dense contrast items, so every case has
    tray-scale mass in every slice and visible streaking at sparse views.  Bag
    phantoms hold a thin full-height rectangular frame plus enough contents
    for 6 to 15 primitives total.
    """
    if n_simple < 0 or n_bags < 0:
        raise ConfigError("corpus counts must be non-negative")
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n_simple):
        n_extra = int(rng.integers(1, 3))
        prims = [
            _draw_primitive(
                rng, center_cap=0.3, materials=_BULK, size_floor=0.5, z_span=(0.0, 1.0)
            )
        ]
        prims += [
            _draw_primitive(rng, center_cap=0.55, materials=_CONTRAST, size_floor=0.4)
            for _ in range(n_extra)
        ]
        specs.append(PhantomSpec(f"simple-{i:03d}", "simple", tuple(prims)))
    for i in range(n_bags):
        w = 1.0 + 0.6 * rng.random()
        h = 0.7 + 0.5 * rng.random()
        diag = 0.5 * math.hypot(w, h)
        f = 0.95 / diag
        w *= f
        h *= f
        rot = (rng.random() - 0.5) * 0.4
        th = 0.02 + 0.025 * rng.random()
        # shells are plastic: a metal wall grazed lengthwise would starve rays
        _, mu_low, mu_high = _draw_material(rng, ("plastic",))
        frame = Primitive(
            "frame", 0.0, 0.0, w, h, rot_rad=rot, thickness=th,
            mu_low=mu_low, mu_high=mu_high, z_lo=0.0, z_hi=1.0,
        )
        inner_r = 0.5 * min(w, h) - th - 0.02
        n_contents = int(rng.integers(5, 15))
        prims = [frame] + [
            _draw_primitive(rng, center_cap=0.7, region_r=max(inner_r, 0.1))
            for _ in range(n_contents)
        ]
        specs.append(PhantomSpec(f"bag-{i:03d}", "bag", tuple(prims)))
    return specs


@dataclass(frozen=True)
class CorpusSplit:
    train: tuple
    val: tuple
    test: tuple


def split_corpus(specs, train_counts: tuple, val_counts: tuple) -> CorpusSplit:
    """Split a corpus into train/val/test by category, preserving order.

    ``train_counts`` and ``val_counts`` are (n_simple, n_bags) pairs; whatever
    remains becomes the test set.
    """
    simple = [s for s in specs if s.category == "simple"]
    bags = [s for s in specs if s.category == "bag"]
    ts, tb = train_counts
    vs, vb = val_counts
    if ts + vs > len(simple) or tb + vb > len(bags):
        raise ConfigError(
            f"split needs {ts + vs} simple and {tb + vb} bag phantoms, corpus has "
            f"{len(simple)} and {len(bags)}"
        )
    train = tuple(simple[:ts] + bags[:tb])
    val = tuple(simple[ts : ts + vs] + bags[tb : tb + vb])
    test = tuple(simple[ts + vs :] + bags[tb + vb :])
    return CorpusSplit(train, val, test)


# -- acquisition simulation -----------------------------------------------------


@dataclass(frozen=True)
class NoiseModel:
    """Post-log Gaussian approximation of counting noise.

    A line integral l acquired with ``incident_count`` photons gets additive
    zero-mean Gaussian noise with sigma = sqrt(exp(l) / incident_count), then
    the sample is clamped at zero (post-log data is non-negative).
    """

    incident_count: float
    seed: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.incident_count) and self.incident_count > 0):
            raise ConfigError("incident_count must be positive")


def simulate_acquisition(
    volume: Volume,
    geometry: FanBeamGeometry,
    angles: AngleSet,
    noise: NoiseModel | None = None,
    workers: int | None = None,
) -> Sinogram:
    """Project a phantom volume and optionally add post-log noise.

    The noise draw depends only on ``noise.seed`` and the data, never on the
    worker count, so simulated measurements are reproducible.
    """
    sino = forward_project(volume, geometry, angles, workers=workers)
    if noise is None:
        return sino
    rng = np.random.default_rng(noise.seed)
    sigma = np.sqrt(np.exp(sino.data) / noise.incident_count)
    noisy = sino.data + sigma * rng.standard_normal(sino.data.shape)
    return Sinogram(np.maximum(noisy, 0.0), geometry, angles)
