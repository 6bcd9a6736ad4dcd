"""Model-based iterative reconstruction with a total-variation prior.

Solves, independently per energy channel and z slice,

    min_f  mu_fid * ||A f - g||^2 + TV(f)    (optionally s.t. f >= 0)

where A is the sparse-view fan-beam projector and TV is the isotropic total
variation with forward differences and Neumann boundary.  The outer loop is a
monotone accelerated proximal-gradient method (the objective never increases
from one recorded iterate to the next); each proximal step is a projector-free
TV denoising subproblem solved by a fixed number of fast dual (FGP)
iterations.  The projector is applied a constant number of times per outer
iteration, never inside the inner loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ConfigError, DivergenceError, ShapeError
from .geometry import AngleSet, FanBeamGeometry
from .projector import Sinogram, Volume, _back_slice, _forward_slice, _run_tasks


@dataclass(frozen=True)
class MbirConfig:
    """Solver settings.

    Parameters
    ----------
    mu_fid : float
        Data-fidelity weight in the objective.
    max_iters : int
        Outer iteration budget.
    inner_iters : int
        Dual iterations per TV proximal step.
    primal_step : float
        Outer gradient step as a fraction of the 1/L stability bound
        (L from a cached power-iteration estimate of 2*mu_fid*||A||^2).
    dual_step : float
        Inner dual step; must not exceed the 1/8 stability bound.
    tol : float
        Optimality tolerance: iteration stops early once the relative
        objective decrease over a trailing 10-iteration window falls below
        this value.  Must be positive.
    nonneg : bool
        Constrain the solution to be non-negative.
    """

    mu_fid: float = 0.5
    max_iters: int = 60
    inner_iters: int = 10
    primal_step: float = 1.0
    dual_step: float = 0.125
    tol: float = 1e-4
    nonneg: bool = True

    def __post_init__(self):
        if not (math.isfinite(self.mu_fid) and self.mu_fid > 0):
            raise ConfigError(f"mu_fid must be positive, got {self.mu_fid!r}")
        if not (isinstance(self.max_iters, int) and self.max_iters >= 1):
            raise ConfigError("max_iters must be a positive integer")
        if not (isinstance(self.inner_iters, int) and self.inner_iters >= 1):
            raise ConfigError("inner_iters must be a positive integer")
        if not (0.0 < self.primal_step <= 1.0):
            raise ConfigError("primal_step must be in (0, 1]")
        if not (0.0 < self.dual_step <= 0.125):
            raise ConfigError("dual_step must be in (0, 1/8]")
        if not (math.isfinite(self.tol) and self.tol > 0):
            raise ConfigError(f"tol must be positive, got {self.tol!r}")


@dataclass(frozen=True)
class MbirResult:
    """Reconstruction plus per-slice objective histories.

    ``objectives[e][z]`` is a 1D array; entry 0 is the objective at the zero
    initializer and entry k the objective after outer iteration k.
    """

    volume: Volume
    objectives: tuple


# -- total variation pieces ---------------------------------------------------


@njit(cache=True, nogil=True)
def _tv_gradient_kernel(img):
    ny, nx = img.shape
    g = np.zeros((2, ny, nx), dtype=np.float64)
    for j in range(ny):
        for i in range(nx):
            if i < nx - 1:
                g[0, j, i] = img[j, i + 1] - img[j, i]
            if j < ny - 1:
                g[1, j, i] = img[j + 1, i] - img[j, i]
    return g


@njit(cache=True, nogil=True)
def _tv_adjoint_kernel(p):
    # Adjoint of the forward-difference gradient (negative divergence).
    ny, nx = p.shape[1], p.shape[2]
    out = np.zeros((ny, nx), dtype=np.float64)
    for j in range(ny):
        for i in range(nx):
            acc = 0.0
            if i >= 1:
                acc += p[0, j, i - 1]
            if i <= nx - 2:
                acc -= p[0, j, i]
            if j >= 1:
                acc += p[1, j - 1, i]
            if j <= ny - 2:
                acc -= p[1, j, i]
            out[j, i] = acc
    return out


def tv_gradient(img: np.ndarray) -> np.ndarray:
    """Forward-difference image gradient, shape (2, ny, nx);: channel 0 is
    the x difference, channel 1 the y difference; the last column/row of the
    respective channel is zero (Neumann boundary)."""
    arr = np.ascontiguousarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"tv_gradient expects a 2D image, got shape {arr.shape}")
    return _tv_gradient_kernel(arr)


def tv_adjoint(p: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`tv_gradient` (negative discrete divergence)."""
    arr = np.ascontiguousarray(p, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise ShapeError(f"tv_adjoint expects shape (2, ny, nx), got {arr.shape}")
    return _tv_adjoint_kernel(arr)


def tv_value(img: np.ndarray) -> float:
    """Isotropic total variation of a 2D image."""
    g = tv_gradient(img)
    return float(np.sum(np.sqrt(g[0] ** 2 + g[1] ** 2)))


@njit(cache=True, nogil=True)
def _tv_prox_kernel(v, weight, n_iters, dual_step, nonneg):
    """Solve min_x 0.5||x - v||^2 + weight * TV(x) (optionally x >= 0).

    Fast dual projected-gradient iterations with momentum; returns the primal
    image built from the final dual point.
    """
    ny, nx = v.shape
    p = np.zeros((ny, nx), dtype=np.float64)
    q = np.zeros((ny, nx), dtype=np.float64)
    rp = np.zeros((ny, nx), dtype=np.float64)
    rq = np.zeros((ny, nx), dtype=np.float64)
    x = np.empty((ny, nx), dtype=np.float64)
    t = 1.0
    step = dual_step / weight
    for _ in range(n_iters):
        # x = proj_C(v - weight * adjoint(r))
        for j in range(ny):
            for i in range(nx):
                acc = 0.0
                if i >= 1:
                    acc += rp[j, i - 1]
                if i <= nx - 2:
                    acc -= rp[j, i]
                if j >= 1:
                    acc += rq[j - 1, i]
                if j <= ny - 2:
                    acc -= rq[j, i]
                val = v[j, i] - weight * acc
                if nonneg and val < 0.0:
                    val = 0.0
                x[j, i] = val
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        mom = (t - 1.0) / t_next
        # dual ascent along the gradient of x, then ball projection
        for j in range(ny):
            for i in range(nx):
                gx = x[j, i + 1] - x[j, i] if i < nx - 1 else 0.0
                gy = x[j + 1, i] - x[j, i] if j < ny - 1 else 0.0
                pp = rp[j, i] + step * gx
                qq = rq[j, i] + step * gy
                nrm = math.sqrt(pp * pp + qq * qq)
                if nrm > 1.0:
                    pp /= nrm
                    qq /= nrm
                rp_new = pp + mom * (pp - p[j, i])
                rq_new = qq + mom * (qq - q[j, i])
                p[j, i] = pp
                q[j, i] = qq
                rp[j, i] = rp_new
                rq[j, i] = rq_new
        t = t_next
    # primal point from the final (projected) dual variables
    for j in range(ny):
        for i in range(nx):
            acc = 0.0
            if i >= 1:
                acc += p[j, i - 1]
            if i <= nx - 2:
                acc -= p[j, i]
            if j >= 1:
                acc += q[j - 1, i]
            if j <= ny - 2:
                acc -= q[j, i]
            val = v[j, i] - weight * acc
            if nonneg and val < 0.0:
                val = 0.0
            x[j, i] = val
    return x


def tv_prox(
    v: np.ndarray,
    weight: float,
    n_iters: int = 30,
    dual_step: float = 0.125,
    nonneg: bool = False,
) -> np.ndarray:
    """Proximal operator of ``weight * TV`` at ``v`` (approximate, dual FGP)."""
    arr = np.ascontiguousarray(v, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"tv_prox expects a 2D image, got shape {arr.shape}")
    if weight < 0 or not math.isfinite(weight):
        raise ConfigError(f"weight must be finite and non-negative, got {weight!r}")
    if weight == 0.0:
        return np.maximum(arr, 0.0) if nonneg else arr.copy()
    return _tv_prox_kernel(arr, float(weight), int(n_iters), float(dual_step), nonneg)


def tv_post_denoise(volume: Volume, weight: float, n_iters: int = 50) -> Volume:
    """TV-denoise every slice of a volume (no non-negativity constraint)."""
    if weight == 0.0:
        return volume
    out = np.empty_like(np.asarray(volume.data, dtype=np.float64))
    for e in range(2):
        for z in range(volume.n_z):
            out[e, z] = tv_prox(volume.data[e, z], weight, n_iters=n_iters)
    return Volume(out, volume.geometry)


# -- operator norm (cached per geometry/angle set) ----------------------------

_OPNORM_CACHE: dict = {}


def _operator_norm_sq(geometry: FanBeamGeometry, angles: AngleSet, n_iters: int = 30) -> float:
    """Power-iteration estimate of ||A||^2 for the per-slice projector."""
    key = (geometry.digest(), angles.indices.tobytes())
    if key in _OPNORM_CACHE:
        return _OPNORM_CACHE[key]
    betas = angles.angles_rad()
    det_u = geometry.detector_offsets_mm()
    x0 = -geometry.roi_half_x_mm
    y0 = -geometry.roi_half_y_mm
    b = np.ones((geometry.roi_ny, geometry.roi_nx), dtype=np.float64)
    b /= np.linalg.norm(b)
    sigma_sq = 0.0
    for _ in range(n_iters):
        fb = _forward_slice(b, betas, det_u, geometry.dso_mm, geometry.dsd_mm, x0, y0, geometry.pixel_mm)
        bb = _back_slice(
            fb, betas, det_u, geometry.dso_mm, geometry.dsd_mm, x0, y0,
            geometry.pixel_mm, geometry.roi_ny, geometry.roi_nx,
        )
        nrm = np.linalg.norm(bb)
        if nrm == 0.0:
            break
        sigma_sq = nrm  # ||A^T A b|| -> largest eigenvalue of A^T A
        b = bb / nrm
    _OPNORM_CACHE[key] = sigma_sq
    return sigma_sq


# -- solver -------------------------------------------------------------------

_TOL_WINDOW = 10  # iterations spanned by the optimality stopping check


def _solve_slice(g, betas, det_u, geometry: FanBeamGeometry, config: MbirConfig, lips: float):
    """Monotone accelerated proximal gradient on one (energy, z) slice."""
    x0 = -geometry.roi_half_x_mm
    y0 = -geometry.roi_half_y_mm
    px = geometry.pixel_mm
    ny, nx = geometry.roi_ny, geometry.roi_nx
    mu = config.mu_fid
    tau = config.primal_step / lips

    def fwd(img):
        return _forward_slice(img, betas, det_u, geometry.dso_mm, geometry.dsd_mm, x0, y0, px)

    def adj(rows):
        return _back_slice(
            rows, betas, det_u, geometry.dso_mm, geometry.dsd_mm, x0, y0, px, ny, nx
        )

    def objective(img, proj):
        resid = proj - g
        return mu * float(np.sum(resid * resid)) + tv_value(img)

    x = np.zeros((ny, nx), dtype=np.float64)
    y = x
    t = 1.0
    obj_x = objective(x, fwd(x))
    history = [obj_x]
    for k in range(1, config.max_iters + 1):
        resid = fwd(y) - g
        grad = 2.0 * mu * adj(resid)
        z = _tv_prox_kernel(y - tau * grad, tau, config.inner_iters, config.dual_step, config.nonneg)
        obj_z = objective(z, fwd(z))
        if not math.isfinite(obj_z):
            raise DivergenceError("objective became non-finite", k)
        # monotone choice: keep the best iterate seen so far
        if obj_z <= obj_x:
            x_new, obj_new = z, obj_z
        else:
            x_new, obj_new = x, obj_x
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = x_new + (t / t_next) * (z - x_new) + ((t - 1.0) / t_next) * (x_new - x)
        x = x_new
        obj_x = obj_new
        history.append(obj_x)
        t = t_next
        # optimality check: relative decrease over a trailing 10-iteration window
        if k >= _TOL_WINDOW:
            ref = history[-1 - _TOL_WINDOW]
            if ref - obj_x <= config.tol * max(abs(ref), 1e-30):
                break
    return x, np.asarray(history, dtype=np.float64)


def mbir_tv(
    sinogram: Sinogram,
    geometry: FanBeamGeometry,
    config: MbirConfig | None = None,
    workers: int | None = None,
) -> MbirResult:
    """TV-regularized iterative reconstruction of a (sparse) sinogram.

    Returns
    -------
    MbirResult
        Volume plus, for every energy channel and slice, the objective value
        at the zero initializer and after each outer iteration.  Histories
        are monotone non-increasing.

    Raises
    ------
    DivergenceError
        If an objective value becomes non-finite (carries the iteration).
    """
    if sinogram.geometry != geometry:
        raise ShapeError("sinogram geometry does not match")
    if config is None:
        config = MbirConfig()
    betas = sinogram.angles.angles_rad()
    det_u = geometry.detector_offsets_mm()
    sigma_sq = _operator_norm_sq(geometry, sinogram.angles)
    # 5% headroom over the power-iteration estimate keeps the step valid
    lips = 2.0 * config.mu_fid * sigma_sq * 1.05
    n_z = sinogram.n_z
    out = np.zeros((2, n_z, geometry.roi_ny, geometry.roi_nx), dtype=np.float64)
    histories = [[None] * n_z for _ in range(2)]
    src = np.ascontiguousarray(sinogram.data, dtype=np.float64)

    def task(ez):
        e, z = ez
        img, hist = _solve_slice(src[e, :, z, :], betas, det_u, geometry, config, lips)
        out[e, z] = img
        histories[e][z] = hist

    _run_tasks([(e, z) for e in range(2) for z in range(n_z)], task, workers)
    return MbirResult(
        Volume(out, geometry),
        tuple(tuple(histories[e][z] for z in range(n_z)) for e in range(2)),
    )
