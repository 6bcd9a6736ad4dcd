"""TV-regularized iterative reconstruction tests."""

import numpy as np
import pytest

import sparsect.mbir as mbir_mod
from sparsect.analytic import right_inverse
from sparsect.errors import ConfigError, DivergenceError, ShapeError
from sparsect.geometry import AngleSet, sparse_angles
from sparsect.mbir import (
    MbirConfig,
    mbir_tv,
    tv_adjoint,
    tv_gradient,
    tv_post_denoise,
    tv_prox,
    tv_value,
)
from sparsect.projector import Sinogram, Volume, forward_project, sample_views

from conftest import disk_volume, sino_nmse


# -- discrete TV pieces ---------------------------------------------------------


def test_tv_gradient_of_column_ramp():
    # img[j, i] = i: unit x-differences except the Neumann last column
    img = np.tile(np.arange(6.0), (5, 1))
    g = tv_gradient(img)
    assert g.shape == (2, 5, 6)
    np.testing.assert_array_equal(g[0, :, :-1], 1.0)
    np.testing.assert_array_equal(g[0, :, -1], 0.0)
    np.testing.assert_array_equal(g[1], 0.0)


def test_tv_gradient_of_constant_is_zero():
    g = tv_gradient(np.full((7, 4), 3.25))
    assert not g.any()


def test_tv_adjoint_matches_gradient_inner_product():
    rng = np.random.default_rng(13)
    for _ in range(20):
        x = rng.standard_normal((9, 7))
        p = rng.standard_normal((2, 9, 7))
        lhs = float(np.sum(tv_gradient(x) * p))
        rhs = float(np.sum(x * tv_adjoint(p)))
        assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), 1.0)


def test_tv_value_of_column_step():
    # single vertical edge of height c crossed by every row
    img = np.zeros((8, 10))
    img[:, 5:] = 0.75
    assert tv_value(img) == pytest.approx(8 * 0.75, rel=1e-12)


def test_tv_shape_validation():
    with pytest.raises(ShapeError):
        tv_gradient(np.zeros((2, 3, 4)))
    with pytest.raises(ShapeError):
        tv_adjoint(np.zeros((3, 4, 5)))


# -- TV proximal operator ---------------------------------------------------------


def test_tv_prox_weight_zero_is_identity():
    rng = np.random.default_rng(5)
    v = rng.standard_normal((12, 12))
    out = tv_prox(v, 0.0)
    np.testing.assert_array_equal(out, v)
    assert out is not v  # caller keeps ownership of the input
    clamped = tv_prox(v, 0.0, nonneg=True)
    np.testing.assert_array_equal(clamped, np.maximum(v, 0.0))


def test_tv_prox_constant_is_fixed_point():
    v = np.full((10, 10), 1.5)
    np.testing.assert_allclose(tv_prox(v, 0.3, n_iters=50), v, atol=1e-10)


def test_tv_prox_minimizes_against_random_perturbations():
    rng = np.random.default_rng(17)
    v = rng.standard_normal((10, 10))
    w = 0.4

    def objective(x):
        return 0.5 * np.sum((x - v) ** 2) + w * tv_value(x)

    x_star = tv_prox(v, w, n_iters=400)
    base = objective(x_star)
    for _ in range(25):
        delta = rng.standard_normal(v.shape) * 0.05
        assert objective(x_star + delta) >= base - 1e-8


def test_tv_prox_large_weight_flattens_to_mean():
    rng = np.random.default_rng(23)
    v = rng.standard_normal((8, 8))
    out = tv_prox(v, 1e4, n_iters=2000)
    np.testing.assert_allclose(out, np.full_like(v, v.mean()), atol=5e-3)


def test_tv_prox_shrinks_tv():
    rng = np.random.default_rng(29)
    v = rng.standard_normal((16, 16))
    assert tv_value(tv_prox(v, 0.25, n_iters=100)) < tv_value(v)


def test_tv_prox_validation():
    with pytest.raises(ShapeError):
        tv_prox(np.zeros((2, 3, 4)), 0.1)
    with pytest.raises(ConfigError):
        tv_prox(np.zeros((4, 4)), -0.1)
    with pytest.raises(ConfigError):
        tv_prox(np.zeros((4, 4)), np.inf)


def test_tv_post_denoise_weight_zero_returns_input(tiny_geometry):
    vol = disk_volume(tiny_geometry, 0.0, 0.0, 20.0, n_z=2)
    assert tv_post_denoise(vol, 0.0) is vol


def test_tv_post_denoise_reduces_tv(tiny_geometry):
    rng = np.random.default_rng(31)
    base = disk_volume(tiny_geometry, 2.0, -3.0, 18.0)
    noisy = Volume(base.data + 0.004 * rng.standard_normal(base.data.shape), tiny_geometry)
    out = tv_post_denoise(noisy, 0.002)
    assert tv_value(out.data[0, 0]) < tv_value(noisy.data[0, 0])
    const = Volume(np.full_like(base.data, 0.01), tiny_geometry)
    np.testing.assert_allclose(tv_post_denoise(const, 0.5).data, const.data, atol=1e-10)


# -- config validation -------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [
        {"mu_fid": 0.0},
        {"mu_fid": -1.0},
        {"mu_fid": float("inf")},
        {"max_iters": 0},
        {"inner_iters": 0},
        {"primal_step": 0.0},
        {"primal_step": 1.5},
        {"dual_step": 0.0},
        {"dual_step": 0.25},
        {"tol": 0.0},
        {"tol": -1e-6},
    ],
)
def test_mbir_config_rejects_invalid_fields(kwargs):
    with pytest.raises(ConfigError):
        MbirConfig(**kwargs)


# -- solver ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_noisy_case(tiny_geometry):
    g = tiny_geometry
    vol = disk_volume(g, 3.0, -5.0, 20.0, mu=(0.02, 0.015), n_z=1)
    dense = forward_project(vol, g, AngleSet.full(g), workers=1)
    theta = sparse_angles(g, 9)
    clean = sample_views(dense, theta)
    rng = np.random.default_rng(0)
    noisy = np.maximum(clean.data + 0.01 * rng.standard_normal(clean.data.shape), 0.0)
    return Sinogram(noisy, g, theta), dense


def test_objective_starts_at_zero_iterate_and_never_increases(tiny_geometry, tiny_noisy_case):
    measured, _ = tiny_noisy_case
    cfg = MbirConfig(mu_fid=0.5, max_iters=60, inner_iters=10, tol=1e-6)
    res = mbir_tv(measured, tiny_geometry, cfg, workers=1)
    for e in range(2):
        for z in range(measured.n_z):
            h = res.objectives[e][z]
            want0 = cfg.mu_fid * float(np.sum(measured.data[e, :, z, :] ** 2))
            assert h[0] == pytest.approx(want0, rel=1e-12)
            assert np.all(np.diff(h) <= 1e-9 * np.maximum(np.abs(h[:-1]), 1e-30))


def test_early_stop_satisfies_window_tolerance(tiny_geometry, tiny_noisy_case):
    measured, _ = tiny_noisy_case
    cfg = MbirConfig(mu_fid=0.5, max_iters=500, inner_iters=10, tol=1e-4)
    res = mbir_tv(measured, tiny_geometry, cfg, workers=1)
    h = res.objectives[0][0]
    assert len(h) - 1 < cfg.max_iters  # stopped on the tolerance, not the budget
    assert h[-11] - h[-1] <= cfg.tol * abs(h[-11]) + 1e-30


def test_mbir_beats_right_inverse_on_sparse_noisy_data(tiny_geometry, tiny_noisy_case):
    measured, _ = tiny_noisy_case
    cfg = MbirConfig(mu_fid=0.5, max_iters=120, inner_iters=10, tol=1e-4)
    res = mbir_tv(measured, tiny_geometry, cfg, workers=1)
    n_mbir = sino_nmse(res.volume, measured)
    n_fbp = sino_nmse(right_inverse(measured, tiny_geometry, workers=1), measured)
    assert np.all(n_mbir < n_fbp)


def test_mbir_output_tv_below_right_inverse(tiny_geometry, tiny_noisy_case):
    measured, _ = tiny_noisy_case
    res = mbir_tv(measured, tiny_geometry, MbirConfig(mu_fid=0.5, max_iters=60), workers=1)
    fr = right_inverse(measured, tiny_geometry, workers=1)
    assert tv_value(res.volume.data[0, 0]) < tv_value(fr.data[0, 0])


def test_dense_high_fidelity_recovers_disk_interior(tiny_geometry):
    g = tiny_geometry
    mu = 0.02
    vol = disk_volume(g, 3.0, -5.0, 20.0, mu=(mu, mu))
    dense = forward_project(vol, g, AngleSet.full(g), workers=1)
    cfg = MbirConfig(mu_fid=5.0, max_iters=80, inner_iters=10, tol=1e-6)
    res = mbir_tv(dense, g, cfg, workers=1)
    half = (g.roi_nx - 1) / 2.0
    xs = (np.arange(g.roi_nx) - half) * g.pixel_mm
    yy, xx = np.meshgrid(xs, xs, indexing="ij")
    interior = (xx - 3.0) ** 2 + (yy + 5.0) ** 2 <= (20.0 - 3.0 * g.pixel_mm) ** 2
    assert abs(res.volume.data[0, 0][interior].mean() - mu) / mu < 0.03


def test_zero_sinogram_reconstructs_to_zero(tiny_geometry):
    g = tiny_geometry
    theta = sparse_angles(g, 9)
    zero = Sinogram(np.zeros((2, 9, 2, g.n_detectors)), g, theta)
    res = mbir_tv(zero, g, MbirConfig(mu_fid=0.5, max_iters=15), workers=1)
    assert not res.volume.data.any()


def test_nonneg_constraint_respected(tiny_geometry, tiny_noisy_case):
    measured, _ = tiny_noisy_case
    res = mbir_tv(measured, tiny_geometry, MbirConfig(mu_fid=0.5, max_iters=40), workers=1)
    assert res.volume.data.min() >= 0.0


def test_worker_count_does_not_change_solution(tiny_geometry):
    g = tiny_geometry
    vol = disk_volume(g, -4.0, 6.0, 15.0, n_z=3)
    theta = sparse_angles(g, 9)
    measured = forward_project(vol, g, theta, workers=1)
    cfg = MbirConfig(mu_fid=0.5, max_iters=20)
    a = mbir_tv(measured, g, cfg, workers=1)
    b = mbir_tv(measured, g, cfg, workers=4)
    np.testing.assert_array_equal(a.volume.data, b.volume.data)


def test_mismatched_geometry_rejected(tiny_geometry, desk_geometry):
    g = tiny_geometry
    theta = sparse_angles(g, 9)
    sino = Sinogram(np.zeros((2, 9, 1, g.n_detectors)), g, theta)
    with pytest.raises(ShapeError):
        mbir_tv(sino, desk_geometry)


def test_divergence_raises_with_iteration(tiny_geometry, tiny_noisy_case, monkeypatch):
    # fault injection: lie about the operator norm so the gradient step explodes
    measured, _ = tiny_noisy_case
    monkeypatch.setattr(mbir_mod, "_operator_norm_sq", lambda *a, **k: 1e-30)
    cfg = MbirConfig(mu_fid=0.5, max_iters=40, nonneg=False)
    with pytest.raises(DivergenceError) as err:
        mbir_tv(measured, tiny_geometry, cfg, workers=1)
    assert err.value.iteration >= 1
