"""Dual-domain reconstruction pipeline.

Stages, in training order:

1. ``make_labels``: TV-regularized iterative reconstructions of the sparse
   measurements serve as training labels.
2. ``train_image_denoiser``: an image-domain CNN maps the zero-fill right
   inverse of each measurement to its label volume.
3. ``train_sinogram_denoiser``: the image CNN's outputs are reprojected at the
   measured angles; a sinogram-domain CNN maps each reprojected view to the
   corresponding measured view.

Inference chains both: right inverse, image CNN, reprojection onto a dense
view grid, per-view sinogram CNN, FBP, and optional TV post-denoising.

Network data scaling: attenuation slices (~0.02 1/mm) and line integrals
(~2 dimensionless) are multiplied by fixed per-domain constants so both
networks train and run near unit scale; outputs are divided back.  The same
constants apply at training and application time, so nothing is persisted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .analytic import FbpConfig, right_inverse
from .errors import ConfigError, DivergenceError, ShapeError
from .geometry import AngleSet, FanBeamGeometry, sparse_angles
from .mbir import MbirConfig, mbir_tv, tv_post_denoise
from .neural.model import DenoiserModel, forward
from .neural.train import TrainConfig, sgd_train
from .projector import Sinogram, Volume, forward_project


# fixed pre-network scale factors (see module docstring)
IMAGE_SCALE = 50.0
SINO_SCALE = 0.5


# -- applying denoisers to containers ------------------------------------------


def _pad_multiple(batch: np.ndarray, div: int):
    """Edge-pad (n, c, h, w) so h and w are multiples of div."""
    n, c, h, w = batch.shape
    ph = (-h) % div
    pw = (-w) % div
    if ph == 0 and pw == 0:
        return batch, h, w
    return np.pad(batch, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge"), h, w


def _apply_batched(model: DenoiserModel, batch: np.ndarray, chunk: int) -> np.ndarray:
    padded, h, w = _pad_multiple(batch, model.spatial_divisor)
    outs = []
    for start in range(0, padded.shape[0], chunk):
        outs.append(forward(model, padded[start : start + chunk], mode="eval"))
    return np.concatenate(outs, axis=0)[:, :, :h, :w]


def apply_image_model(model: DenoiserModel, volume: Volume, chunk: int = 8) -> Volume:
    """Run the image denoiser on every slice (edge-padding odd sizes)."""
    batch = np.asarray(volume.data, dtype=np.float32).transpose(1, 0, 2, 3) * IMAGE_SCALE
    out = _apply_batched(model, batch, chunk) / IMAGE_SCALE
    return Volume(out.transpose(1, 0, 2, 3), volume.geometry)


def apply_sino_model(model: DenoiserModel, sinogram: Sinogram, chunk: int = 32) -> Sinogram:
    """Run the sinogram denoiser on every view's (energy, z, s) image."""
    batch = np.asarray(sinogram.data, dtype=np.float32).transpose(1, 0, 2, 3) * SINO_SCALE
    out = _apply_batched(model, batch, chunk) / SINO_SCALE
    return Sinogram(out.transpose(1, 0, 2, 3), sinogram.geometry, sinogram.angles)


# -- training ------------------------------------------------------------------


def make_labels(
    measured,
    geometry: FanBeamGeometry,
    config: MbirConfig | None = None,
    workers: int | None = None,
):
    """Iteratively reconstruct every measured sinogram; returns label volumes.

    Solver divergence is re-raised with the offending case index.
    """
    out = []
    for i, m in enumerate(measured):
        try:
            out.append(mbir_tv(m, geometry, config, workers).volume)
        except DivergenceError as err:
            raise DivergenceError(f"label reconstruction diverged on case {i}", err.iteration) from err
    return out


def extract_patches(inputs: np.ndarray, targets: np.ndarray, patch_h: int, patch_w: int, rng):
    """Paired random crops; a full-size patch is the identity.

    One patch per ceil(area ratio) is drawn per image so the expected pixel
    coverage stays near one.
    """
    if inputs.shape != targets.shape:
        raise ShapeError(f"paired stacks disagree: {inputs.shape} vs {targets.shape}")
    n, c, h, w = inputs.shape
    if patch_h > h or patch_w > w:
        raise ConfigError(f"patch {patch_h}x{patch_w} exceeds image {h}x{w}")
    if patch_h == h and patch_w == w:
        return inputs, targets
    per_image = max(1, round((h * w) / (patch_h * patch_w)))
    xs, ys = [], []
    for i in range(n):
        for _ in range(per_image):
            top = int(rng.integers(0, h - patch_h + 1))
            left = int(rng.integers(0, w - patch_w + 1))
            xs.append(inputs[i, :, top : top + patch_h, left : left + patch_w])
            ys.append(targets[i, :, top : top + patch_h, left : left + patch_w])
    return np.stack(xs), np.stack(ys)


def _stack_slices(volumes) -> np.ndarray:
    """(case, energy, z, y, x) volumes to a (case*z, energy, y, x) batch."""
    parts = [np.asarray(v.data, dtype=np.float32).transpose(1, 0, 2, 3) for v in volumes]
    return np.concatenate(parts, axis=0)


def _build_model(config: TrainConfig) -> DenoiserModel:
    from .neural.model import build_denoiser

    return build_denoiser(
        in_channels=2,
        out_channels=2,
        base_channels=config.base_channels,
        depth=config.depth,
        seed=config.seed,
    )


def train_image_denoiser(
    measured,
    labels,
    geometry: FanBeamGeometry,
    config: TrainConfig,
    fbp_config: FbpConfig | None = None,
    workers: int | None = None,
    log_fn=None,
):
    """Fit the image-domain denoiser on (right inverse, label) slice pairs.

    Returns the trained model and the per-epoch loss history.
    """
    if len(measured) != len(labels) or not measured:
        raise ConfigError("need equally many (non-zero) measurements and labels")
    inputs = _stack_slices([right_inverse(m, geometry, fbp_config, workers) for m in measured])
    inputs *= IMAGE_SCALE
    targets = _stack_slices(labels) * IMAGE_SCALE
    rng = np.random.default_rng([config.seed, 1])
    x, y = extract_patches(inputs, targets, config.patch_h, config.patch_w, rng)
    model = _build_model(config)
    history = sgd_train(model, x, y, config, log_fn)
    return model, history


def train_sinogram_denoiser(
    measured,
    image_model: DenoiserModel,
    geometry: FanBeamGeometry,
    config: TrainConfig,
    fbp_config: FbpConfig | None = None,
    workers: int | None = None,
    log_fn=None,
):
    """Fit the sinogram-domain denoiser on reprojected vs measured views.

    For every case the image CNN's reconstruction is reprojected at the
    measured angles; each reprojected view image (energy, z, s) is an input
    and the measured view the target.
    """
    if not len(measured):
        raise ConfigError("need at least one measured case")
    xs, ys = [], []
    for m in measured:
        f_hat = apply_image_model(image_model, right_inverse(m, geometry, fbp_config, workers))
        reproj = forward_project(f_hat, geometry, m.angles, workers)
        xs.append(np.asarray(reproj.data, dtype=np.float32).transpose(1, 0, 2, 3))
        ys.append(np.asarray(m.data, dtype=np.float32).transpose(1, 0, 2, 3))
    inputs = np.concatenate(xs, axis=0) * SINO_SCALE
    targets = np.concatenate(ys, axis=0) * SINO_SCALE
    rng = np.random.default_rng([config.seed, 2])
    x, y = extract_patches(inputs, targets, config.patch_h, config.patch_w, rng)
    model = _build_model(config)
    history = sgd_train(model, x, y, config, log_fn)
    return model, history


# -- inference -----------------------------------------------------------------


@dataclass(frozen=True)
class PipelineModels:
    """Everything needed to run inference.

    ``dense_views`` selects the reprojection grid (None means the full view
    grid); ``tv_weight`` > 0 enables TV post-denoising of the final volume.
    """

    image_model: DenoiserModel
    sino_model: DenoiserModel
    geometry: FanBeamGeometry
    fbp_config: FbpConfig = FbpConfig()
    dense_views: int | None = None
    tv_weight: float = 0.0

    def __post_init__(self):
        if self.tv_weight < 0:
            raise ConfigError("tv_weight must be non-negative")
        if self.dense_views is not None:
            sparse_angles(self.geometry, self.dense_views)  # validates divisibility


@dataclass(frozen=True)
class InferenceResult:
    volume: Volume
    intermediates: dict | None = None


def infer(
    measured: Sinogram,
    models: PipelineModels,
    keep_intermediates: bool = False,
    workers: int | None = None,
) -> InferenceResult:
    """Dual-domain reconstruction of one sparse measurement."""
    geometry = models.geometry
    if measured.geometry != geometry:
        raise ShapeError("measurement geometry does not match the pipeline models")
    f0 = right_inverse(measured, geometry, models.fbp_config, workers)
    f1 = apply_image_model(models.image_model, f0)
    dense = (
        AngleSet.full(geometry)
        if models.dense_views is None
        else sparse_angles(geometry, models.dense_views)
    )
    g1 = forward_project(f1, geometry, dense, workers)
    g2 = apply_sino_model(models.sino_model, g1)
    # right_inverse reduces to plain FBP when the reprojection grid is full
    f2 = right_inverse(g2, geometry, models.fbp_config, workers)
    out = tv_post_denoise(f2, models.tv_weight) if models.tv_weight > 0 else f2
    inter = None
    if keep_intermediates:
        inter = {
            "right_inverse": f0,
            "image_cnn": f1,
            "dense_reprojection": g1,
            "denoised_sinogram": g2,
            "fbp": f2,
        }
    return InferenceResult(out, inter)
