"""Sparse-view dual-energy fan-beam CT reconstruction toolkit.

Simulates a stationary multi-source scanner on synthetic phantoms and
reconstructs its sparse-view data four ways: filtered backprojection, an
iterative total-variation solver, an image-domain denoising network, and a
dual-domain pipeline that also repairs the reprojected dense sinogram before
the final backprojection.  Reconstructions are scored by normalized mean
squared error against the measured views.
"""

from .analytic import FbpConfig, fbp, ramp_filter_response, right_inverse
from .errors import (
    ConfigError,
    DivergenceError,
    FormatError,
    ShapeError,
    SparsectError,
    TrainingDivergedError,
    UndefinedMetricError,
)
from .evaluate import (
    METHOD_ORDER,
    MethodReport,
    compare_methods,
    evaluate_method,
    format_report_table,
    load_report,
    nmse,
    render_report_figures,
    write_report,
)
from .geometry import (
    PAPER_SCANNER,
    AngleSet,
    FanBeamGeometry,
    RawAcquisition,
    RebinResult,
    StationaryLayout,
    build_fan_geometry,
    load_scanner_config,
    rebin,
    sparse_angles,
)
from .manifest import (
    file_sha256,
    load_manifest,
    manifest_hash,
    verify_outputs,
    write_manifest,
    write_timing,
)
from .mbir import MbirConfig, MbirResult, mbir_tv, tv_post_denoise, tv_value
from .neural import (
    DenoiserModel,
    TrainConfig,
    build_denoiser,
    load_model,
    save_model,
    sgd_train,
)
from .phantom import (
    MATERIALS,
    CorpusSplit,
    NoiseModel,
    PhantomSpec,
    Primitive,
    generate_corpus,
    load_specs,
    rasterize,
    save_specs,
    simulate_acquisition,
    split_corpus,
)
from .pipeline import (
    InferenceResult,
    PipelineModels,
    apply_image_model,
    apply_sino_model,
    extract_patches,
    infer,
    make_labels,
    train_image_denoiser,
    train_sinogram_denoiser,
)
from .presets import Preset, desk_preset, get_preset, paper_preset
from .projector import (
    ENERGY_LABELS,
    Sinogram,
    Volume,
    back_project,
    forward_project,
    sample_views,
    zero_pad_views,
)
from .tensorio import (
    load_sinogram,
    load_tensor,
    load_volume,
    save_sinogram,
    save_tensor,
    save_volume,
)

__version__ = "0.1.0"

__all__ = [
    "AngleSet",
    "CorpusSplit",
    "ConfigError",
    "DenoiserModel",
    "DivergenceError",
    "ENERGY_LABELS",
    "FanBeamGeometry",
    "FbpConfig",
    "FormatError",
    "InferenceResult",
    "MATERIALS",
    "METHOD_ORDER",
    "MbirConfig",
    "MbirResult",
    "MethodReport",
    "NoiseModel",
    "PAPER_SCANNER",
    "PhantomSpec",
    "PipelineModels",
    "Preset",
    "Primitive",
    "RawAcquisition",
    "RebinResult",
    "ShapeError",
    "Sinogram",
    "SparsectError",
    "StationaryLayout",
    "TrainConfig",
    "TrainingDivergedError",
    "UndefinedMetricError",
    "Volume",
    "apply_image_model",
    "apply_sino_model",
    "back_project",
    "build_denoiser",
    "build_fan_geometry",
    "compare_methods",
    "desk_preset",
    "evaluate_method",
    "extract_patches",
    "fbp",
    "file_sha256",
    "format_report_table",
    "forward_project",
    "generate_corpus",
    "get_preset",
    "infer",
    "load_manifest",
    "load_model",
    "load_report",
    "load_scanner_config",
    "load_sinogram",
    "load_specs",
    "load_tensor",
    "load_volume",
    "make_labels",
    "manifest_hash",
    "mbir_tv",
    "nmse",
    "paper_preset",
    "ramp_filter_response",
    "rasterize",
    "rebin",
    "render_report_figures",
    "right_inverse",
    "sample_views",
    "save_model",
    "save_sinogram",
    "save_specs",
    "save_tensor",
    "save_volume",
    "sgd_train",
    "simulate_acquisition",
    "sparse_angles",
    "split_corpus",
    "train_image_denoiser",
    "train_sinogram_denoiser",
    "tv_post_denoise",
    "tv_value",
    "verify_outputs",
    "write_manifest",
    "write_report",
    "write_timing",
    "zero_pad_views",
]
