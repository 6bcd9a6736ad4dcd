"""Encoder-decoder denoiser expressed as a flat layer graph.

The graph is a plain list of :class:`LayerSpec`; each layer consumes the
previous layer's output, and ``concat`` layers additionally pull a recorded
encoder output (``skip_from`` indexes into the layer list).  This keeps
forward, backward and serialization order trivially well defined.

``build_denoiser`` produces the U-shaped architecture used for both the image
and sinogram denoisers: ``depth`` pooling stages with channel doubling from
``base_channels``, skip concatenations on the way up, and a linear 1x1 output
convolution mapping back to the two energy channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, ShapeError
from . import layers as L

_KINDS = ("conv3", "conv1", "bn", "relu", "pool", "up", "concat")
_PAD_MODES = ("zeros", "circular")


@dataclass(frozen=True)
class LayerSpec:
    """One node of the layer graph.

    ``c_in``/``c_out`` are only meaningful for convolution and bn layers;
    ``skip_from`` only for concat layers (index of the encoder layer whose
    output is appended channel-wise).
    """

    kind: str
    c_in: int = 0
    c_out: int = 0
    skip_from: int = -1

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind == "concat" and self.skip_from < 0:
            raise ConfigError("concat layer needs a skip_from index")


class DenoiserModel:
    """Layer graph plus parameter and batch-norm state arrays.

    Attributes
    ----------
    layers : list[LayerSpec]
    params : list[dict]
        Per layer: conv layers hold ``w``/``b``, bn layers ``gamma``/``beta``;
        other layers have empty dicts.
    state : list[dict]
        Per layer: bn layers hold running ``mean``/``var``.
    pad_mode : str
        "zeros" or "circular" convolution padding.
    """

    def __init__(self, layer_specs, params, state, pad_mode="zeros"):
        if pad_mode not in _PAD_MODES:
            raise ConfigError(f"pad_mode must be one of {_PAD_MODES}")
        if not (len(layer_specs) == len(params) == len(state)):
            raise ConfigError("layers, params and state must have equal length")
        self.layers = list(layer_specs)
        self.params = params
        self.state = state
        self.pad_mode = pad_mode
        self._tape = None
        self._tape_key = None

    @property
    def dtype(self):
        for p in self.params:
            if "w" in p:
                return p["w"].dtype
        return np.dtype(np.float32)

    @property
    def in_channels(self) -> int:
        for spec in self.layers:
            if spec.kind.startswith("conv"):
                return spec.c_in
        raise ConfigError("model has no convolution layers")

    @property
    def out_channels(self) -> int:
        for spec in reversed(self.layers):
            if spec.kind.startswith("conv"):
                return spec.c_out
        raise ConfigError("model has no convolution layers")

    @property
    def spatial_divisor(self) -> int:
        """Input spatial dims must be multiples of this (2 ** n_poolings)."""
        n_pool = sum(1 for s in self.layers if s.kind == "pool")
        return 1 << n_pool

    def n_parameters(self) -> int:
        return sum(int(a.size) for p in self.params for a in p.values())

    def arch_descriptor(self) -> dict:
        return {
            "pad_mode": self.pad_mode,
            "layers": [
                {"kind": s.kind, "c_in": s.c_in, "c_out": s.c_out, "skip_from": s.skip_from}
                for s in self.layers
            ],
        }


def build_denoiser(
    in_channels: int = 2,
    out_channels: int = 2,
    base_channels: int = 32,
    depth: int = 4,
    pad_mode: str = "zeros",
    seed: int = 0,
    dtype=np.float32,
) -> DenoiserModel:
    """Construct and He-initialize the encoder-decoder denoiser.

    ``depth`` is the number of 2x2 pooling stages; channel width doubles per
    stage starting from ``base_channels``.
    """
    if depth < 1:
        raise ConfigError("depth must be at least 1")
    if base_channels < 1:
        raise ConfigError("base_channels must be at least 1")
    specs: list[LayerSpec] = []

    def block(ci, co):
        specs.append(LayerSpec("conv3", ci, co))
        specs.append(LayerSpec("bn", co, co))
        specs.append(LayerSpec("relu", co, co))

    widths = [base_channels * (1 << s) for s in range(depth + 1)]
    skip_at = []
    block(in_channels, widths[0])
    block(widths[0], widths[0])
    skip_at.append(len(specs) - 1)
    for s in range(1, depth + 1):
        specs.append(LayerSpec("pool", widths[s - 1], widths[s - 1]))
        block(widths[s - 1], widths[s])
        block(widths[s], widths[s])
        if s < depth:
            skip_at.append(len(specs) - 1)
    for s in range(depth, 0, -1):
        specs.append(LayerSpec("up", widths[s], widths[s]))
        block(widths[s], widths[s - 1])
        specs.append(LayerSpec("concat", widths[s - 1], 2 * widths[s - 1], skip_from=skip_at[s - 1]))
        block(2 * widths[s - 1], widths[s - 1])
        block(widths[s - 1], widths[s - 1])
    specs.append(LayerSpec("conv1", widths[0], out_channels))

    rng = np.random.default_rng(seed)
    params: list[dict] = []
    state: list[dict] = []
    for spec in specs:
        p: dict = {}
        st: dict = {}
        if spec.kind == "conv3":
            std = np.sqrt(2.0 / (spec.c_in * 9))
            p["w"] = (rng.standard_normal((spec.c_out, spec.c_in, 3, 3)) * std).astype(dtype)
            p["b"] = np.zeros(spec.c_out, dtype=dtype)
        elif spec.kind == "conv1":
            std = np.sqrt(2.0 / spec.c_in)
            p["w"] = (rng.standard_normal((spec.c_out, spec.c_in, 1, 1)) * std).astype(dtype)
            p["b"] = np.zeros(spec.c_out, dtype=dtype)
        elif spec.kind == "bn":
            p["gamma"] = np.ones(spec.c_out, dtype=dtype)
            p["beta"] = np.zeros(spec.c_out, dtype=dtype)
            st["mean"] = np.zeros(spec.c_out, dtype=dtype)
            st["var"] = np.ones(spec.c_out, dtype=dtype)
        params.append(p)
        state.append(st)
    return DenoiserModel(specs, params, state, pad_mode)


def forward(model: DenoiserModel, x: np.ndarray, mode: str = "eval") -> np.ndarray:
    """Run the graph on a batch (n, c, h, w).

    Training mode records the backward tape on the model and updates bn
    running statistics; eval mode touches neither.  Spatial dims must be
    divisible by ``model.spatial_divisor``.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=model.dtype)
    if x.ndim != 4:
        raise ShapeError(f"model input must be 4D (n, c, h, w), got shape {x.shape}")
    if x.shape[1] != model.in_channels:
        raise ShapeError(
            f"model expects {model.in_channels} input channels, got {x.shape[1]}"
        )
    div = model.spatial_divisor
    if x.shape[2] % div or x.shape[3] % div:
        raise ShapeError(
            f"spatial dims {x.shape[2]}x{x.shape[3]} not divisible by {div}"
        )
    training = mode == "train"
    outputs: list[np.ndarray] = []
    tape: list = []
    cur = x
    for i, spec in enumerate(model.layers):
        p = model.params[i]
        if spec.kind == "conv3":
            cur, cache = L.conv3_forward(cur, p["w"], p["b"], model.pad_mode)
        elif spec.kind == "conv1":
            cur, cache = L.conv1_forward(cur, p["w"], p["b"])
        elif spec.kind == "bn":
            cur, cache = L.bn_forward(cur, p["gamma"], p["beta"], model.state[i], training)
        elif spec.kind == "relu":
            cur, cache = L.relu_forward(cur)
        elif spec.kind == "pool":
            cur, cache = L.pool_forward(cur)
        elif spec.kind == "up":
            cur, cache = L.upsample_forward(cur)
        else:  # concat
            cur, cache = L.concat_forward(cur, outputs[spec.skip_from])
        outputs.append(cur)
        if training:
            tape.append(cache)
    if training:
        model._tape = tape
        model._tape_key = (x.shape, x.dtype)
    return cur


def backward(model: DenoiserModel, grad_out: np.ndarray):
    """Backpropagate through the last training-mode forward pass.

    Returns
    -------
    (grads, grad_in)
        ``grads`` mirrors ``model.params`` (same keys per layer);
        ``grad_in`` is the gradient with respect to the network input.

    Raises
    ------
    ConfigError
        If no training-mode forward pass has been recorded.
    """
    if model._tape is None:
        raise ConfigError("backward requires a prior forward pass in train mode")
    n_layers = len(model.layers)
    grads = [dict() for _ in range(n_layers)]
    # gradient w.r.t. each layer's output
    gout: list = [None] * n_layers
    gout[-1] = np.asarray(grad_out, dtype=model.dtype)
    grad_in = None
    for i in range(n_layers - 1, -1, -1):
        g = gout[i]
        if g is None:
            raise ConfigError("disconnected layer graph: missing output gradient")
        spec = model.layers[i]
        cache = model._tape[i]
        if spec.kind == "conv3":
            dx, dw, db = L.conv3_backward(g, cache)
            grads[i] = {"w": dw, "b": db}
        elif spec.kind == "conv1":
            dx, dw, db = L.conv1_backward(g, cache)
            grads[i] = {"w": dw, "b": db}
        elif spec.kind == "bn":
            dx, dgamma, dbeta = L.bn_backward(g, cache)
            grads[i] = {"gamma": dgamma, "beta": dbeta}
        elif spec.kind == "relu":
            dx = L.relu_backward(g, cache)
        elif spec.kind == "pool":
            dx = L.pool_backward(g, cache)
        elif spec.kind == "up":
            dx = L.upsample_backward(g, cache)
        else:  # concat
            dx, dskip = L.concat_backward(g, cache)
            j = spec.skip_from
            gout[j] = dskip if gout[j] is None else gout[j] + dskip
        if i == 0:
            grad_in = dx
        else:
            gout[i - 1] = dx if gout[i - 1] is None else gout[i - 1] + dx
    return grads, grad_in
