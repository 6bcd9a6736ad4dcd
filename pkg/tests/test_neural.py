"""Network graph, gradient, training and serialization tests."""

import copy
import json
import struct

import numpy as np
import pytest

from sparsect.errors import ConfigError, FormatError, ShapeError, TrainingDivergedError
from sparsect.neural.io import load_model, save_model
from sparsect.neural.model import DenoiserModel, LayerSpec, backward, build_denoiser, forward
from sparsect.neural.train import TrainConfig, mse_loss, sgd_train


def _tiny_model(seed, dtype=np.float64):
    return build_denoiser(
        in_channels=2, out_channels=2, base_channels=3, depth=1, seed=seed, dtype=dtype
    )


def _loss_on(model, x, t):
    pred = forward(model, x, mode="train")
    return float(np.mean((pred - t) ** 2))


# -- architecture ----------------------------------------------------------------


def test_layer_spec_validation():
    with pytest.raises(ConfigError):
        LayerSpec("dense")
    with pytest.raises(ConfigError):
        LayerSpec("concat")  # missing skip_from
    with pytest.raises(ConfigError):
        build_denoiser(depth=0)
    with pytest.raises(ConfigError):
        build_denoiser(base_channels=0)


def test_denoiser_shape_contract():
    model = build_denoiser(base_channels=4, depth=2, seed=0)
    assert model.in_channels == 2
    assert model.out_channels == 2
    assert model.spatial_divisor == 4
    x = np.random.default_rng(0).standard_normal((3, 2, 16, 12)).astype(np.float32)
    y = forward(model, x, mode="eval")
    assert y.shape == x.shape
    with pytest.raises(ShapeError):
        forward(model, x[:, :1], mode="eval")
    with pytest.raises(ShapeError):
        forward(model, x[:, :, :14, :], mode="eval")  # 14 % 4 != 0
    with pytest.raises(ShapeError):
        forward(model, x[0], mode="eval")
    with pytest.raises(ConfigError):
        forward(model, x, mode="predict")


def test_model_construction_validation():
    model = _tiny_model(0)
    with pytest.raises(ConfigError):
        DenoiserModel(model.layers, model.params, model.state, pad_mode="reflect")
    with pytest.raises(ConfigError):
        DenoiserModel(model.layers[:-1], model.params, model.state)


def test_backward_requires_train_forward():
    model = _tiny_model(0)
    x = np.zeros((1, 2, 4, 4))
    forward(model, x, mode="eval")
    with pytest.raises(ConfigError):
        backward(model, np.zeros((1, 2, 4, 4)))


# -- gradients -------------------------------------------------------------------


def test_finite_difference_gradients():
    # analytic backprop vs central differences on randomized tiny models
    h = 1e-6
    for trial in range(10):
        rng = np.random.default_rng(100 + trial)
        model = _tiny_model(seed=200 + trial)
        x = rng.standard_normal((2, 2, 8, 8))
        t = rng.standard_normal((2, 2, 8, 8))
        pred = forward(model, x, mode="train")
        _, grad = mse_loss(pred, t)
        grads, grad_in = backward(model, grad)
        checked = 0
        for li in range(len(model.layers)):
            for key, arr in model.params[li].items():
                flat = arr.reshape(-1)
                idx = int(rng.integers(0, flat.size))
                an = grads[li][key].reshape(-1)[idx]
                orig = flat[idx]
                flat[idx] = orig + h
                lp = _loss_on(model, x, t)
                flat[idx] = orig - h
                lm = _loss_on(model, x, t)
                flat[idx] = orig
                fd = (lp - lm) / (2 * h)
                # 1e-8 absolute floor: conv biases feeding bn have exactly
                # zero gradient, where central differences see only roundoff
                assert abs(fd - an) <= max(1e-4 * max(abs(fd), abs(an)), 1e-8), (
                    trial, li, key, fd, an,
                )
                checked += 1
        assert checked >= 10
        # input gradient at a random coordinate
        flat = x.reshape(-1)
        idx = int(rng.integers(0, flat.size))
        an = grad_in.reshape(-1)[idx]
        orig = flat[idx]
        flat[idx] = orig + h
        lp = _loss_on(model, x, t)
        flat[idx] = orig - h
        lm = _loss_on(model, x, t)
        flat[idx] = orig
        fd = (lp - lm) / (2 * h)
        assert abs(fd - an) <= max(1e-4 * max(abs(fd), abs(an)), 1e-8)


# -- batch-norm modes ------------------------------------------------------------


def test_eval_mode_is_pure_and_deterministic():
    model = _tiny_model(3, dtype=np.float32)
    x = np.random.default_rng(1).standard_normal((2, 2, 8, 8)).astype(np.float32)
    state_before = copy.deepcopy(model.state)
    y1 = forward(model, x, mode="eval")
    y2 = forward(model, x, mode="eval")
    np.testing.assert_array_equal(y1, y2)
    for before, after in zip(state_before, model.state):
        for key in before:
            np.testing.assert_array_equal(before[key], after[key])


def test_train_mode_updates_running_stats():
    model = _tiny_model(3, dtype=np.float32)
    x = 5.0 + np.random.default_rng(1).standard_normal((2, 2, 8, 8)).astype(np.float32)
    state_before = copy.deepcopy(model.state)
    forward(model, x, mode="train")
    moved = any(
        not np.array_equal(before[key], after[key])
        for before, after in zip(state_before, model.state)
        for key in before
    )
    assert moved


# -- training --------------------------------------------------------------------


def test_train_config_validation():
    for bad in (
        {"epochs": 0},
        {"batch_size": 0},
        {"lr_initial": 0.0},
        {"lr_final": -1e-5},
        {"weight_decay": -0.1},
        {"patch_h": 0},
        {"depth": 0},
    ):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_learning_rate_schedule_is_geometric():
    cfg = TrainConfig(epochs=11, lr_initial=1e-2, lr_final=1e-4)
    assert cfg.learning_rate(0) == pytest.approx(1e-2)
    assert cfg.learning_rate(10) == pytest.approx(1e-4)
    assert cfg.learning_rate(5) == pytest.approx(1e-3)
    one = TrainConfig(epochs=1, lr_initial=3e-2, lr_final=1e-5)
    assert one.learning_rate(0) == pytest.approx(3e-2)


def test_training_is_bit_reproducible():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((10, 2, 8, 8)).astype(np.float32)
    t = rng.standard_normal((10, 2, 8, 8)).astype(np.float32)
    cfg = TrainConfig(
        epochs=3, batch_size=4, lr_initial=1e-2, lr_final=1e-3,
        patch_h=8, patch_w=8, base_channels=3, depth=1, seed=11,
    )
    runs = []
    for _ in range(2):
        model = build_denoiser(base_channels=3, depth=1, seed=11, dtype=np.float32)
        hist = sgd_train(model, x, t, cfg, log_fn=None)
        runs.append((hist, model))
    assert runs[0][0] == runs[1][0]
    for p0, p1 in zip(runs[0][1].params, runs[1][1].params):
        for key in p0:
            np.testing.assert_array_equal(p0[key], p1[key])
    for s0, s1 in zip(runs[0][1].state, runs[1][1].state):
        for key in s0:
            np.testing.assert_array_equal(s0[key], s1[key])


def _block_images(rng, n, size):
    x = np.zeros((n, 2, size, size), dtype=np.float32)
    for i in range(n):
        for c in range(2):
            top, left = rng.integers(0, size // 2, 2)
            hh, ww = rng.integers(size // 4, size // 2 + 1, 2)
            x[i, c, top : top + hh, left : left + ww] = rng.uniform(0.5, 1.5)
    return x


def test_training_fits_identity_task():
    # the identity map is exactly representable, so the loss must collapse
    x = _block_images(np.random.default_rng(3), 12, 16)
    cfg = TrainConfig(
        epochs=20, batch_size=12, lr_initial=1e-1, lr_final=1e-2,
        patch_h=16, patch_w=16, base_channels=8, depth=1, seed=0,
    )
    model = build_denoiser(base_channels=8, depth=1, seed=0, dtype=np.float32)
    hist = sgd_train(model, x, x, cfg)
    assert hist[-1] < 0.1 * hist[0]


def test_zero_learning_rate_freezes_training():
    # one sample so shuffling cannot reorder batch-norm accumulation
    x = _block_images(np.random.default_rng(4), 1, 8)
    cfg = TrainConfig(
        epochs=4, batch_size=1, lr_initial=0.0, lr_final=0.0,
        patch_h=8, patch_w=8, base_channels=3, depth=1, seed=0,
    )
    model = build_denoiser(base_channels=3, depth=1, seed=0, dtype=np.float32)
    w_before = model.params[0]["w"].copy()
    hist = sgd_train(model, x, 0.5 * x, cfg)
    assert all(h == hist[0] for h in hist)
    np.testing.assert_array_equal(model.params[0]["w"], w_before)


def test_zero_initialized_network_outputs_zero():
    model = build_denoiser(base_channels=3, depth=1, seed=0, dtype=np.float32)
    for p in model.params:
        for arr in p.values():
            arr[...] = 0.0
    x = np.random.default_rng(0).standard_normal((2, 2, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(forward(model, x, mode="eval"), np.zeros_like(x))


def test_circular_padding_training_is_shift_consistent():
    # shifting every image by a multiple of the pooling footprint must not
    # change the loss trajectory when convolutions pad circularly
    x = _block_images(np.random.default_rng(5), 8, 16)
    t = 0.5 * x
    cfg = TrainConfig(
        epochs=3, batch_size=4, lr_initial=1e-2, lr_final=1e-3,
        patch_h=16, patch_w=16, base_channels=3, depth=2, seed=2,
    )
    histories = []
    for shift in (0, 4):
        model = build_denoiser(
            base_channels=3, depth=2, pad_mode="circular", seed=2, dtype=np.float64
        )
        xs = np.roll(x, shift, axis=3)
        ts = np.roll(t, shift, axis=3)
        histories.append(sgd_train(model, xs, ts, cfg))
    np.testing.assert_allclose(histories[0], histories[1], rtol=1e-12)


def test_training_divergence_raises():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 2, 8, 8)).astype(np.float32)
    cfg = TrainConfig(
        epochs=5, batch_size=2, lr_initial=1e12, lr_final=1e12,
        patch_h=8, patch_w=8, base_channels=3, depth=1, seed=0,
    )
    model = build_denoiser(base_channels=3, depth=1, seed=0, dtype=np.float32)
    with pytest.raises(TrainingDivergedError) as err:
        sgd_train(model, x, 2.0 * x, cfg)
    assert err.value.epoch >= 0
    assert err.value.batch >= 0


def test_training_input_validation():
    model = _tiny_model(0, dtype=np.float32)
    cfg = TrainConfig(epochs=1, patch_h=8, patch_w=8, base_channels=3, depth=1)
    x = np.zeros((2, 2, 8, 8), dtype=np.float32)
    with pytest.raises(ConfigError):
        sgd_train(model, x, np.zeros((3, 2, 8, 8), dtype=np.float32), cfg)
    with pytest.raises(ConfigError):
        sgd_train(model, x[0], x[0], cfg)
    with pytest.raises(ConfigError):
        sgd_train(model, x[:0], x[:0], cfg)


# -- serialization ---------------------------------------------------------------


def test_model_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(5)
    model = build_denoiser(base_channels=3, depth=2, seed=9, dtype=np.float32)
    x = rng.standard_normal((2, 2, 8, 8)).astype(np.float32)
    forward(model, x, mode="train")  # move running stats off their init
    path = tmp_path / "model.bin"
    save_model(path, model)
    loaded = load_model(path)
    assert loaded.pad_mode == model.pad_mode
    assert loaded.layers == model.layers
    for g0, g1 in zip(model.params, loaded.params):
        assert sorted(g0) == sorted(g1)
        for key in g0:
            np.testing.assert_array_equal(g0[key], g1[key])
    for s0, s1 in zip(model.state, loaded.state):
        for key in s0:
            np.testing.assert_array_equal(s0[key], s1[key])
    np.testing.assert_array_equal(
        forward(model, x, mode="eval"), forward(loaded, x, mode="eval")
    )


def test_save_rejects_non_finite_weights(tmp_path):
    model = build_denoiser(base_channels=3, depth=1, seed=0, dtype=np.float32)
    model.params[0]["w"][0, 0, 0, 0] = np.nan
    with pytest.raises(FormatError):
        save_model(tmp_path / "bad.bin", model)


def test_load_rejects_corrupt_containers(tmp_path):
    model = build_denoiser(base_channels=3, depth=1, seed=0, dtype=np.float32)
    path = tmp_path / "model.bin"
    save_model(path, model)
    raw = path.read_bytes()

    def expect_error(data, name):
        p = tmp_path / name
        p.write_bytes(data)
        with pytest.raises(FormatError):
            load_model(p)

    expect_error(raw[:10], "short.bin")
    expect_error(b"NOTMODEL" + raw[8:], "magic.bin")
    expect_error(raw[:8] + struct.pack("<II", 99, 0) + raw[16:], "version.bin")
    expect_error(raw[:-3], "truncated.bin")
    expect_error(raw + b"\x00\x00", "trailing.bin")
    (header_len,) = struct.unpack_from("<Q", raw, 16)
    header = json.loads(raw[24 : 24 + header_len].decode())
    header["tensors"][0]["layer"] = 999
    bad_header = json.dumps(header, sort_keys=True).encode()
    expect_error(
        raw[:16] + struct.pack("<Q", len(bad_header)) + bad_header + raw[24 + header_len :],
        "slot.bin",
    )
    expect_error(raw[:24] + b"{nope" + raw[24 + header_len :][:-header_len + 5], "json.bin")
