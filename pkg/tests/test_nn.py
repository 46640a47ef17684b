import numpy as np
import pytest

from mimicinv import autodiff as ad
from mimicinv import nn
from mimicinv.nn import (BatchNorm, CompositionError, Conv, ConvTranspose,
                         Dense, InputResidual, LeakyReLU, MaskMultiply,
                         ParamFileError, ReLU, Reshape, Sigmoid, Tanh,
                         apply, build_network, init_params, layer_from_json,
                         layer_to_json, lift_params, load_params,
                         rmsprop_init, rmsprop_step, save_params,
                         trainable_names)


def test_build_network_shape_chain_surrogate_style():
    # (28,28,1) -> conv 16 -> conv 1 -> mask -> input residual
    net = build_network([
        Conv(5, 5, 1, 16), ReLU(),
        Conv(5, 5, 16, 1), ReLU(),
        MaskMultiply((28, 28, 1)),
        InputResidual((28, 28, 1)),
    ], (28, 28, 1))
    assert net.shapes[0] == (28, 28, 16)
    assert net.shapes[2] == (28, 28, 1)
    assert net.output_shape == (28, 28, 1)


def test_build_network_rejects_bad_chain():
    with pytest.raises(CompositionError):
        build_network([Dense(4, 8), Dense(4, 2)], (4,))
    with pytest.raises(CompositionError):
        build_network([Conv(3, 3, 2, 4)], (8, 8, 1))
    with pytest.raises(CompositionError):
        build_network([MaskMultiply((3, 3, 1))], (4, 4, 1))
    with pytest.raises(CompositionError):
        # residual shape must equal the network input shape
        build_network([Conv(3, 3, 1, 4), InputResidual((8, 8, 4))], (8, 8, 1))


def test_init_mask_is_all_ones():
    net = build_network([MaskMultiply((4, 4, 1))], (4, 4, 1))
    params = init_params(net, 0)
    np.testing.assert_array_equal(params["0.mask"], np.ones((4, 4, 1)))


def test_init_deterministic_under_seed():
    net = build_network([Dense(4, 4), Tanh()], (4,))
    p1, p2 = init_params(net, 42), init_params(net, 42)
    assert p1.keys() == p2.keys()
    for k in p1:
        np.testing.assert_array_equal(p1[k], p2[k])


def test_init_weight_stddev_near_002():
    net = build_network([Dense(100, 100)], (100,))
    params = init_params(net, 3)
    assert 0.015 <= params["0.w"].std() <= 0.025  # 10k draws


def test_apply_tanh_of_zero_is_zero():
    net = build_network([Tanh()], (3,))
    out = apply(net, {}, np.zeros((2, 3)))
    np.testing.assert_array_equal(out, np.zeros((2, 3)))


def test_apply_pure_and_bit_identical():
    net = build_network([Dense(3, 5), Tanh(), Dense(5, 2), Sigmoid()], (3,))
    params = init_params(net, 11)
    x = np.random.default_rng(2).normal(size=(4, 3))
    np.testing.assert_array_equal(apply(net, params, x), apply(net, params, x))


def test_apply_input_residual_adds_gated_input():
    net = build_network([Conv(3, 3, 1, 1), InputResidual((4, 4, 1))], (4, 4, 1))
    params = init_params(net, 0)
    params["0.w"] = np.zeros_like(params["0.w"])
    params["1.w"] = np.full((4, 4, 1), 0.5)
    x = np.random.default_rng(5).normal(size=(2, 4, 4, 1))
    np.testing.assert_allclose(apply(net, params, x), 0.5 * x, atol=1e-15)


def test_batch_norm_inference_neutral_params_near_identity():
    net = build_network([BatchNorm(3)], (5, 5, 3))
    params = init_params(net, 0)
    x = np.random.default_rng(6).normal(size=(2, 5, 5, 3))
    out = apply(net, params, x)
    # eps inside the sqrt makes this approximate, not exact
    np.testing.assert_allclose(out, x, atol=1e-7)


def test_batch_norm_train_normalizes_batch():
    net = build_network([BatchNorm(2)], (2,))
    params = init_params(net, 0)
    x = np.random.default_rng(7).normal(3.0, 2.0, size=(64, 2))
    out = apply(net, params, x, train=True)
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=0), 1.0, atol=1e-4)


def test_batch_norm_gradients_check_out():
    net = build_network([Dense(3, 4), BatchNorm(4), Tanh()], (3,))
    params = init_params(net, 8)

    def graph(x, w, b, scale, shift):
        pv = {"0.w": w, "0.b": b, "1.scale": scale, "1.shift": shift}
        return nn.apply_vars(net, pv, x, train=True).sum()

    rng = np.random.default_rng(9)
    x = rng.normal(size=(5, 3))
    err = ad.grad_check(graph, [x, params["0.w"], params["0.b"],
                                params["1.scale"], params["1.shift"]])
    assert err <= 1e-5


def test_reshape_layer():
    net = build_network([Reshape((2, 2, 1))], (4,))
    out = apply(net, {}, np.arange(8.0).reshape(2, 4))
    assert out.shape == (2, 2, 2, 1)


def test_conv_transpose_generator_tail_shape():
    net = build_network([
        Dense(16, 7 * 7 * 8), ReLU(), Reshape((7, 7, 8)),
        ConvTranspose(4, 4, 1, 8, stride=2), Tanh(),
    ], (16,))
    params = init_params(net, 1)
    out = apply(net, params, np.random.default_rng(3).uniform(-1, 1, (2, 16)))
    assert out.shape == (2, 14, 14, 1)
    assert np.all(np.abs(out) <= 1.0)


# ---------------------------------------------------------------------------
# RMSProp


def test_rmsprop_zero_gradient_keeps_params():
    params = {"w": np.array([1.0, -2.0])}
    state = rmsprop_init(params)
    new, _ = rmsprop_step(params, {"w": np.zeros(2)}, state, 0.1)
    np.testing.assert_array_equal(new["w"], params["w"])


def test_rmsprop_single_step_hand_value():
    # theta=1, g=1, rho=0.9, eps=1e-8, lr=0.1: v'=0.1, theta'=1 - 0.1/(sqrt(0.1)+1e-8)
    params = {"t": np.array(1.0)}
    state = rmsprop_init(params, rho=0.9, eps=1e-8)
    new, st = rmsprop_step(params, {"t": np.array(1.0)}, state, 0.1)
    expected = 1.0 - 0.1 / (np.sqrt(0.1) + 1e-8)
    assert abs(float(new["t"]) - expected) <= 1e-12
    assert abs(float(new["t"]) - 0.683772) <= 1e-6
    assert float(st.acc["t"]) == pytest.approx(0.1, abs=1e-15)


def test_rmsprop_three_step_recurrence():
    rho, eps, lr = 0.9, 1e-8, 0.05
    theta, v = 2.0, 0.0
    params = {"t": np.array(2.0)}
    state = rmsprop_init(params, rho=rho, eps=eps)
    for g in [1.0, -0.5, 0.25]:
        params, state = rmsprop_step(params, {"t": np.array(g)}, state, lr)
        v = rho * v + (1 - rho) * g * g
        theta = theta - lr * g / (np.sqrt(v) + eps)
        assert abs(float(params["t"]) - theta) <= 1e-12
        assert abs(float(state.acc["t"]) - v) <= 1e-15


def test_rmsprop_lr_zero_is_identity():
    rng = np.random.default_rng(12)
    params = {"w": rng.normal(size=(3, 3))}
    state = rmsprop_init(params)
    new, _ = rmsprop_step(params, {"w": rng.normal(size=(3, 3))}, state, 0.0)
    np.testing.assert_array_equal(new["w"], params["w"])


def test_rmsprop_accumulators_nonnegative():
    rng = np.random.default_rng(13)
    params = {"w": rng.normal(size=(4,))}
    state = rmsprop_init(params)
    for _ in range(20):
        params, state = rmsprop_step(params, {"w": rng.normal(size=(4,))}, state, 1e-2)
        assert np.all(state.acc["w"] >= 0)


# ---------------------------------------------------------------------------
# weight files


def test_save_load_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(14)
    params = {
        "a.w": rng.normal(size=(3, 4)),
        "a.b": rng.normal(size=(4,)),
        "scalar": np.array(3.14159),
        "deep": rng.normal(size=(2, 3, 2, 2)),
    }
    path = tmp_path / "weights.bin"
    save_params(params, path)
    loaded = load_params(path)
    assert set(loaded) == set(params)
    for k in params:
        assert loaded[k].dtype == np.float64
        assert np.array_equal(loaded[k], params[k])


def test_save_twice_identical_bytes(tmp_path):
    params = {"w": np.random.default_rng(1).normal(size=(5, 5))}
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_params(params, p1)
    save_params(params, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ParamFileError, match="magic"):
        load_params(path)


def test_load_rejects_truncated(tmp_path):
    path = tmp_path / "w.bin"
    save_params({"w": np.ones((4, 4))}, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-9])
    with pytest.raises(ParamFileError, match="truncated"):
        load_params(path)


def test_empty_param_map_round_trips(tmp_path):
    path = tmp_path / "empty.bin"
    save_params({}, path)
    assert load_params(path) == {}


def test_trainable_names_exclude_running_stats():
    net = build_network([Conv(3, 3, 1, 2), BatchNorm(2), LeakyReLU()], (4, 4, 1))
    names = trainable_names(net)
    assert "1.running_mean" not in names
    assert "1.running_var" not in names
    assert set(names) == {"0.w", "0.b", "1.scale", "1.shift"}


def test_layer_json_round_trip():
    layers = [Dense(3, 4), Conv(5, 5, 1, 16, 2, "valid"), ConvTranspose(4, 4, 8, 16, 2),
              ReLU(), LeakyReLU(0.1), Tanh(), Sigmoid(), BatchNorm(8),
              MaskMultiply((4, 4, 1)), InputResidual((4, 4, 1)), Reshape((2, 8))]
    for layer in layers:
        assert layer_from_json(layer_to_json(layer)) == layer
