import numpy as np
import pytest

from cmemd import encoder as enc
from cmemd.errors import InvalidArgument, NumericalError


def small_cfg():
    return enc.EncoderConfig(input_dim=3, shallow_width=4, trunk_width=5, height=2, width=1,
                             channels=3)


def naive_forward(params, x, modality):
    """Neuron-by-neuron loop over the same architecture."""
    cfg = params.cfg

    def affine_relu(v, layer, relu=True):
        W, b = params.W(layer), params.b(layer)
        out = []
        for j in range(W.shape[1]):
            s = b[j] + sum(v[i] * W[i, j] for i in range(W.shape[0]))
            out.append(max(s, 0.0) if relu else s)
        return out

    gmaps, lmaps = [], []
    for row, m in zip(x, modality):
        h = affine_relu(row, "shallow_visible" if m == 0 else "shallow_thermal")
        h = affine_relu(h, "shared_trunk")
        gmaps.append(affine_relu(h, "global_stream", relu=False))
        lmaps.append(affine_relu(h, "local_stream", relu=False))
    shape = (len(x), cfg.height, cfg.width, cfg.channels)
    return np.array(gmaps).reshape(shape), np.array(lmaps).reshape(shape)


def test_zero_params_give_zero_maps():
    cfg = small_cfg()
    g, loc, _ = enc.forward(enc.EncoderParams(cfg), np.ones((2, 3)), [0, 1])
    assert np.all(g == 0) and np.all(loc == 0)


def test_forward_matches_loop_oracle():
    cfg = small_cfg()
    rng = np.random.default_rng(0)
    params = enc.EncoderParams.initialize(cfg, rng)
    for t in params.tensors.values():
        t += rng.normal(scale=0.1, size=t.shape)
    x = rng.normal(size=(4, 3))
    mod = np.array([0, 1, 1, 0])
    g, loc, _ = enc.forward(params, x, mod)
    ng, nl = naive_forward(params, x, mod)
    np.testing.assert_allclose(g, ng, atol=1e-10)
    np.testing.assert_allclose(loc, nl, atol=1e-10)


def test_identical_inputs_give_identical_maps():
    cfg = small_cfg()
    params = enc.EncoderParams.initialize(cfg, np.random.default_rng(1))
    params.tensors["shallow_thermal.weight"][...] = params.W("shallow_visible")
    x = np.tile(np.array([[0.3, -1.0, 2.0]]), (2, 1))
    g, loc, _ = enc.forward(params, x, [0, 1])
    np.testing.assert_array_equal(g[0], g[1])
    np.testing.assert_array_equal(loc[0], loc[1])


def test_modality_isolation():
    cfg = small_cfg()
    rng = np.random.default_rng(2)
    params = enc.EncoderParams.initialize(cfg, rng)
    x = rng.normal(size=(4, 3))
    mod = np.array([0, 0, 1, 1])
    before = enc.forward(params, x, mod)[0][mod == 0]
    params.tensors["shallow_thermal.weight"] += 1.0
    after = enc.forward(params, x, mod)[0][mod == 0]
    np.testing.assert_array_equal(before, after)


def test_input_validation():
    cfg = small_cfg()
    params = enc.EncoderParams(cfg)
    with pytest.raises(InvalidArgument):
        enc.forward(params, np.ones((2, 4)), [0, 1])
    with pytest.raises(InvalidArgument):
        enc.forward(params, np.ones((2, 3)), [0, 2])
    with pytest.raises(InvalidArgument):
        enc.forward(params, np.ones((2, 3)), [0])
    _, _, tape = enc.forward(params, np.ones((2, 3)), [0, 1])
    with pytest.raises(InvalidArgument):
        enc.backward(params, tape, np.ones((2, 1)), np.ones((2, 1)))


def test_zero_upstream_gives_zero_gradients():
    cfg = small_cfg()
    params = enc.EncoderParams.initialize(cfg, np.random.default_rng(3))
    _, _, tape = enc.forward(params, np.ones((2, 3)), [0, 1])
    zeros = np.zeros((2, 2, 1, 3))
    enc.backward(params, tape, zeros, zeros)
    assert all(np.all(g == 0) for g in params.grads.values())


def test_linear_layer_gradient_is_outer_product():
    # one sample, only the global head sees a gradient: dW = input (x) upstream
    cfg = small_cfg()
    params = enc.EncoderParams.initialize(cfg, np.random.default_rng(4))
    x = np.array([[1.0, 2.0, -1.0]])
    _, _, tape = enc.forward(params, x, [0])
    up = np.arange(6.0).reshape(1, 2, 1, 3)
    enc.backward(params, tape, up, np.zeros_like(up))
    np.testing.assert_allclose(params.grads["global_stream.weight"],
                               np.outer(tape["a2"][0], up.ravel()))
    np.testing.assert_allclose(params.grads["global_stream.bias"], up.ravel())


def test_full_stack_finite_differences():
    cfg = enc.EncoderConfig()
    rng = np.random.default_rng(5)
    params = enc.EncoderParams.initialize(cfg, rng)
    x = rng.normal(size=(6, cfg.input_dim))
    mod = np.array([0, 1, 0, 1, 0, 1])
    shape = (6, cfg.height, cfg.width, cfg.channels)
    ug, ul = rng.normal(size=shape), rng.normal(size=shape)

    def value():
        g, loc, _ = enc.forward(params, x, mod)
        return np.sum(g * ug) + np.sum(loc * ul)

    _, _, tape = enc.forward(params, x, mod)
    enc.backward(params, tape, ug, ul)
    names = list(params.tensors)
    h = 1e-5
    for _ in range(20):
        name = names[rng.integers(len(names))]
        t = params.tensors[name]
        idx = tuple(rng.integers(0, s) for s in t.shape)
        old = t[idx]
        t[idx] = old + h
        plus = value()
        t[idx] = old - h
        minus = value()
        t[idx] = old
        fd = (plus - minus) / (2 * h)
        assert params.grads[name][idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_thermal_only_batch_leaves_visible_gradient_zero():
    cfg = small_cfg()
    rng = np.random.default_rng(6)
    params = enc.EncoderParams.initialize(cfg, rng)
    _, _, tape = enc.forward(params, rng.normal(size=(3, 3)), [1, 1, 1])
    up = rng.normal(size=(3, 2, 1, 3))
    enc.backward(params, tape, up, up)
    assert np.all(params.grads["shallow_visible.weight"] == 0)


def test_glorot_bounds():
    cfg = enc.EncoderConfig()
    params = enc.EncoderParams.initialize(cfg, np.random.default_rng(7))
    for layer, (fan_in, fan_out) in cfg.layer_shapes().items():
        s = np.sqrt(6 / (fan_in + fan_out))
        assert np.abs(params.W(layer)).max() <= s
        assert np.all(params.b(layer) == 0)


def test_sgd_step_examples():
    p = np.array([1.0])
    g = np.array([0.5])
    enc.sgd_step([("p", p, g)], 0.01)
    assert p[0] == pytest.approx(0.995)
    assert g[0] == 0.0
    enc.sgd_step([("p", p, g)], 0.01)
    assert p[0] == pytest.approx(0.995)


def test_sgd_step_rejects_non_finite_without_moving():
    p = np.array([1.0, 2.0])
    q = np.array([3.0])
    with pytest.raises(NumericalError) as info:
        enc.sgd_step([("p", p, np.array([0.1, 0.1])), ("q", q, np.array([np.nan]))], 0.1)
    assert info.value.diagnostics["tensors"] == ["q"]
    np.testing.assert_array_equal(p, [1.0, 2.0])


def test_momentum_accumulates():
    p = np.array([0.0])
    vel = {}
    for _ in range(2):
        enc.sgd_step([("p", p, np.array([1.0]))], 1.0, momentum=0.5, velocity=vel)
    assert p[0] == pytest.approx(-(1.0 + 1.5))


def test_step_decay_schedule():
    assert [enc.step_decay_lr(e) for e in (0, 29, 30, 60)] == pytest.approx(
        [0.01, 0.01, 0.001, 0.0001])
    # a 20-epoch run decays at epochs 8 and 15 (30/80 and 60/80 of the way)
    assert enc.step_decay_lr(7, total_epochs=20) == pytest.approx(0.01)
    assert enc.step_decay_lr(8, total_epochs=20) == pytest.approx(0.001)
