import numpy as np
import pytest

from gaborholo import layers
from gaborholo.layers import ShapeError
from gaborholo.unet import (
    CheckpointError,
    Parameters,
    StateError,
    UNetConfig,
    init_parameters,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    unet_backward,
    unet_forward,
)
from gradcheck import away_from_zero, jitter_biases, smooth_network
from oracles import finite_difference, rel_error

GRAD_TOL = 1e-6


# -- conv2d ----------------------------------------------------------------------


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 5, 7))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[1, 1, c, c] = 1
    out, _ = layers.conv2d(x, w, np.zeros(3))
    np.testing.assert_array_equal(out, x)


def test_conv_single_pixel_all_ones():
    out, _ = layers.conv2d(np.full((1, 1, 1, 1), 2.5), np.ones((3, 3, 1, 1)), np.zeros(1))
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 2.5


def test_conv_matches_naive_loop():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 2, 5, 4))
    w = rng.standard_normal((3, 3, 2, 3))
    b = rng.standard_normal(3)
    out, _ = layers.conv2d(x, w, b)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 3, 5, 4))
    for n in range(2):
        for o in range(3):
            for y in range(5):
                for z in range(4):
                    ref[n, o, y, z] = np.sum(xp[n, :, y : y + 3, z : z + 3] * w[:, :, :, o].transpose(2, 0, 1)) + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        layers.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((3, 3, 3, 1)), np.zeros(1))


@pytest.mark.parametrize("k", [3, 1])
def test_conv_gradients(k):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((k, k, 3, 4))
    b = rng.standard_normal(4)
    up = rng.standard_normal((2, 4, 8, 8))
    f = lambda: float(np.sum(layers.conv2d(x, w, b)[0] * up))
    _, cache = layers.conv2d(x, w, b)
    dx, dw, db = layers.conv2d_backward(cache, up)
    assert rel_error(dx, finite_difference(f, x)) < GRAD_TOL
    assert rel_error(dw, finite_difference(f, w)) < GRAD_TOL
    assert rel_error(db, finite_difference(f, b)) < GRAD_TOL


# -- relu ------------------------------------------------------------------------


def test_relu_values():
    neg = -np.abs(np.random.default_rng(3).standard_normal((1, 2, 3, 3)))
    assert np.all(layers.relu(neg)[0] == 0)
    pos = -neg
    np.testing.assert_array_equal(layers.relu(pos)[0], pos)


def test_relu_zero_subgradient():
    x = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)
    np.testing.assert_array_equal(layers.relu_backward(x, np.ones_like(x)).ravel(), [0, 0, 1])


def test_relu_gradient():
    rng = np.random.default_rng(4)
    x = away_from_zero(rng, (2, 3, 4, 4))
    up = rng.standard_normal(x.shape)
    f = lambda: float(np.sum(layers.relu(x)[0] * up))
    assert rel_error(layers.relu_backward(x, up), finite_difference(f, x)) < GRAD_TOL


# -- maxpool ---------------------------------------------------------------------


def test_maxpool_basic():
    out, (idx, _) = layers.maxpool2(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert out.item() == 4 and idx.item() == 3


def test_maxpool_ties_first_element():
    out, (idx, _) = layers.maxpool2(np.full((1, 1, 4, 6), 7.0))
    assert np.all(out == 7)
    expected = np.array([[0, 2, 4], [12, 14, 16]])
    np.testing.assert_array_equal(idx[0, 0], expected)


def test_maxpool_odd_extent():
    with pytest.raises(ShapeError):
        layers.maxpool2(np.zeros((1, 1, 3, 4)))


def test_maxpool_gradient():
    rng = np.random.default_rng(5)
    x = rng.permutation(2 * 3 * 6 * 8).reshape(2, 3, 6, 8) * 0.01  # distinct values, no near-ties
    up = rng.standard_normal((2, 3, 3, 4))
    f = lambda: float(np.sum(layers.maxpool2(x)[0] * up))
    _, cache = layers.maxpool2(x)
    assert rel_error(layers.maxpool2_backward(cache, up), finite_difference(f, x)) < GRAD_TOL


# -- convtranspose ---------------------------------------------------------------


def test_convtranspose_single_pixel():
    out, _ = layers.convtranspose2(np.full((1, 1, 1, 1), 3.0), np.ones((2, 2, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), 3.0))


def test_convtranspose_zero_input_bias():
    out, _ = layers.convtranspose2(np.zeros((2, 3, 2, 2)), np.ones((2, 2, 3, 2)), np.array([0.5, -1.0]))
    assert out.shape == (2, 2, 4, 4)
    assert np.all(out[:, 0] == 0.5) and np.all(out[:, 1] == -1)


def test_convtranspose_channel_mismatch():
    with pytest.raises(ShapeError):
        layers.convtranspose2(np.zeros((1, 2, 2, 2)), np.zeros((2, 2, 3, 1)), np.zeros(1))


def test_convtranspose_gradients():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 3, 3, 4))
    w = rng.standard_normal((2, 2, 3, 5))
    b = rng.standard_normal(5)
    up = rng.standard_normal((2, 5, 6, 8))
    f = lambda: float(np.sum(layers.convtranspose2(x, w, b)[0] * up))
    _, cache = layers.convtranspose2(x, w, b)
    dx, dw, db = layers.convtranspose2_backward(cache, up)
    assert rel_error(dx, finite_difference(f, x)) < GRAD_TOL
    assert rel_error(dw, finite_difference(f, w)) < GRAD_TOL
    assert rel_error(db, finite_difference(f, b)) < GRAD_TOL


# -- concat / mse ----------------------------------------------------------------


def test_concat_and_split():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((2, 4, 3, 3))
    b = rng.standard_normal((2, 4, 3, 3))
    c, boundary = layers.concat_channels(a, b)
    assert c.shape == (2, 8, 3, 3)
    ga, gb = layers.split_channels(boundary, c)
    np.testing.assert_array_equal(ga, a)
    np.testing.assert_array_equal(gb, b)
    with pytest.raises(ShapeError):
        layers.concat_channels(a, np.zeros((2, 4, 3, 2)))


def test_concat_gradient_routing():
    rng = np.random.default_rng(8)
    a = rng.standard_normal((1, 2, 3, 3))
    b = rng.standard_normal((1, 3, 3, 3))
    head = rng.standard_normal((1, 5, 3, 3))
    f = lambda: float(np.sum(layers.concat_channels(a, b)[0] * head))
    ga, gb = layers.split_channels(2, head)
    assert rel_error(ga, finite_difference(f, a)) < GRAD_TOL
    assert rel_error(gb, finite_difference(f, b)) < GRAD_TOL


def test_mse_values():
    p = np.ones((1, 1, 1, 2))
    loss, grad = layers.mse_loss(p, np.zeros_like(p))
    assert loss == 1.0
    np.testing.assert_array_equal(grad, np.ones_like(p))
    loss, grad = layers.mse_loss(p, p)
    assert loss == 0 and np.all(grad == 0)
    with pytest.raises(ShapeError):
        layers.mse_loss(p, np.zeros((1, 1, 2, 1)))


def test_mse_gradient():
    rng = np.random.default_rng(9)
    p = rng.standard_normal((2, 1, 4, 4))
    t = rng.standard_normal(p.shape)
    _, grad = layers.mse_loss(p, t)
    assert rel_error(grad, finite_difference(lambda: layers.mse_loss(p, t)[0], p, eps=1e-6)) < 1e-8


# -- network ---------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        UNetConfig(input_size=24)
    with pytest.raises(ValueError):
        UNetConfig(input_size=8, depth=4)
    with pytest.raises(ValueError):
        UNetConfig(input_size=8, depth=1, base_channels=0)
    UNetConfig(input_size=8, depth=3)


def test_full_scale_channel_schedule_and_parameter_count():
    cfg = UNetConfig(512, 7, 16)
    shapes = cfg.layer_shapes()
    enc = [shapes[f"enc{d}.conv2"][3] for d in range(8)]
    assert enc == [16, 32, 64, 128, 256, 512, 1024, 2048]
    assert 512 // 2**7 == 4
    # closed form: stem, down blocks, up blocks, head (kernels + biases)
    b = 16
    total = 9 * b + b + 9 * b * b + b
    for d in range(1, 8):
        lo, hi = b * 2 ** (d - 1), b * 2**d
        total += 9 * lo * hi + hi + 9 * hi * hi + hi
        total += 4 * hi * lo + lo + 9 * 2 * lo * lo + lo + 9 * lo * lo + lo
    total += b + 1
    assert total == 124440145
    assert sum(int(np.prod(s)) + s[3] for s in shapes.values()) == total


@pytest.mark.parametrize("cfg", [UNetConfig(8, 1, 2), UNetConfig(16, 2, 4), UNetConfig(16, 4, 1), UNetConfig(4, 0, 3)])
def test_forward_shape_and_non_negative(cfg):
    p = init_parameters(cfg)
    x = np.random.default_rng(0).random((3, 1, cfg.input_size, cfg.input_size))
    out, _ = unet_forward(cfg, p, x)
    assert out.shape == x.shape
    assert np.all(out >= 0)


def test_forward_zero_weights_zero_output():
    cfg = UNetConfig(8, 1, 2)
    p = init_parameters(cfg)
    for v in p.values.values():
        v[...] = 0
    out, _ = unet_forward(cfg, p, np.random.default_rng(0).random((2, 1, 8, 8)))
    assert out.shape == (2, 1, 8, 8) and np.all(out == 0)


def test_forward_rejects_wrong_input():
    cfg = UNetConfig(8, 1, 2)
    p = init_parameters(cfg)
    with pytest.raises(ShapeError):
        unet_forward(cfg, p, np.zeros((1, 1, 16, 16)))
    with pytest.raises(ShapeError):
        unet_forward(cfg, p, np.zeros((1, 2, 8, 8)))


def test_end_to_end_gradient():
    cfg = UNetConfig(16, 2, 4, seed=3)
    p, x = smooth_network(cfg)
    out, cache = unet_forward(cfg, p, x)
    dx = unet_backward(cfg, p, cache, np.ones_like(out))
    f = lambda: float(unet_forward(cfg, p, x)[0].sum())
    for name in p:
        assert rel_error(p.grads[name], finite_difference(f, p.values[name])) < 1e-5, name
    assert rel_error(dx, finite_difference(f, x)) < 1e-5


def test_zero_upstream_gradient():
    cfg = UNetConfig(16, 2, 4)
    p = init_parameters(cfg)
    out, cache = unet_forward(cfg, p, np.random.default_rng(0).random((1, 1, 16, 16)))
    unet_backward(cfg, p, cache, np.zeros_like(out))
    assert all(np.all(g == 0) for g in p.grads.values())


def test_gradients_additive_over_batch():
    cfg = UNetConfig(16, 2, 4, seed=1)
    x = np.random.default_rng(1).random((1, 1, 16, 16))
    p1 = init_parameters(cfg)
    out, cache = unet_forward(cfg, p1, x)
    unet_backward(cfg, p1, cache, np.ones_like(out))
    p2 = init_parameters(cfg)
    xx = np.concatenate([x, x])
    out, cache = unet_forward(cfg, p2, xx)
    unet_backward(cfg, p2, cache, np.ones_like(out))
    for k in p1:
        np.testing.assert_allclose(p2.grads[k], 2 * p1.grads[k], rtol=1e-12, atol=1e-14)


def test_stale_cache_rejected():
    cfg = UNetConfig(8, 1, 2)
    p = init_parameters(cfg)
    x = np.ones((1, 1, 8, 8))
    out, cache = unet_forward(cfg, p, x)
    sgd_step(p, 0.1)
    with pytest.raises(StateError):
        unet_backward(cfg, p, cache, np.ones_like(out))
    out, cache = unet_forward(cfg, p, x)
    unet_backward(cfg, p, cache, np.ones_like(out))
    with pytest.raises(StateError):
        unet_backward(cfg, p, cache, np.ones_like(out))
    _, cache = unet_forward(cfg, p, x)
    with pytest.raises(StateError):
        unet_backward(cfg, init_parameters(cfg), cache, np.ones_like(out))


# -- parameters / optimisation ---------------------------------------------------


def test_init_deterministic_and_zero_bias():
    cfg = UNetConfig(16, 2, 4)
    a, b = init_parameters(cfg, 5), init_parameters(cfg, 5)
    assert a.checksum() == b.checksum()
    assert a.checksum() != init_parameters(cfg, 6).checksum()
    assert all(np.all(a[k] == 0) for k in a if k.endswith(".b"))
    assert all(a[k].shape == a.grads[k].shape for k in a)


def test_init_variance():
    cfg = UNetConfig(64, 3, 8)
    p = init_parameters(cfg, 0)
    checked = 0
    for name, shape in cfg.layer_shapes().items():
        w = p[name + ".w"]
        if w.size < 10_000:
            continue
        bound = np.sqrt(6.0 / (shape[0] * shape[1] * (shape[2] + shape[3])))
        assert np.max(np.abs(w)) <= bound
        assert abs(w.var() / (bound**2 / 3) - 1) < 0.2
        checked += 1
    assert checked >= 3


def test_sgd_step_rules():
    p = Parameters({"w": np.array([1.0])})
    p.grads["w"][:] = 2.0
    sgd_step(p, 0.1)
    assert p["w"][0] == pytest.approx(0.8, abs=1e-15)
    assert p.grads["w"][0] == 0
    before = init_parameters(UNetConfig(8, 1, 2))
    after = before.copy()
    for g in after.grads.values():
        g[...] = 1.0
    sgd_step(after, 0.0)
    assert after.checksum() == before.checksum()


def test_sgd_quadratic_converges():
    # f(w) = (w - 3)^2, gradient 2(w - 3); error shrinks by 0.8 each step
    p = Parameters({"w": np.array([0.0])})
    for step in range(200):
        p.grads["w"][:] = 2 * (p["w"] - 3)
        sgd_step(p, 0.1)
    assert abs(p["w"][0] - 3) < 1e-6
    assert abs(p["w"][0] - 3) == pytest.approx(3 * 0.8**200, rel=1e-6)


# -- checkpoints -----------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    cfg = UNetConfig(16, 2, 4, seed=2**40 + 3)
    p = init_parameters(cfg)
    jitter_biases(p, np.random.default_rng(0))
    save_checkpoint(tmp_path / "c.gfnc", cfg, p)
    data = (tmp_path / "c.gfnc").read_bytes()
    assert data[:4] == b"GFNC" and int.from_bytes(data[4:8], "little") == 1
    cfg2, p2 = load_checkpoint(tmp_path / "c.gfnc")
    assert cfg2 == cfg
    assert list(p2) == list(p)
    for k in p:
        assert p2[k].tobytes() == p[k].tobytes()
    save_checkpoint(tmp_path / "d.gfnc", cfg2, p2)
    assert (tmp_path / "d.gfnc").read_bytes() == data


def test_checkpoint_corruption(tmp_path):
    cfg = UNetConfig(8, 1, 2)
    save_checkpoint(tmp_path / "c.gfnc", cfg, init_parameters(cfg))
    data = (tmp_path / "c.gfnc").read_bytes()
    (tmp_path / "bad1").write_bytes(b"XXXX" + data[4:])
    (tmp_path / "bad2").write_bytes(data[:-3])
    (tmp_path / "bad3").write_bytes(data + b"\0")
    for name in ("bad1", "bad2", "bad3"):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / name)
