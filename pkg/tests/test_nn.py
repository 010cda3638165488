import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lvct.checks import ENCODER_TOL, LAYER_TOL, _away_from_zero, _readout, gradient_suite
from lvct.losses import loss_mse
from lvct.models.unet import Encoder, NetSpec
from lvct.nn import (
    Adam,
    AdamState,
    CheckpointError,
    Conv3x3,
    LeakyReLU,
    MaxPool2,
    Param,
    UpConv2,
    adam_step,
    concat_channels,
    concat_channels_backward,
    conv3x3,
    global_mean,
    grad_check,
    grad_check_input,
    leaky_relu,
    load_params,
    maxpool2,
    maxpool2_backward,
    read_checkpoint,
    save_params,
    sigmoid,
    upconv2,
)
from lvct.nn.checkpoint import CHECKPOINT_MAGIC, dump_params

# ---------------------------------------------------------------- conv


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((1, 7, 9))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    out, _ = conv3x3(x, w, np.zeros(1))
    assert np.array_equal(out, x)


def test_conv_ones_kernel_counts_taps():
    out, _ = conv3x3(np.ones((1, 5, 5)), np.ones((1, 1, 3, 3)), np.zeros(1))
    assert out[0, 2, 2] == 9 and out[0, 0, 0] == 4 and out[0, 0, 2] == 6


def test_conv_channel_mismatch():
    with pytest.raises(ValueError):
        conv3x3(np.ones((2, 5, 5)), np.ones((1, 1, 3, 3)), np.zeros(1))


def test_conv_gradients():
    rng = np.random.default_rng(1)
    conv = Conv3x3(3, 4, rng, "c", np.float64)
    conv.b.value[:] = rng.standard_normal(4)
    x = rng.standard_normal((2, 3, 6, 6))
    target = rng.standard_normal((2, 4, 6, 6))

    def loss(out):
        return loss_mse(out, target)

    assert grad_check(conv, x, loss, samples_per_param=30) <= LAYER_TOL
    assert grad_check_input(conv.forward, conv.backward, x, loss, n_samples=40) <= LAYER_TOL


# ---------------------------------------------------------------- maxpool


def test_maxpool_routes_to_max():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out, cache = maxpool2(x)
    assert out.item() == 4.0
    g = maxpool2_backward(np.ones_like(out), cache)
    assert np.array_equal(g, [[[[0, 0], [0, 1.0]]]])


def test_maxpool_tie_goes_to_first_in_scan_order():
    x = np.full((1, 1, 4, 4), 2.0)
    out, cache = maxpool2(x)
    assert np.all(out == 2.0)
    g = maxpool2_backward(np.ones_like(out), cache)[0, 0]
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1
    assert np.array_equal(g, expected)


def test_maxpool_rejects_odd():
    with pytest.raises(ValueError):
        maxpool2(np.ones((1, 1, 3, 4)))


def test_maxpool_gradient():
    rng = np.random.default_rng(2)
    pool = MaxPool2()
    x = rng.standard_normal((2, 3, 8, 8))
    assert grad_check_input(pool.forward, pool.backward, x, _readout(rng, (2, 3, 4, 4)), n_samples=40) <= LAYER_TOL


# ---------------------------------------------------------------- upconv


def test_upconv_single_pixel_ones_kernel():
    out, _ = upconv2(np.full((1, 1, 1), 3.5), np.ones((1, 1, 2, 2)), np.zeros(1))
    assert np.array_equal(out, np.full((1, 2, 2), 3.5))


def test_upconv_shape_contract():
    out, _ = upconv2(np.zeros((256, 16, 16), np.float32), np.zeros((256, 128, 2, 2), np.float32),
                     np.zeros(128, np.float32))
    assert out.shape == (128, 32, 32)


def test_upconv_channel_mismatch():
    with pytest.raises(ValueError):
        upconv2(np.zeros((2, 4, 4)), np.zeros((3, 1, 2, 2)), np.zeros(1))


def test_upconv_gradients():
    rng = np.random.default_rng(3)
    up = UpConv2(3, 2, rng, "u", np.float64)
    up.b.value[:] = rng.standard_normal(2)
    x = rng.standard_normal((2, 3, 4, 4))
    loss = _readout(rng, (2, 2, 8, 8))
    assert grad_check(up, x, loss, samples_per_param=30) <= LAYER_TOL
    assert grad_check_input(up.forward, up.backward, x, loss, n_samples=40) <= LAYER_TOL


# ---------------------------------------------------------------- activations


def test_leaky_values():
    assert leaky_relu(np.array(2.0))[0] == 2.0
    assert leaky_relu(np.array(-2.0))[0] == pytest.approx(-0.02)
    x = np.linspace(-3, 3, 11)
    assert np.array_equal(leaky_relu(x, 1.0)[0], x)


def test_leaky_derivative_at_zero_is_slope():
    act = LeakyReLU()
    act.forward(np.zeros(3))
    assert np.all(act.backward(np.ones(3)) == act.slope)


def test_leaky_only_net_gradient():
    rng = np.random.default_rng(4)
    acts = [LeakyReLU(), LeakyReLU(0.2), LeakyReLU()]

    def fwd(x):
        for a in acts:
            x = a.forward(2.0 * x)
        return x

    def bwd(g):
        for a in reversed(acts):
            g = 2.0 * a.backward(g)
        return g

    # piecewise linear away from 0, so a wider step has no truncation error
    # and keeps rounding noise below the tolerance
    x = _away_from_zero(rng, (3, 8, 8))
    assert grad_check_input(fwd, bwd, x, _readout(rng, x.shape), n_samples=60, h=1e-3) <= 1e-6


def test_sigmoid_and_mean_values():
    assert sigmoid(np.array(0.0))[0] == 0.5
    assert global_mean(np.full((2, 3, 4, 4), 1.25))[0].tolist() == [1.25, 1.25]
    assert global_mean(np.full((3, 4), -2.0))[0] == -2.0


def test_sigmoid_mean_chain_gradient():
    res = {r.name: r for r in gradient_suite(seed=5, full=False)}
    assert res["sigmoid.global_mean.input"].error <= 1e-5


def test_concat_shapes_and_split():
    a = np.ones((256, 4, 4))
    out, split = concat_channels(a, 2 * a)
    assert out.shape == (512, 4, 4)
    ga, gb = concat_channels_backward(out, split)
    assert ga.shape == a.shape and gb.shape == a.shape
    same, _ = concat_channels(a, np.zeros((0, 4, 4)))
    assert np.array_equal(same, a)
    with pytest.raises(ValueError):
        concat_channels(a, np.ones((1, 2, 4)))


# ---------------------------------------------------------------- suite


def test_gradient_suite_layers_and_losses_pass():
    results = gradient_suite(seed=0, full=False)
    bad = [r.line() for r in results if not r.ok]
    assert not bad, bad


def test_encoder_gradient_table_width():
    rng = np.random.default_rng(6)
    enc = Encoder(NetSpec(1, 32, residual=False), rng, np.float64, "enc.")
    x = rng.standard_normal((1, 1, 32, 32))
    assert grad_check(enc, x, _readout(rng, (1, 512, 2, 2)), samples_per_param=3) <= ENCODER_TOL


def test_forward_is_deterministic():
    rng = np.random.default_rng(7)
    conv = Conv3x3(2, 3, rng)
    x = rng.standard_normal((1, 2, 8, 8)).astype(np.float32)
    assert conv.forward(x).tobytes() == conv.forward(x).tobytes()


# ---------------------------------------------------------------- Adam


def test_adam_first_step_is_lr():
    for g in (3.0, -0.02, 1e-3):
        p = Param(np.array([0.5]), "p")
        p.grad[:] = g
        adam_step(p, s := AdamState(lr=1e-4))
        assert abs(abs(p.value[0] - 0.5) - 1e-4) <= 1e-6
        assert s.t == 1 and not p.grad.any()


def test_adam_zero_grad_no_change():
    p = Param(np.array([0.5, -1.0]), "p")
    s = AdamState()
    adam_step(p, s)
    assert p.value.tolist() == [0.5, -1.0] and s.t == 1


def test_adam_two_steps_reduce_quadratic():
    # scalar oracle: x^2/2 from x0 = 1
    p = Param(np.array([1.0]), "x")
    opt = Adam([p], lr=0.1)
    for _ in range(2):
        p.grad[:] = p.value
        opt.step()
    x = 1.0
    m = v = 0.0
    for t in (1, 2):
        g = x
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert p.value[0] == pytest.approx(x, abs=1e-12)
    assert p.value[0] ** 2 / 2 < 0.5


def test_adam_rejects_non_finite():
    p = Param(np.array([0.0, 1.0]), "bad")
    p.grad[:] = [np.nan, 0.0]
    with pytest.raises(FloatingPointError, match="bad"):
        adam_step(p, AdamState())


@given(arrays(np.float64, 5, elements=st.floats(-10, 10)))
def test_adam_step_bounded_by_lr(g):
    p = Param(np.zeros(5), "p")
    p.grad[:] = g
    adam_step(p, AdamState(lr=1e-3))
    assert np.all(np.abs(p.value) <= 1e-3 + 1e-12)


# ---------------------------------------------------------------- checkpoints


def small_params():
    rng = np.random.default_rng(8)
    return Conv3x3(2, 3, rng, "a").params() + UpConv2(3, 1, rng, "b").params()


def test_checkpoint_roundtrip(tmp_path):
    ps = small_params()
    save_params(tmp_path / "w.bin", ps)
    fresh = [Param(np.zeros_like(p.value), p.name) for p in ps]
    load_params(tmp_path / "w.bin", fresh)
    for p, q in zip(ps, fresh):
        assert p.value.tobytes() == q.value.tobytes()
    assert [n for n, _ in read_checkpoint(tmp_path / "w.bin")] == [p.name for p in ps]


def test_checkpoint_layout():
    p = Param(np.arange(6, dtype=np.float32).reshape(2, 3), "w")
    raw = dump_params([p])
    assert raw[:6] == CHECKPOINT_MAGIC
    assert raw[6:] == (
        (1).to_bytes(4, "little") + b"w" + (2).to_bytes(4, "little")
        + (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
        + np.arange(6, dtype="<f4").tobytes()
    )


def test_checkpoint_errors(tmp_path):
    ps = small_params()
    path = tmp_path / "w.bin"
    save_params(path, ps)
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(CheckpointError):
        read_checkpoint(path)
    path.write_bytes(b"XXXXXX" + raw[6:])
    with pytest.raises(CheckpointError):
        read_checkpoint(path)
    path.write_bytes(raw)
    with pytest.raises(CheckpointError, match="missing"):
        load_params(path, ps + [Param(np.zeros(1), "extra")])
    with pytest.raises(CheckpointError, match="unexpected"):
        load_params(path, ps[:-1])
    wrong = [Param(np.zeros((1,) + p.value.shape[1:]), p.name) for p in ps]
    with pytest.raises(CheckpointError, match="shape"):
        load_params(path, wrong)
