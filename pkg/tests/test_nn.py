import io
import zipfile

import numpy as np
import pytest
from _gradcheck import directional_check

from lcaenet.errors import CheckpointError, DimensionError, TapeError
from lcaenet.nn import FlopCounter, Tape, Tensor, backward
from lcaenet.nn import functional as F
from lcaenet.nn.checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from lcaenet.nn.layers import BatchNorm2d, ChannelConv1d, Conv2d, DepthwiseConv2d, PReLU


def _param(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _weighted(rng, out_shape):
    w = rng.standard_normal(out_shape)
    return lambda y: F.sum(F.mul(y, w))


# gradients of every op ---------------------------------------------------------

def test_grad_elementwise(rng):
    a, b = _param(rng, 2, 3), _param(rng, 3)
    b.data = b.data + 3.0  # keep the divisor away from zero
    loss = _weighted(rng, (2, 3))
    assert directional_check(lambda: loss(F.add(a, b)), [a, b], rng) < 1e-7
    assert directional_check(lambda: loss(F.sub(a, b)), [a, b], rng) < 1e-7
    assert directional_check(lambda: loss(F.mul(a, b)), [a, b], rng) < 1e-7
    assert directional_check(lambda: loss(F.div(a, b)), [a, b], rng) < 1e-7


def test_grad_sum_reshape_getitem(rng):
    x = _param(rng, 2, 3, 4)
    assert directional_check(lambda: F.sum(F.mul(F.sum(x, axis=1), np.arange(8.0).reshape(2, 4))), [x], rng) < 1e-7
    assert directional_check(lambda: F.sum(F.mul(F.reshape(x, (6, 4)), np.arange(24.0).reshape(6, 4))), [x], rng) < 1e-7
    loss = _weighted(rng, (2, 1, 4))
    assert directional_check(lambda: loss(F.getitem(x, (slice(None), slice(1, 2)))), [x], rng) < 1e-7


def test_grad_activations(rng):
    x = _param(rng, 3, 5)
    x.data[np.abs(x.data) < 0.05] = 0.3  # stay off the kink
    s = Tensor(np.array([0.25]), requires_grad=True)
    loss = _weighted(rng, (3, 5))
    assert directional_check(lambda: loss(F.relu(x)), [x], rng) < 1e-7
    assert directional_check(lambda: loss(F.prelu(x, s)), [x, s], rng) < 1e-7
    assert directional_check(lambda: loss(F.sigmoid(x)), [x], rng) < 1e-7
    assert directional_check(lambda: loss(F.softmax(x, axis=1)), [x], rng) < 1e-7


@pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1), (1, 2, 5)])
def test_grad_conv2d(rng, stride, padding, k):
    x, w, b = _param(rng, 2, 3, 7, 6), _param(rng, 4, 3, k, k), _param(rng, 4)
    out = F.conv2d(x, w, b, stride, padding)
    loss = _weighted(rng, out.shape)
    assert directional_check(lambda: loss(F.conv2d(x, w, b, stride, padding)), [x, w, b], rng) < 1e-6


def test_grad_depthwise_and_channel_conv(rng):
    x, w = _param(rng, 2, 3, 5, 5), _param(rng, 3, 3, 3)
    loss = _weighted(rng, (2, 3, 5, 5))
    assert directional_check(lambda: loss(F.depthwise_conv2d(x, w)), [x, w], rng) < 1e-6
    v, k = _param(rng, 2, 6), _param(rng, 3)
    loss1 = _weighted(rng, (2, 6))
    assert directional_check(lambda: loss1(F.conv1d_channels(v, k)), [v, k], rng) < 1e-7


@pytest.mark.parametrize("training", [True, False])
def test_grad_batch_norm(rng, training):
    x, g, b = _param(rng, 3, 2, 4, 4), _param(rng, 2), _param(rng, 2)
    loss = _weighted(rng, x.shape)

    def fn():
        # fresh buffers each call so the finite differences see the same statistics
        return loss(F.batch_norm(x, g, b, np.zeros(2), np.ones(2) * 2.0, training))
    assert directional_check(fn, [x, g, b], rng) < 1e-6


def test_grad_pool_and_upsample(rng):
    x = _param(rng, 2, 3, 4, 5)
    loss = _weighted(rng, (2, 3))
    assert directional_check(lambda: loss(F.global_avg_pool(x)), [x], rng) < 1e-7
    loss2 = _weighted(rng, (2, 3, 8, 10))
    assert directional_check(lambda: loss2(F.upsample_bilinear2x(x)), [x], rng) < 1e-7


# forward values ---------------------------------------------------------------

def test_conv2d_matches_direct_loops(rng):
    x, w, b = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    out = F.conv2d(x, w, b, stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref[0, o, i, j] = np.sum(xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_upsample_constant_and_known_row():
    x = np.ones((1, 1, 3, 3))
    np.testing.assert_allclose(F.upsample_bilinear2x(x).data, np.ones((1, 1, 6, 6)))
    row = np.array([[[[0.0, 4.0]]]])
    np.testing.assert_allclose(F.upsample_bilinear2x(row).data[0, 0, 0], [0.0, 1.0, 3.0, 4.0])


def test_batch_norm_running_stats():
    x = np.arange(8.0).reshape(2, 1, 2, 2)
    rm, rv = np.zeros(1), np.ones(1)
    out = F.batch_norm(x, np.ones(1), np.zeros(1), rm, rv, training=True).data
    assert out.mean() == pytest.approx(0.0, abs=1e-12)
    assert rm[0] == pytest.approx(0.1 * 3.5)
    assert rv[0] == pytest.approx(0.9 + 0.1 * np.var(np.arange(8.0), ddof=1))


def test_batch_norm_single_value_rejected():
    with pytest.raises(DimensionError):
        F.batch_norm(np.ones((1, 2, 1, 1)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), training=True)


def test_conv_errors():
    with pytest.raises(DimensionError):
        F.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))
    with pytest.raises(ValueError):
        F.conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), stride=0)


# tape semantics ---------------------------------------------------------------

def test_tape_single_replay():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        y = F.sum(F.mul(x, x))
    grads = backward(tape, y)
    np.testing.assert_array_equal(grads[x], [2.0, 4.0])
    with pytest.raises(TapeError):
        tape.backward(y)


def test_tape_rejects_unrecorded_or_constant_loss():
    x = Tensor(np.ones(2), requires_grad=True)
    y = F.sum(x)  # outside any tape
    with Tape() as tape:
        pass
    with pytest.raises(TapeError):
        tape.backward(y)
    with Tape() as tape:
        c = F.sum(Tensor(np.ones(2)))
    with pytest.raises(TapeError):
        tape.backward(c)


def test_shared_input_accumulates():
    x = Tensor(np.array(3.0), requires_grad=True)
    with Tape() as tape:
        y = x * x + x
    assert tape.backward(y)[x] == pytest.approx(7.0)


def test_seeded_vjp():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        y = F.mul(x, 2.0)
    np.testing.assert_array_equal(tape.backward(y, seed=np.array([1.0, 0.0, -1.0]))[x], [2.0, 0.0, -2.0])


# layers, flops, checkpoint ----------------------------------------------------

def test_conv_layer_has_eighty_parameters():
    conv = Conv2d(1, 8, 3, np.random.default_rng(0))
    assert sum(p.data.size for p in conv.parameters()) == 80


def test_pointwise_conv_flop_formula():
    cin, cout, h, w = 4, 6, 5, 7
    conv = Conv2d(cin, cout, 1, np.random.default_rng(0), bias=True)
    with FlopCounter() as fc:
        conv(np.zeros((1, cin, h, w), dtype=np.float32))
    assert fc.total == 2 * cin * cout * h * w + cout * h * w
    conv_nb = Conv2d(cin, cout, 1, np.random.default_rng(0), bias=False)
    with FlopCounter() as fc:
        conv_nb(np.zeros((1, cin, h, w), dtype=np.float32))
    assert fc.total == 2 * cin * cout * h * w


def test_layer_shapes_and_state():
    rng = np.random.default_rng(0)
    bn = BatchNorm2d(3)
    assert set(bn.state_dict()) == {"weight", "bias", "running_mean", "running_var"}
    assert PReLU().slope.data.tolist() == [0.25]
    assert DepthwiseConv2d(3, 3, rng).weight.shape == (3, 3, 3)
    assert ChannelConv1d(rng).weight.shape == (3,)
    bn.eval()
    assert not bn.training


def test_load_state_dict_mismatch():
    conv = Conv2d(1, 2, 3, np.random.default_rng(0))
    state = conv.state_dict()
    state["weight"] = np.zeros((2, 1, 5, 5))
    with pytest.raises(CheckpointError):
        conv.load_state_dict(state)
    with pytest.raises(CheckpointError):
        conv.load_state_dict({"weight": conv.weight.data})


def test_checkpoint_roundtrip_and_bytes(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b.c": np.array([1.5])}
    save_checkpoint(tmp_path / "x.ckpt", arrays, {"epoch": 3})
    save_checkpoint(tmp_path / "y.ckpt", arrays, {"epoch": 3})
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()
    loaded, meta = load_checkpoint(tmp_path / "x.ckpt")
    assert meta == {"epoch": 3, "format_version": FORMAT_VERSION}
    assert loaded["a"].dtype == np.float32
    np.testing.assert_array_equal(loaded["b.c"], [1.5])
    assert sorted(zipfile.ZipFile(tmp_path / "x.ckpt").namelist()) == ["__meta__.npy", "a.npy", "b.c.npy"]


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "x.ckpt", {"__meta__": np.zeros(1)})
    (tmp_path / "junk.ckpt").write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")
    buf = io.BytesIO()
    np.savez(buf, a=np.zeros(1))
    (tmp_path / "nometa.ckpt").write_bytes(buf.getvalue())
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nometa.ckpt")
