import numpy as np
import pytest

from pixedge import convnet
from pixedge.convnet import LayerSpec, conv_forward, lrn, maxpool, relu
from pixedge.errors import ContractError, FormatError, ShapeError


def naive_conv(x, kernel, bias, stride, pad):
    """Direct five-loop cross-correlation, the reference for conv_forward."""
    h, w, c = x.shape
    o, _, k, _ = kernel.shape
    xp = np.zeros((h + 2 * pad, w + 2 * pad, c))
    xp[pad : pad + h, pad : pad + w] = x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    out = np.zeros((oh, ow, o))
    for oc in range(o):
        for i in range(oh):
            for j in range(ow):
                acc = bias[oc]
                for ci in range(c):
                    for di in range(k):
                        for dj in range(k):
                            acc += xp[i * stride + di, j * stride + dj, ci] * kernel[oc, ci, di, dj]
                out[i, j, oc] = acc
    return out


def test_conv_scalar():
    layer = LayerSpec("conv", out_channels=1, kernel=1)
    out = conv_forward(np.full((1, 1, 1), 3.0), layer, np.full((1, 1, 1, 1), 2.0), np.array([0.5]))
    assert out.shape == (1, 1, 1) and out[0, 0, 0] == 6.5


def test_conv_all_ones():
    layer = LayerSpec("conv", out_channels=1, kernel=3)
    out = conv_forward(np.ones((3, 3, 1)), layer, np.ones((1, 1, 3, 3)), np.zeros(1))
    assert out.shape == (1, 1, 1) and out[0, 0, 0] == 9.0


def test_conv_matches_naive_strided_padded():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((7, 7, 2))
    kern = rng.standard_normal((3, 2, 3, 3))
    bias = rng.standard_normal(3)
    layer = LayerSpec("conv", out_channels=3, kernel=3, stride=2, pad=1)
    got = conv_forward(x, layer, kern, bias)
    assert got.shape == (4, 4, 3)
    np.testing.assert_allclose(got, naive_conv(x, kern, bias, 2, 1), atol=1e-5, rtol=0)


def test_grouped_conv_is_blockwise():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((5, 5, 4))
    kern = rng.standard_normal((6, 2, 3, 3))
    bias = rng.standard_normal(6)
    layer = LayerSpec("conv", out_channels=6, kernel=3, pad=1, group=2)
    got = conv_forward(x, layer, kern, bias)
    np.testing.assert_allclose(got[:, :, :3], naive_conv(x[:, :, :2], kern[:3], bias[:3], 1, 1), atol=1e-10)
    np.testing.assert_allclose(got[:, :, 3:], naive_conv(x[:, :, 2:], kern[3:], bias[3:], 1, 1), atol=1e-10)


def test_conv_shape_errors():
    layer = LayerSpec("conv", out_channels=1, kernel=3)
    with pytest.raises(ShapeError):
        conv_forward(np.ones((4, 4, 2)), layer, np.ones((1, 1, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeError):
        conv_forward(np.ones((2, 2, 1)), layer, np.ones((1, 1, 3, 3)), np.zeros(1))


def test_layer_validation():
    with pytest.raises(ContractError):
        LayerSpec("conv", out_channels=1, kernel=0)
    with pytest.raises(ContractError):
        LayerSpec("softmax")


def test_relu_and_idempotence():
    np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    x = np.random.default_rng(0).standard_normal((4, 4, 3))
    np.testing.assert_array_equal(relu(relu(x)), relu(x))


def test_maxpool():
    layer = LayerSpec("maxpool", kernel=2, stride=2)
    out = maxpool(np.array([[1.0, 2.0], [3.0, 4.0]]), layer)
    assert out.shape == (1, 1, 1) and out[0, 0, 0] == 4.0
    one = LayerSpec("maxpool", kernel=1, stride=1)
    x = np.random.default_rng(0).standard_normal((3, 3, 2))
    np.testing.assert_array_equal(maxpool(x, one), x)
    with pytest.raises(ShapeError):
        maxpool(np.ones((1, 1, 1)), LayerSpec("maxpool", kernel=3, stride=1))


def test_padded_maxpool_ignores_padding():
    layer = LayerSpec("maxpool", kernel=3, stride=2, pad=1)
    x = -np.ones((4, 4, 1))
    out = maxpool(x, layer)
    assert out.shape == (2, 2, 1)
    assert np.all(out == -1.0)


def test_lrn_alpha_zero_is_identity():
    x = np.random.default_rng(0).standard_normal((3, 3, 5))
    for beta in (0.5, 0.75, 2.0):
        layer = LayerSpec("lrn", depth_radius=2, alpha=0.0, beta=beta, bias=1.0)
        np.testing.assert_array_equal(lrn(x, layer), x)


def test_lrn_against_loop():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 2, 6))
    layer = LayerSpec("lrn", depth_radius=1, alpha=0.3, beta=0.75, bias=2.0)
    expect = np.empty_like(x)
    for c in range(6):
        lo, hi = max(0, c - 1), min(6, c + 2)
        expect[:, :, c] = x[:, :, c] / (2.0 + 0.3 * (x[:, :, lo:hi] ** 2).sum(axis=2)) ** 0.75
    np.testing.assert_allclose(lrn(x, layer), expect, rtol=1e-12)


def test_alexnet_geometry():
    net = convnet.alexnet_spec()
    strides = net.tap_strides()
    channels = net.tap_channels()
    assert (strides["Conv1"], strides["Conv2"]) == (4, 8)
    assert tuple(channels.values()) == (96, 256, 384, 384, 256)
    assert sum(channels.values()) == 1376


def test_alexnet_forward_shapes():
    net = convnet.alexnet_spec()
    w = convnet.random_weights(net, 0)
    taps = convnet.forward_taps(np.zeros((64, 64, 3)), net, w)
    assert [t[0] for t in taps] == list(convnet.ALEXNET_TAPS)
    assert [(t[1].shape, t[2]) for t in taps[:2]] == [((16, 16, 96), 4), ((8, 8, 256), 8)]
    assert all(t[1].shape == (4, 4, c) for t, c in zip(taps[2:], (384, 384, 256)))


def test_cumulative_stride_is_product_of_strides():
    net = convnet.alexnet_spec()
    for name, idx in net.taps.items():
        prod = 1
        for layer in net.layers[: idx + 1]:
            if layer.kind in ("conv", "maxpool"):
                prod *= layer.stride
        assert net.tap_strides()[name] == prod


def test_toy_forward():
    net = convnet.toy_spec()
    w = convnet.random_weights(net, 0)
    (name, act, stride), = convnet.forward_taps(np.ones((8, 8, 3)), net, w)
    assert (name, act.shape, stride) == ("Conv1", (8, 8, 4), 1)


def test_forward_is_deterministic():
    net = convnet.alexnet_spec()
    w = convnet.filterbank_weights(net, 3)
    img = np.random.default_rng(0).random((40, 48, 3)) - 0.5
    a = convnet.forward_taps(img, net, w)
    b = convnet.forward_taps(img.copy(), net, {k: v.copy() for k, v in w.items()})
    for (_, x, _), (_, y, _) in zip(a, b):
        assert x.tobytes() == y.tobytes()


def test_receptive_field():
    net = convnet.alexnet_spec()
    assert net.receptive_field("Conv1") == 11
    assert net.receptive_radius("Conv1") == 5
    assert net.receptive_field("Conv2") == 51
    assert net.receptive_field("Conv5") == 163


def test_filter_bank_is_zero_mean_and_oriented():
    bank = convnet.oriented_filter_bank(96, 11)
    assert bank.shape == (96, 3, 11, 11)
    np.testing.assert_allclose(bank.sum(axis=(1, 2, 3)), 0, atol=1e-12)
    # a vertical step excites the 0-rad first derivative and not its 90-degree twin
    step = np.zeros((11, 11, 3))
    step[:, 6:] = 1.0
    resp = np.einsum("ochw,hwc->o", bank, step)
    assert resp[0] < -0.1 and abs(resp[4]) < 1e-9


def test_bundle_round_trip(tmp_path):
    net = convnet.alexnet_spec()
    w = convnet.random_weights(net, 1)
    p = tmp_path / "w.pxw"
    convnet.save_bundle(w, p)
    back = convnet.load_weights(p, net)
    assert list(back) == list(w)
    for k in w:
        assert back[k].tobytes() == w[k].tobytes()


def test_bundle_shape_mismatch_fails(tmp_path):
    net = convnet.alexnet_spec()
    w = convnet.random_weights(net, 1)
    w["conv3/kernel"] = w["conv3/kernel"][:, :10]
    p = tmp_path / "w.pxw"
    convnet.save_bundle(w, p)
    with pytest.raises(ShapeError, match="conv3/kernel"):
        convnet.load_weights(p, net)
    del w["conv3/kernel"]
    convnet.save_bundle(w, p)
    with pytest.raises(ShapeError, match="lacks"):
        convnet.load_weights(p, net)


def test_bundle_bad_magic(tmp_path):
    p = tmp_path / "w.pxw"
    p.write_bytes(b"PXW0" + bytes(4))
    with pytest.raises(FormatError):
        convnet.load_bundle(p)


def test_external_export_loads(tmp_path):
    """A bundle written by hand with the documented byte layout (as an exporter
    for real AlexNet weights would) is accepted and drives the forward pass."""
    import struct

    net = convnet.alexnet_spec()
    rng = np.random.default_rng(0)
    blob = [b"PXW1", struct.pack("<I", len(net.weight_shapes()))]
    for name, shape in reversed(list(net.weight_shapes().items())):  # any record order
        arr = rng.standard_normal(shape).astype("<f4") * 0.01
        raw = name.encode()
        blob += [struct.pack("<I", len(raw)), raw, b"PXF1",
                 struct.pack(f"<I{len(shape)}I", len(shape), *shape), arr.tobytes()]
    p = tmp_path / "exported.pxw"
    p.write_bytes(b"".join(blob))
    w = convnet.load_weights(p, net)
    taps = convnet.forward_taps(np.zeros((32, 32, 3)), net, w)
    assert sum(t[1].shape[2] for t in taps) == 1376


def test_netspec_text_round_trip():
    net = convnet.alexnet_spec()
    text = convnet.format_netspec(net)
    back = convnet.parse_netspec(text)
    assert back == net


def test_netspec_parse_errors():
    with pytest.raises(FormatError):
        convnet.parse_netspec("layer kind=conv out=4 kernel=3 wings=2\n")
    with pytest.raises(FormatError):
        convnet.parse_netspec("tap name=Conv1\n")
    with pytest.raises(FormatError):
        convnet.parse_netspec("layer kind=conv out=four\n")
