import numpy as np
import pytest
from hypothesis import given, strategies as st

from poreid import nn
from poreid.detector import build_detector
from poreid.descnet import build_descnet
from poreid.oracles import triplet_reference


def naive_conv(x, k, stride=1):
    n, h, w, _ = x.shape
    kh, kw, _, f = k.shape
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    out = np.zeros((n, ho, wo, f))
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                win = x[b, i * stride:i * stride + kh, j * stride:j * stride + kw, :]
                for o in range(f):
                    out[b, i, j, o] = (win * k[..., o]).sum()
    return out


def fd_layer(layer, x, rng, h=1e-6):
    """Central-difference gradient of sum(y * r) with respect to x."""
    y = layer.forward(x, train=False)
    r = rng.standard_normal(y.shape)
    layer.forward(x)
    dx = layer.backward(r)
    num = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + h
        lp = (layer.forward(x) * r).sum()
        flat[i] = o - h
        lm = (layer.forward(x) * r).sum()
        flat[i] = o
        num.reshape(-1)[i] = (lp - lm) / (2 * h)
    return dx, num


@pytest.mark.parametrize("stride,padding", [(1, "valid"), (2, "valid"), (1, "same"), (2, "same")])
def test_conv_matches_loops(rng, stride, padding):
    conv = nn.Conv2D("c", 3, 2, 4, stride=stride, padding=padding)
    conv.init_weights(rng)
    x = rng.standard_normal((2, 9, 8, 2))
    y = conv.forward(x)
    if padding == "same":
        (pt, pb), (pl, pr) = conv._pads(9, 8)
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    else:
        xp = x
    np.testing.assert_allclose(y, naive_conv(xp, conv.params["kernel"].astype(float), stride),
                               atol=1e-5)
    assert y.shape == conv.output_shape(x.shape)


@given(st.integers(3, 40), st.integers(1, 7), st.integers(1, 3))
def test_valid_shape_law(size, k, s):
    k = min(k, size)
    conv = nn.Conv2D("c", k, 1, 1, stride=s)
    x = np.zeros((1, size, size, 1), np.float32)
    assert conv.forward(x).shape[1] == (size - k) // s + 1 == nn.conv_output_size(size, k, s)
    pool = nn.MaxPool2D("p", k, s)
    assert pool.forward(x).shape[1] == (size - k) // s + 1


@pytest.mark.parametrize("make", [
    lambda: nn.Conv2D("c", 3, 2, 3, stride=2, padding="same"),
    lambda: nn.MaxPool2D("p", 3, 1),
    lambda: nn.ReLU("r"),
    lambda: nn.Sigmoid("s"),
    lambda: nn.L2Normalize("l"),
])
def test_layer_backward_matches_finite_differences(rng, make):
    layer = make()
    if hasattr(layer, "init_weights"):
        layer.init_weights(rng)
        layer.params = {k: v.astype(np.float64) for k, v in layer.params.items()}
    for _ in range(3):
        x = rng.standard_normal((2, 6, 5, 2))
        dx, num = fd_layer(layer, x, rng)
        np.testing.assert_allclose(dx, num, rtol=1e-4, atol=1e-7)


def test_conv_kernel_gradient_is_exact_for_linear_layer(rng):
    conv = nn.Conv2D("c", 3, 2, 2)
    conv.init_weights(rng)
    conv.params["kernel"] = conv.params["kernel"].astype(np.float64)
    x = rng.standard_normal((2, 6, 6, 2))
    r = rng.standard_normal(conv.output_shape(x.shape))
    conv.forward(x)
    conv.backward(r)
    k = conv.params["kernel"].reshape(-1)
    g = conv.grads["kernel"].reshape(-1)
    for i in range(k.size):
        o = k[i]
        k[i] = o + 1.0
        lp = (conv.forward(x) * r).sum()
        k[i] = o - 1.0
        lm = (conv.forward(x) * r).sum()
        k[i] = o
        assert abs((lp - lm) / 2 - g[i]) <= 1e-8 * max(1.0, abs(g[i]))


def test_batchnorm_train_backward(rng):
    bn = nn.BatchNorm("bn", 3)
    bn.params = {"gamma": rng.standard_normal(3), "beta": rng.standard_normal(3)}
    bn.update_stats = False
    x = rng.standard_normal((4, 3, 3, 3))
    r = rng.standard_normal(x.shape)
    bn.forward(x, train=True)
    dx = bn.backward(r)
    num = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + 1e-6
        lp = (bn.forward(x, train=True) * r).sum()
        flat[i] = o - 1e-6
        lm = (bn.forward(x, train=True) * r).sum()
        flat[i] = o
        num.reshape(-1)[i] = (lp - lm) / 2e-6
    np.testing.assert_allclose(dx, num, rtol=1e-4, atol=1e-6)


def test_batchnorm_infer_is_affine_per_channel(rng):
    bn = nn.BatchNorm("bn", 2)
    bn.set_moving_stats(np.array([1.0, -2.0]), np.array([4.0, 0.25]))
    x = rng.standard_normal((3, 4, 4, 2)).astype(np.float32)
    y = bn.forward(x)
    scale = 1 / np.sqrt(np.array([4.0, 0.25]) + bn.eps)
    np.testing.assert_allclose(y, (x - [1.0, -2.0]) * scale, rtol=1e-5, atol=1e-6)


def test_batchnorm_infer_without_stats_raises():
    bn = nn.BatchNorm("bn", 2)
    with pytest.raises(nn.UninitializedStatisticsError):
        bn.forward(np.zeros((1, 2, 2, 2), np.float32))


def test_dropout_modes(rng):
    d = nn.Dropout("d", 0.5)
    x = np.ones((1000, 4))
    assert np.array_equal(d.forward(x), x)
    y = d.forward(x, train=True, rng=rng)
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1) < 0.1
    with pytest.raises(ValueError):
        nn.Dropout("d", 1.0)


@given(st.lists(st.floats(-60, 60), min_size=1, max_size=20))
def test_sigmoid_open_interval(values):
    p = nn.sigmoid(np.array(values, np.float32))
    assert np.all(p > 0) and np.all(p < 1)


def test_sigmoid_cross_entropy_gradient(rng):
    z = rng.standard_normal((6, 1, 1, 1))
    y = (rng.random(z.shape) < 0.5).astype(float)
    loss, grad, probs = nn.sigmoid_cross_entropy(z, y)
    assert abs(loss - nn.binary_cross_entropy(probs, y)) < 1e-9
    for i in range(z.size):
        zp, zm = z.copy(), z.copy()
        zp.reshape(-1)[i] += 1e-6
        zm.reshape(-1)[i] -= 1e-6
        num = (nn.sigmoid_cross_entropy(zp, y)[0] - nn.sigmoid_cross_entropy(zm, y)[0]) / 2e-6
        assert abs(num - grad.reshape(-1)[i]) < 1e-7


def test_sigmoid_cross_entropy_extreme_logits_finite():
    loss, grad, _ = nn.sigmoid_cross_entropy(np.array([1000.0, -1000.0]), np.array([0.0, 1.0]))
    assert np.isfinite(loss) and loss > 900 and np.all(np.isfinite(grad))


@given(st.integers(0, 10_000))
def test_triplet_matches_enumerator(seed):
    r = np.random.default_rng(seed)
    k = int(r.integers(2, 6))
    labels = np.repeat(np.arange(k), r.integers(2, 5, size=k))[:24]
    if np.min(np.unique(labels, return_counts=True)[1]) < 2:
        labels = labels[:-1]
    emb = r.standard_normal((len(labels), 4))
    loss, _ = nn.triplet_semihard_loss(emb, labels, 1.0)
    assert loss >= 0
    assert abs(loss - triplet_reference(emb, labels, 1.0)) < 1e-9


def test_triplet_gradient(rng):
    labels = np.repeat(np.arange(3), 3)
    emb = rng.standard_normal((9, 5))
    _, grad = nn.triplet_semihard_loss(emb, labels, 1.0)
    for i in range(emb.size):
        ep, em = emb.copy(), emb.copy()
        ep.reshape(-1)[i] += 1e-6
        em.reshape(-1)[i] -= 1e-6
        num = (nn.triplet_semihard_loss(ep, labels, 1.0)[0]
               - nn.triplet_semihard_loss(em, labels, 1.0)[0]) / 2e-6
        assert abs(num - grad.reshape(-1)[i]) < 1e-6


def test_triplet_zero_when_margin_satisfied():
    labels = np.array([0, 0, 1, 1, 2, 2])
    emb = np.repeat(np.eye(3) * 10, 2, axis=0)
    assert nn.triplet_semihard_loss(emb, labels, 2.0)[0] == 0.0


def test_triplet_invalid_batches():
    with pytest.raises(nn.InvalidBatchError):
        nn.triplet_semihard_loss(np.zeros((3, 2)), np.array([0, 0, 1]))
    with pytest.raises(nn.InvalidBatchError):
        nn.triplet_semihard_loss(np.zeros((3, 2)), np.array([0, 0, 0]))


def test_parameter_counts():
    det = build_detector()
    assert det.count_params() == 96_548
    assert det.count_params(trainable_only=True) == 96_098


def test_detector_table_shapes():
    det = build_detector()
    shape = (1, 17, 17, 1)
    for layer in det.layers:
        new = layer.output_shape(shape)
        if isinstance(layer, nn.Conv2D) and layer.padding == "valid":
            k = layer.kernel[0]
            assert new[1] == (shape[1] - k) // layer.stride[0] + 1
        shape = new
    assert shape[1:] == (1, 1, 1)


def test_descnet_output_unit_norm(rng):
    model = build_descnet(rng=rng)
    model.calibrate(rng.standard_normal((8, 32, 32, 1)).astype(np.float32))
    e = model.forward(rng.standard_normal((5, 32, 32, 1)).astype(np.float32))
    assert e.shape == (5, 128)
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1, atol=1e-5)


def test_small_net_grad_check(rng):
    model = nn.Sequential([nn.Conv2D("c1", 3, 1, 3), nn.BatchNorm("b1", 3), nn.ReLU("r1"),
                           nn.MaxPool2D("p1", 2, 1), nn.Conv2D("c2", 4, 3, 2)])
    model.init_weights(rng)
    x = rng.standard_normal((4, 7, 7, 1))
    y = rng.standard_normal((4, 1, 1, 2))
    assert nn.grad_check(model, x, lambda o: (0.5 * ((o - y) ** 2).sum(), o - y)) < 1e-4


def _tiny_training_run(seed, steps=100):
    rng = np.random.default_rng(seed)
    model = nn.Sequential([nn.Conv2D("c", 3, 1, 2), nn.BatchNorm("b", 2), nn.ReLU("r"),
                           nn.Dropout("d", 0.2), nn.Conv2D("o", 3, 2, 1)])
    model.init_weights(rng)
    opt = nn.SGD(0.05)
    data = np.random.default_rng(0)
    x = data.standard_normal((16, 5, 5, 1)).astype(np.float32)
    y = (data.random((16, 1, 1, 1)) < 0.5).astype(np.float32)
    trajectory = []
    for _ in range(steps):
        out = model.forward(x, train=True, rng=rng)
        _, grad, _ = nn.sigmoid_cross_entropy(out, y)
        model.backward(grad)
        nn.sgd_step(model, opt)
        trajectory.append(model.state()["o/kernel"].copy())
    return trajectory


def test_training_is_bit_reproducible():
    a = _tiny_training_run(3)
    b = _tiny_training_run(3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[-1], _tiny_training_run(4)[-1])


def test_sgd_schedule_and_nonfinite():
    opt = nn.SGD(0.1, 0.5, 10)
    assert opt.lr(0) == 0.1 and opt.lr(9) == 0.1 and opt.lr(10) == 0.05
    with pytest.raises(nn.NonFiniteGradientError):
        opt.apply({"w": np.zeros(2)}, {"w": np.array([np.nan, 0.0])})
    with pytest.raises(ValueError):
        nn.SGD(0.0)


def test_model_save_load_roundtrip(tmp_path, rng):
    model = build_detector(rng=rng)
    model.calibrate(rng.random((8, 17, 17, 1)).astype(np.float32))
    nn.save_model(model, tmp_path / "m.pknn", {"note": "x"})
    back = nn.load_model(tmp_path / "m.pknn")
    x = rng.random((3, 17, 17, 1)).astype(np.float32)
    assert np.array_equal(model.forward(x), back.forward(x))
    assert back.metadata["note"] == "x"


def test_container_errors(tmp_path):
    buf = nn.container.encode({"a": np.arange(6, dtype=np.float32).reshape(2, 3)}, {"k": "v"})
    tensors, meta = nn.container.decode(buf)
    assert meta == {"k": "v"} and tensors["a"].shape == (2, 3)
    with pytest.raises(nn.FormatError) as err:
        nn.container.decode(buf[:20])
    assert err.value.offset >= 0
    with pytest.raises(nn.FormatError):
        nn.container.decode(b"XXXX" + buf[4:])
    (tmp_path / "bad.pknn").write_bytes(nn.container.encode({"w": np.zeros(1)},
                                                            {"architecture": "nope"}))
    with pytest.raises(nn.FormatError):
        nn.load_model(tmp_path / "bad.pknn")


def test_shape_errors():
    conv = nn.Conv2D("c", 5, 1, 1)
    with pytest.raises(nn.ShapeError):
        conv.forward(np.zeros((1, 3, 3, 1), np.float32))
    with pytest.raises(nn.ShapeError):
        conv.forward(np.zeros((1, 9, 9, 2), np.float32))
