import json
from fractions import Fraction

import numpy as np
import pytest

import oracles
from gradcheck import numeric_grad, rel_error
from heartrefine.unet import (
    TrainParams,
    UNetConfig,
    WeightStore,
    conv3d,
    conv3d_backward,
    conv3d_stride2,
    deconv3d,
    deconv3d_backward,
    init_weights,
    layer_specs,
    load_weights,
    maxpool3d,
    maxpool3d_backward,
    param_count,
    param_shapes,
    save_weights,
    softmax,
    softmax_cross_entropy,
    train,
    unet_backward,
    unet_forward,
)
from heartrefine.unet.weights import WeightFileError

rng = np.random.default_rng


# ------------------------------------------------------------------ conv


def test_conv_identity_kernel():
    x = rng(0).normal(size=(1, 2, 4, 5, 6))
    w = np.zeros((2, 2, 3, 3, 3))
    w[0, 0, 1, 1, 1] = w[1, 1, 1, 1, 1] = 1
    assert np.array_equal(conv3d(x, w, np.zeros(2)), x)


def test_conv_zero_input_gives_bias():
    out = conv3d(np.zeros((1, 2, 3, 3, 3)), rng(1).normal(size=(4, 2, 3, 3, 3)), np.arange(4.0))
    assert np.array_equal(out, np.broadcast_to(np.arange(4.0).reshape(1, 4, 1, 1, 1), out.shape))


def test_conv_channel_mismatch():
    with pytest.raises(ValueError):
        conv3d(np.zeros((1, 3, 4, 4, 4)), np.zeros((2, 2, 3, 3, 3)))


@pytest.mark.parametrize("seed", range(5))
def test_conv_matches_loop_oracle(seed):
    r = rng(seed)
    x = r.normal(size=(1, 2, 4, 4, 4))
    w = r.normal(size=(3, 2, 3, 3, 3))
    b = r.normal(size=3)
    expected = oracles.conv3d(x, w, b)
    got = conv3d(x, w, b)
    assert np.max(np.abs(got - expected)) <= 1e-12 * max(1.0, np.max(np.abs(expected)))


def test_conv_slabs_agree(monkeypatch):
    from heartrefine.unet import layers

    r = rng(2)
    x = r.normal(size=(2, 3, 7, 5, 6))
    w = r.normal(size=(4, 3, 3, 3, 3))
    full = conv3d(x, w)
    monkeypatch.setattr(layers, "_COL_BYTES", 1)
    assert np.allclose(conv3d(x, w), full, rtol=0, atol=1e-12)


def test_conv_gradients():
    r = rng(3)
    x = r.normal(size=(1, 2, 3, 3, 3))
    w = r.normal(size=(2, 2, 3, 3, 3))
    b = r.normal(size=2)
    proj = r.normal(size=(1, 2, 3, 3, 3))
    f = lambda: float(np.sum(conv3d(x, w, b) * proj))  # noqa: E731
    dx, dw, db = conv3d_backward(proj, x, w)
    assert rel_error(dx, numeric_grad(f, x)) < 1e-6
    assert rel_error(dw, numeric_grad(f, w)) < 1e-6
    assert rel_error(db, numeric_grad(f, b)) < 1e-6


# ---------------------------------------------------------------- pooling


def test_pool_constant_routes_to_first():
    x = np.ones((1, 1, 2, 2, 2))
    out, idx = maxpool3d(x)
    assert out.item() == 1 and idx.item() == 0
    g = maxpool3d_backward(np.ones_like(out), idx)
    assert g[0, 0, 0, 0, 0] == 1 and g.sum() == 1


def test_pool_ramp_takes_last():
    x = np.arange(64.0).reshape(1, 1, 4, 4, 4)
    out, idx = maxpool3d(x)
    assert np.all(idx == 7)
    assert np.array_equal(out, x[:, :, 1::2, 1::2, 1::2])


def test_pool_odd_dims():
    with pytest.raises(ValueError):
        maxpool3d(np.zeros((1, 1, 3, 2, 2)))


@pytest.mark.parametrize("seed", range(3))
def test_pool_matches_oracle_and_gradient(seed):
    r = rng(seed)
    x = r.normal(size=(1, 2, 8, 8, 8))
    out, idx = maxpool3d(x)
    assert np.array_equal(out, oracles.maxpool(x))
    proj = r.normal(size=out.shape)
    f = lambda: float(np.sum(maxpool3d(x)[0] * proj))  # noqa: E731
    g = maxpool3d_backward(proj, idx)
    sel = r.choice(x.size, 60, replace=False)
    assert rel_error(g.ravel()[sel], numeric_grad(f, x, sel)) < 1e-6


# ------------------------------------------------------------------ deconv


def test_deconv_single_tap():
    x = np.zeros((1, 1, 2, 2, 2))
    x[0, 0, 1, 0, 1] = 1
    out = deconv3d(x, np.ones((1, 1, 2, 2, 2)), np.zeros(1))
    assert out.shape == (1, 1, 4, 4, 4)
    assert out.sum() == 8 and np.all(out[0, 0, 2:4, 0:2, 2:4] == 1)


def test_deconv_linear():
    r = rng(4)
    x = r.normal(size=(1, 3, 2, 3, 2))
    w = r.normal(size=(3, 2, 2, 2, 2))
    assert np.allclose(deconv3d(2.5 * x, w), 2.5 * deconv3d(x, w), rtol=1e-14, atol=0)


@pytest.mark.parametrize("seed", range(3))
def test_deconv_matches_oracle_and_adjoint(seed):
    r = rng(seed)
    x = r.normal(size=(2, 3, 2, 3, 2))
    w = r.normal(size=(3, 4, 2, 2, 2))
    b = r.normal(size=4)
    assert np.allclose(deconv3d(x, w, b), oracles.deconv3d(x, w, b), rtol=0, atol=1e-12)
    y = r.normal(size=(2, 4, 4, 6, 4))
    lhs = np.sum(conv3d_stride2(y, w) * x)
    rhs = np.sum(y * deconv3d(x, w))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_deconv_gradients():
    r = rng(5)
    x = r.normal(size=(1, 2, 2, 2, 2))
    w = r.normal(size=(2, 3, 2, 2, 2))
    b = r.normal(size=3)
    proj = r.normal(size=(1, 3, 4, 4, 4))
    f = lambda: float(np.sum(deconv3d(x, w, b) * proj))  # noqa: E731
    dx, dw, db = deconv3d_backward(proj, x, w)
    assert rel_error(dx, numeric_grad(f, x)) < 1e-6
    assert rel_error(dw, numeric_grad(f, w)) < 1e-6
    assert rel_error(db, numeric_grad(f, b)) < 1e-6


def test_deconv_channel_mismatch():
    with pytest.raises(ValueError):
        deconv3d(np.zeros((1, 2, 2, 2, 2)), np.zeros((3, 1, 2, 2, 2)))


# -------------------------------------------------------------------- loss


def test_loss_peaked():
    t = np.zeros((1, 2, 2, 2), int)
    logits = np.zeros((1, 3, 2, 2, 2))
    logits[:, 0] = 50
    loss, _ = softmax_cross_entropy(logits, t)
    assert loss < 1e-20


def test_loss_uniform():
    loss, grad = softmax_cross_entropy(np.zeros((1, 5, 2, 3, 2)), np.ones((1, 2, 3, 2), int))
    assert loss == pytest.approx(np.log(5), rel=1e-14)
    assert np.allclose(grad.sum(axis=1), 0, atol=1e-17)


def test_loss_out_of_range():
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((1, 3, 2, 2, 2)), np.full((1, 2, 2, 2), 3))


@pytest.mark.parametrize("weights", [None, [0.5, 2.0, 1.0, 3.0]])
def test_loss_gradient(weights):
    r = rng(6)
    logits = r.normal(size=(1, 4, 3, 3, 3))
    t = r.integers(0, 4, size=(1, 3, 3, 3))
    _, grad = softmax_cross_entropy(logits, t, weights)
    f = lambda: softmax_cross_entropy(logits, t, weights)[0]  # noqa: E731
    assert rel_error(grad, numeric_grad(f, logits)) < 1e-6
    assert np.allclose(grad.sum(axis=1), 0, atol=1e-15)


def test_softmax_is_distribution():
    p = softmax(rng(7).normal(size=(2, 6, 3, 3, 3)) * 30)
    assert np.all(p >= 0) and np.allclose(p.sum(axis=1), 1, rtol=0, atol=1e-9)


# ------------------------------------------------------------------- model


def test_published_widths():
    specs = {s.name: s for s in layer_specs(UNetConfig(1, 7))}
    got = [(specs[f"enc{i}.conv1"].c_out, specs[f"enc{i}.conv2"].c_out) for i in range(3)]
    assert got == [(16, 32), (32, 64), (64, 128)]
    assert (specs["bottleneck.conv1"].c_out, specs["bottleneck.conv2"].c_out) == (128, 256)
    got = [(specs[f"dec{i}.up"].c_out, specs[f"dec{i}.conv"].c_out) for i in range(3)]
    assert got == [(128, 128), (64, 64), (32, 7)]
    assert not specs["dec2.conv"].relu
    assert all(s.relu for s in specs.values() if s.kind == "conv" and s.name != "dec2.conv")


@pytest.mark.parametrize("scale", [Fraction(1), Fraction(1, 4), Fraction(1, 8)])
@pytest.mark.parametrize("io", [(1, 7), (8, 8), (2, 5), (1, 11)])
def test_param_count_matches_layer_walk(scale, io):
    cfg = UNetConfig(*io, width_scale=scale)
    assert param_count(cfg) == oracles.param_count(*io, scale)
    assert sum(int(np.prod(s)) for s in param_shapes(cfg).values()) == param_count(cfg)


def test_config_json_round_trip():
    cfg = UNetConfig(2, 5, width_scale="1/4")
    again = UNetConfig.from_json(json.loads(json.dumps(cfg.to_json())))
    assert again == cfg and again.width_scale == Fraction(1, 4)


def test_config_rejects_tiny_scale():
    with pytest.raises(ValueError):
        UNetConfig(width_scale=Fraction(1, 32))


def test_forward_shape():
    cfg = UNetConfig(1, 7, width_scale=Fraction(1, 4))
    out = unet_forward(cfg, init_weights(cfg, 0), np.zeros((1, 1, 16, 24, 24), np.float32))
    assert out.shape == (1, 7, 16, 24, 24)


def test_forward_rejects_bad_dims_and_weights():
    cfg = UNetConfig(1, 3, width_scale=Fraction(1, 8))
    w = init_weights(cfg, 0)
    with pytest.raises(ValueError):
        unet_forward(cfg, w, np.zeros((1, 1, 12, 8, 8)))
    with pytest.raises(ValueError):
        unet_forward(cfg, w, np.zeros((1, 2, 8, 8, 8)))
    bad = dict(w)
    bad["enc0.conv1.weight"] = np.zeros((1, 1, 3, 3, 3))
    with pytest.raises(ValueError, match="enc0.conv1.weight"):
        unet_forward(cfg, bad, np.zeros((1, 1, 8, 8, 8)))


def _e2e_errors(seed=0, per_tensor=6):
    cfg = UNetConfig(1, 3, width_scale=Fraction(1, 8))
    r = rng(seed)
    params = init_weights(cfg, seed, np.float64)
    for k in params:
        if k.endswith(".bias"):
            params[k] = r.normal(0, 0.1, size=params[k].shape)
    x = r.normal(size=(1, 1, 8, 8, 8))
    t = r.integers(0, 3, size=(1, 8, 8, 8))

    def f():
        return softmax_cross_entropy(unet_forward(cfg, params, x), t)[0]

    logits, tape = unet_forward(cfg, params, x, keep_cache=True)
    _, d = softmax_cross_entropy(logits, t)
    grads = unet_backward(cfg, params, tape, d)
    errs = {}
    for name, arr in list(params.items()) + [("input", x)]:
        sel = r.choice(arr.size, min(per_tensor, arr.size), replace=False)
        errs[name] = rel_error(grads[name].ravel()[sel], numeric_grad(f, arr, sel))
    return errs


def test_end_to_end_gradient():
    errs = _e2e_errors()
    assert max(errs.values()) < 1e-4, errs


# ---------------------------------------------------------------- weights


def test_weights_round_trip(tmp_path):
    cfg = UNetConfig(2, 5, width_scale=Fraction(1, 8))
    store = WeightStore.initialise(cfg, 3)
    store.meta["stage"] = "UNET3_PARCELLATE"
    save_weights(store, tmp_path / "m.w3u")
    back = load_weights(tmp_path / "m.w3u")
    assert back.config == cfg and back.meta == store.meta
    assert back.digest() == store.digest()
    for k in store.params:
        assert back.params[k].dtype == store.params[k].dtype
        assert np.array_equal(back.params[k], store.params[k])


def test_weights_truncated(tmp_path):
    p = tmp_path / "m.w3u"
    save_weights(WeightStore.initialise(UNetConfig(width_scale=Fraction(1, 8))), p)
    p.write_bytes(p.read_bytes()[:-7])
    with pytest.raises(WeightFileError, match="truncated"):
        load_weights(p)


def test_weights_wrong_shape_names_layer(tmp_path):
    import struct

    p = tmp_path / "m.w3u"
    save_weights(WeightStore.initialise(UNetConfig(width_scale=Fraction(1, 8))), p)
    raw = p.read_bytes()
    (n,) = struct.unpack_from("<Q", raw, 4)
    manifest = json.loads(raw[12 : 12 + n])
    for e in manifest["entries"]:
        if e["name"] == "dec1.up.weight":
            e["shape"] = e["shape"][::-1]
    head = json.dumps(manifest).encode()
    p.write_bytes(raw[:4] + struct.pack("<Q", len(head)) + head + raw[12 + n :])
    with pytest.raises(WeightFileError, match="dec1.up.weight"):
        load_weights(p)


def test_weights_config_mismatch(tmp_path):
    p = tmp_path / "m.w3u"
    save_weights(WeightStore.initialise(UNetConfig(1, 7, width_scale=Fraction(1, 8))), p)
    with pytest.raises(WeightFileError):
        load_weights(p, UNetConfig(1, 8, width_scale=Fraction(1, 8)))


def test_not_a_weight_file(tmp_path):
    p = tmp_path / "x.w3u"
    p.write_bytes(b"hello world, not weights")
    with pytest.raises(WeightFileError):
        load_weights(p)


# ---------------------------------------------------------------- training


def _toy_sample(seed=0, dims=(8, 8, 8)):
    r = rng(seed)
    y = np.zeros(dims, np.int64)
    y[2:6, 2:6, 2:6] = 1
    y[3:5, 3:5, 3:5] = 2
    x = (y * 1.0 + r.normal(0, 0.1, dims))[None].astype(np.float32)
    return x, y


def test_zero_lr_changes_nothing():
    cfg = UNetConfig(1, 3, width_scale=Fraction(1, 8))
    res = train(cfg, [_toy_sample()], TrainParams(lr=0.0, steps=3))
    assert len(set(res.loss_history)) == 1
    init = WeightStore.initialise(cfg, 0)
    for k in init.params:
        assert np.array_equal(res.weights.params[k], init.params[k])


def test_training_is_deterministic():
    cfg = UNetConfig(1, 3, width_scale=Fraction(1, 8))
    data = [_toy_sample(0), _toy_sample(1)]
    a = train(cfg, data, TrainParams(steps=6, seed=4))
    b = train(cfg, data, TrainParams(steps=6, seed=4))
    assert a.loss_history == b.loss_history
    assert a.weights.digest() == b.weights.digest()


def test_overfit_single_sample():
    cfg = UNetConfig(1, 3, width_scale=Fraction(1, 8))
    res = train(cfg, [_toy_sample()], TrainParams(steps=300, lr=3e-3, dtype="float64"))
    assert res.loss_history[-1] < 0.01


def test_training_rejects_empty_and_mixed():
    cfg = UNetConfig(1, 3, width_scale=Fraction(1, 8))
    with pytest.raises(ValueError):
        train(cfg, [], TrainParams())
    with pytest.raises(ValueError):
        train(cfg, [_toy_sample(), _toy_sample(dims=(8, 8, 16))], TrainParams(steps=1))


def test_divergence_guard():
    from heartrefine.unet import TrainingDiverged

    cfg = UNetConfig(1, 3, width_scale=Fraction(1, 8))
    x, y = _toy_sample()
    x = x.copy()
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged):
        train(cfg, [(x, y)], TrainParams(steps=2))


def test_best_validation_checkpoint():
    cfg = UNetConfig(1, 3, width_scale=Fraction(1, 8))
    data = [_toy_sample()]
    res = train(cfg, data, TrainParams(steps=20, val_every=5, lr=3e-3), val_dataset=data)
    assert [s for s, _ in res.val_history] == [5, 10, 15, 20]
    best_step, best_loss = min(res.val_history, key=lambda p: p[1])
    assert res.best_step == best_step
    from heartrefine.unet import evaluate_loss

    assert evaluate_loss(res.weights, data) == pytest.approx(best_loss, rel=1e-6)
