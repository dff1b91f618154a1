import numpy as np
import pytest

from hstf.features import FeatureConfig, flows_to_samples
from hstf.ingest import Label
from hstf.net import (Adam, ConfigError, HSTFNet, ModelConfig, conv_forward, conv_pool, encode_fl, encode_pl,
                      encode_raw, init_params, lstm_forward, lstm_weights, pool_forward, predict, softmax,
                      stack_samples, train, train_epoch)
from hstf.synth import generate_corpus

from gradcheck import max_relative_errors

# 0.5*tanh(1) and 0.5*tanh(0.5*tanh(1)), evaluated at 40 digits
C1 = 0.3807970779778824440597291413023967952064
H1 = 0.1816997421945262458824844086522329991120


@pytest.fixture(scope="module")
def tiny_samples():
    return flows_to_samples(generate_corpus(6, 6, "high", seed=5), FeatureConfig(rows=4, cols=8, flow_size=2))


def _zeroed(params):
    return {k: np.zeros_like(v) for k, v in params.items()}


def test_default_shape_chain():
    cfg = ModelConfig()
    assert cfg.conv_shape == (10, 17)
    assert cfg.pool_shape == (9, 16)
    assert cfg.conv_flat == 288
    assert cfg.packet_dim == 320
    assert cfg.fused_dim == 96


def test_invalid_geometry_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(rows=4, cols=8, kernel_h=2, kernel_w=8, stride=2)


def test_encode_raw_zero_and_identity():
    cfg = ModelConfig()
    p = _zeroed(init_params(cfg))
    assert not encode_raw(np.zeros((3, 20, 40)), p, cfg).any()
    p["er_W0"] = np.eye(40)
    x = np.random.default_rng(0).random((2, 20, 40))
    np.testing.assert_array_equal(encode_raw(x, p, cfg), x)


def test_encode_raw_shape_mismatch():
    cfg = ModelConfig()
    with pytest.raises(ConfigError):
        encode_raw(np.zeros((1, 10, 40)), init_params(cfg), cfg)


def test_conv_constant_field():
    cfg = ModelConfig(kernels=1)
    p = _zeroed(init_params(cfg))
    p["conv_W"][:] = 1.0
    out = conv_pool(np.full((1, 20, 40), 0.25), p, cfg)
    assert out.shape == (1, 144)
    np.testing.assert_allclose(out, 16 * 0.25)


def test_conv_zero_input_gives_relu_bias():
    cfg = ModelConfig(dtype="float64")
    p = _zeroed(init_params(cfg))
    p["conv_b"][:] = [0.3, -0.2]
    y, _ = conv_forward(np.zeros((1, 20, 40)), p, cfg)
    assert y.shape == (1, 10, 17, 2)
    np.testing.assert_array_equal(y[..., 0], 0.3)
    np.testing.assert_array_equal(y[..., 1], 0.0)
    assert pool_forward(y, cfg)[0].shape == (1, 9, 16, 2)


def test_pool_tie_goes_to_first_cell():
    cfg = ModelConfig()
    _, (idx, _) = pool_forward(np.ones((1, 10, 17, 2)), cfg)
    assert not idx.any()


def test_stat_encoders():
    cfg = ModelConfig()
    p = init_params(cfg)
    z = _zeroed(p)
    assert not encode_pl(np.zeros(41), z).any()
    assert encode_pl(np.ones(41), p).shape == (32,)
    assert encode_fl(np.ones(57), p, "req").shape == encode_fl(np.ones(58), p, "res").shape == (32,)
    with pytest.raises(ConfigError):
        encode_fl(np.ones(57), p, "res")


def test_lstm_zero_everything():
    W, b = np.zeros((5 + 3, 12)), np.zeros(12)
    h, _ = lstm_forward(np.zeros((2, 4, 5)), W, b, 3)
    assert not h.any()


def test_scalar_lstm_hand_example():
    W = np.zeros((2, 4))
    W[1, 2] = 1.0  # candidate pre-activation = x = 1
    h, steps = lstm_forward(np.ones((1, 1, 1)), W, np.zeros(4), 1)
    c1 = steps[0][1] * steps[0][5] + steps[0][2] * steps[0][3]
    assert c1[0, 0] == pytest.approx(C1, abs=1e-15)
    assert h[0, 0] == pytest.approx(H1, abs=1e-15)


def test_lstm_order_sensitive():
    cfg = ModelConfig(dtype="float64")
    W, b = lstm_weights(init_params(cfg), "req")
    X = np.random.default_rng(2).random((1, 3, cfg.packet_dim))
    a, _ = lstm_forward(X, W, b, cfg.lstm_hidden)
    r, _ = lstm_forward(X[:, ::-1], W, b, cfg.lstm_hidden)
    assert not np.allclose(a, r)


def test_forget_bias_initialised_to_one():
    p = init_params(ModelConfig())
    assert (p["lstm_req_b_f"] == 1).all() and not p["lstm_req_b_i"].any()


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(0).normal(scale=30, size=(100, 2))
    np.testing.assert_allclose(softmax(x).sum(1), 1.0, atol=1e-9)


def test_forward_infer_deterministic_and_normalised(small_samples):
    net = HSTFNet(ModelConfig(dtype="float64"))
    b = stack_samples(small_samples[:8], "float64")
    p1, _ = net.forward(b)
    p2, _ = net.forward(b)
    assert p1.tobytes() == p2.tobytes()
    np.testing.assert_allclose(p1.sum(1), 1.0, atol=1e-9)
    assert ((p1 >= 0) & (p1 <= 1)).all()


def test_dropout_reproducible_with_seed(small_samples):
    net = HSTFNet(ModelConfig())
    b = stack_samples(small_samples[:8])
    a, _ = net.forward(b, train=True, rng=np.random.default_rng(9))
    c, _ = net.forward(b, train=True, rng=np.random.default_rng(9))
    d, _ = net.forward(b)
    assert a.tobytes() == c.tobytes()
    assert not np.array_equal(a, d)


def test_gradients_finite_and_logit_identity(small_samples):
    net = HSTFNet(ModelConfig(dtype="float64"))
    b = stack_samples(small_samples[:6], "float64")
    probs, cache = net.forward(b, train=True, rng=np.random.default_rng(0))
    grads = net.backward(cache)
    assert set(grads) == set(net.params)
    assert all(np.isfinite(g).all() for g in grads.values())
    onehot = np.eye(2)[b.y]
    # out_b gradient is the batch sum of dL/dlogits
    np.testing.assert_allclose(grads["out_b"], (probs - onehot).sum(0) / len(b), atol=1e-15)


def test_gradient_check_shrunken(tiny_cfg, tiny_samples):
    net = HSTFNet(tiny_cfg)
    worst = max_relative_errors(net, stack_samples(tiny_samples[:4], "float64"))
    assert max(worst.values()) < 1e-4, worst


def test_gradient_check_without_stats(tiny_cfg, tiny_samples):
    net = HSTFNet(tiny_cfg.replace(use_stats=False))
    worst = max_relative_errors(net, stack_samples(tiny_samples[:3], "float64"))
    assert max(worst.values()) < 1e-4, worst


def test_shape_mismatch_is_fatal(tiny_samples):
    with pytest.raises(ConfigError):
        HSTFNet(ModelConfig()).forward(stack_samples(tiny_samples[:2]))


def test_lr_zero_leaves_params(small_samples):
    cfg = ModelConfig(lr=0.0)
    net = HSTFNet(cfg)
    before = {k: v.copy() for k, v in net.params.items()}
    train_epoch(net, Adam(net.params, 0.0), small_samples, np.random.default_rng(0))
    assert all(np.array_equal(before[k], net.params[k]) for k in before)


@pytest.fixture(scope="module")
def toy_run():
    samples = flows_to_samples(generate_corpus(100, 100, "high", seed=21))
    rng = np.random.default_rng(0)
    order = rng.permutation(200)
    tr, va = [samples[i] for i in order[:160]], [samples[i] for i in order[160:]]
    return tr, va, train(tr, va, ModelConfig())


def test_toy_set_reaches_perfect_val_f1(toy_run):
    _, _, (_, hist) = toy_run
    assert len(hist) <= 50
    assert max(h.val_f1 for h in hist) == 1.0


def test_training_deterministic(toy_run):
    tr, va, (net, hist) = toy_run
    cfg = ModelConfig(max_epochs=3)
    a, ha = train(tr, va, cfg)
    b, hb = train(tr, va, cfg)
    assert [h.loss for h in ha] == [h.loss for h in hb]
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_empty_split_rejected(small_samples):
    with pytest.raises(ValueError):
        train([], small_samples, ModelConfig())
    with pytest.raises(ValueError):
        train(small_samples, [], ModelConfig())


@pytest.mark.parametrize("p, lam, want", [
    (0.7, 0.5, Label.MALICIOUS),
    (0.7, 0.7, Label.BENIGN),
    (0.999999, 1.0, Label.BENIGN),
    (1.0, 1.0, Label.BENIGN),
])
def test_predict_threshold(p, lam, want):
    assert predict(p, lam) is want


def test_predict_rejects_bad_threshold():
    with pytest.raises(ValueError):
        predict(0.5, 1.5)


@pytest.mark.parametrize("sidecar", [False, True])
def test_checkpoint_roundtrip(tmp_path, small_samples, sidecar):
    net = HSTFNet(ModelConfig())
    path = tmp_path / "m.json"
    net.save(path, {"note": "x"}, sidecar=sidecar)
    back, meta = HSTFNet.load(path)
    assert meta == {"note": "x"} and back.cfg == net.cfg
    assert net.predict_proba(small_samples).tobytes() == back.predict_proba(small_samples).tobytes()


def test_checkpoint_param_shape_mismatch(tmp_path):
    net = HSTFNet(ModelConfig())
    net.params["head_W"] = net.params["head_W"][:, :10]
    with pytest.raises(ConfigError):
        HSTFNet(ModelConfig(), net.params)
