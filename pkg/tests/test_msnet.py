import numpy as np
import pytest

from sglkf import msnet
from sglkf.errors import ConfigurationError, NumericError, ShapeMismatchError
from gradcheck import msnet_check, msnet_loss_and_grad

CFG2 = msnet.MSNetConfig()
CFG3 = msnet.MSNetConfig.for_state_dim(12)


def _inputs(rng, n, cfg=CFG2):
    sizes = rng.uniform(5, 200, (n, cfg.n_tokens - 1)) if cfg.n_tokens == 3 else rng.uniform(0.5, 6, (n, 3))
    return np.column_stack([rng.uniform(0, 80, n), sizes])


def _weights(rng, n, cfg=CFG2):
    return {h: rng.standard_normal((n, d)) for h, d in cfg.head_dims.items()}


def test_param_count_band():
    n = msnet.param_count(CFG2)
    assert 66_000 <= n <= 90_000
    assert n == msnet.init_params(CFG2).count() == 79_829


def test_param_count_monotone_in_channels():
    bigger = msnet.MSNetConfig(channels=128)
    assert msnet.param_count(bigger) > msnet.param_count(CFG2)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        msnet.MSNetConfig(layers=5)
    with pytest.raises(ConfigurationError):
        msnet.MSNetConfig(n_tokens=2)
    with pytest.raises(ConfigurationError):
        msnet.MSNetConfig.for_state_dim(10)


def test_init_deterministic():
    a, b, c = msnet.init_params(CFG2, 1), msnet.init_params(CFG2, 1), msnet.init_params(CFG2, 2)
    assert np.array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.flat(), c.flat())
    assert np.all(a["bb0.layer1.ln.scale"] == 1) and np.all(a["bb0.layer1.ln.shift"] == 0)


def test_forward_shapes_and_positivity(rng):
    p = msnet.init_params(CFG2)
    out = msnet.forward(p, _inputs(rng, 10_000))
    assert out["q"].shape == (10_000, 8) and out["r"].shape == (10_000, 4) and out["p"].shape == (10_000, 8)
    assert min(v.min() for v in out.values()) > 0
    single = msnet.forward(p, np.array([10.0, 40.0, 30.0]))
    assert single["q"].shape == (8,)
    p3 = msnet.init_params(CFG3)
    out3 = msnet.forward(p3, _inputs(rng, 5, CFG3))
    assert out3["q"].shape == (5, 12) and out3["r"].shape == (5, 6)


def test_forward_errors():
    p = msnet.init_params(CFG2)
    with pytest.raises(NumericError):
        msnet.forward(p, np.array([np.nan, 1.0, 1.0]))
    with pytest.raises(ShapeMismatchError):
        msnet.forward(p, np.array([1.0, 1.0]))


def test_constant_head():
    p = msnet.init_params(CFG2)
    b = np.linspace(-1, 1, 8)
    p.arrays["head.q.fc2.weight"][:] = 0.0
    p.arrays["head.q.fc2.bias"][:] = b
    q = msnet.forward(p, np.array([[0, 10, 10], [60, 100, 50.0]]))["q"]
    expected = 100.0 * (np.logaddexp(0, b) + msnet.SOFTPLUS_EPS)
    np.testing.assert_allclose(q, np.tile(expected, (2, 1)), rtol=1e-14)
    out, tape = msnet.record(p, np.array([[5, 10, 10.0]]), heads=("q",))
    gp, _ = msnet.backward(tape, {"q": np.ones((1, 8))})
    assert np.all(gp["bb0.layer1.fc1.weight"] == 0)
    assert np.all(gp["head.q.fc1.weight"] == 0)


def test_residual_identity(rng):
    p = msnet.init_params(CFG2)
    for name in p.names():
        if ".layer" in name and ".fc" in name:
            p.arrays[name][:] = 0.0
    x = _inputs(rng, 4)
    u = x / np.array([100.0, 100.0, 100.0])
    tokens = u[:, :, None] * p["bb0.embed.weight"] + p["bb0.embed.bias"]
    flat = tokens.reshape(4, -1)
    h = flat @ p["head.r.fc1.weight"] + p["head.r.fc1.bias"]
    a = 0.5 * h * (1 + np.tanh(np.sqrt(2 / np.pi) * (h + 0.044715 * h ** 3)))
    o = a @ p["head.r.fc2.weight"] + p["head.r.fc2.bias"]
    np.testing.assert_allclose(msnet.forward(p, x)["r"], 100.0 * (np.logaddexp(0, o) + 1e-6), rtol=1e-12)


def test_forward_deterministic_and_replay(rng):
    p = msnet.init_params(CFG2)
    x = _inputs(rng, 7)
    out, tape = msnet.record(p, x)
    again = tape.replay()
    for h in out:
        assert np.array_equal(out[h], again[h])
        assert np.array_equal(out[h], msnet.forward(p, x)[h])


@pytest.mark.parametrize("cfg", [CFG2, CFG3, msnet.MSNetConfig(shared_backbone=False, channels=16)])
def test_backward_matches_finite_differences(cfg, rng):
    p = msnet.init_params(cfg, seed=4)
    x = _inputs(rng, 3, cfg)
    assert msnet_check(p, x, _weights(rng, 3, cfg), 100, rng) < 1e-4


def test_backward_linear_in_seed(rng):
    p = msnet.init_params(CFG2)
    x = _inputs(rng, 3)
    w = _weights(rng, 3)
    _, g1, _ = msnet_loss_and_grad(p, x, w)
    _, g2, _ = msnet_loss_and_grad(p, x, {h: 2 * v for h, v in w.items()})
    np.testing.assert_allclose(g2, 2 * g1, rtol=1e-12, atol=1e-300)


def test_backward_shape_errors(rng):
    p = msnet.init_params(CFG2)
    _, tape = msnet.record(p, _inputs(rng, 2), heads=("q",))
    with pytest.raises(ShapeMismatchError):
        msnet.backward(tape, {"r": np.ones((2, 4))})
    with pytest.raises(ShapeMismatchError):
        msnet.backward(tape, {"q": np.ones((3, 8))})


def test_decay_exemption():
    assert msnet.is_decay_exempt("bb0.layer2.ln.scale")
    assert msnet.is_decay_exempt("head.q.fc1.bias")
    assert not msnet.is_decay_exempt("bb0.layer2.fc1.weight")


def test_checkpoint_roundtrip(tmp_path, rng):
    p = msnet.init_params(CFG2, seed=9)
    path = tmp_path / "m.ckpt"
    msnet.save(p, path)
    q = msnet.load(path, CFG2)
    x = _inputs(rng, 10)
    for h, v in msnet.forward(p, x).items():
        assert np.array_equal(v, msnet.forward(q, x)[h])
    data = path.read_bytes()
    assert data[:4] == b"MSN1"
    assert len(data) == 4 + 40 + 8 * msnet.param_count(CFG2) + 24


def test_checkpoint_errors(tmp_path):
    p = msnet.init_params(CFG2)
    path = tmp_path / "m.ckpt"
    msnet.save(p, path)
    (tmp_path / "t.ckpt").write_bytes(path.read_bytes()[:-100])
    with pytest.raises(ShapeMismatchError):
        msnet.load(tmp_path / "t.ckpt")
    with pytest.raises(ShapeMismatchError):
        msnet.load(path, CFG3)
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(ShapeMismatchError):
        msnet.load(tmp_path / "bad.ckpt")
