import numpy as np
import pytest

from floodkd.errors import ConfigError, ContractError, FormatError, SchemaError
from floodkd.gradcheck import model_gradcheck
from floodkd.model import (SegNet, SegNetConfig, backward, conv_forward, forward, init,
                           load_checkpoint, save_checkpoint, softmax_probs)

from oracles import finite_difference, max_rel_error


def closed_form_count(in_ch, w, skips):
    """Parameter count written out from the layer table in the model docstring."""
    d = 2 * w
    n = (9 * in_ch * w + w) + (9 * w * 2 * w + 2 * w) + (9 * 2 * w * 4 * w + 4 * w)
    n += 2 * (9 * 4 * w * 4 * w + 4 * w)               # enc4 and ctx
    skip_ch = {4: 2 * w, 2: w, 1: in_ch}
    prev = 4 * w
    for s in skips:
        n += 9 * (prev + skip_ch[s]) * d + d
        prev = d
    return n + d * 2 + 2


@pytest.mark.parametrize("skips", [(4,), (4, 2), (4, 2, 1), (2, 1), (1,)])
@pytest.mark.parametrize("in_ch,w", [(2, 8), (6, 8), (3, 4)])
def test_param_count_closed_form(skips, in_ch, w):
    net = init(SegNetConfig(in_ch, w, skips))
    assert net.num_params() == closed_form_count(in_ch, w, skips)


def test_init_deterministic_and_shared_architecture():
    a = init(SegNetConfig(2, 8, (4, 2), seed=5))
    b = init(SegNetConfig(2, 8, (4, 2), seed=5))
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    t = init(SegNetConfig(6, 8, (4, 2), seed=5))
    diff = [k for k in a.params if a.params[k].shape != t.params[k].shape]
    assert diff == ["enc1.w"]
    assert all(np.all(v == 0) for k, v in a.params.items() if k.endswith(".b"))
    bound = np.sqrt(6 / (9 * 2))
    assert np.abs(a.params["enc1.w"]).max() <= bound


@pytest.mark.parametrize("cfg", [dict(in_channels=0), dict(skip_strides=()),
                                 dict(skip_strides=(2, 4)), dict(skip_strides=(8,)),
                                 dict(base_width=0), dict(encoder_strides=(2, 2, 2))])
def test_config_errors(cfg):
    with pytest.raises(ConfigError):
        SegNetConfig(**cfg)


@pytest.mark.parametrize("skips", [(4,), (4, 2), (4, 2, 1)])
def test_forward_shapes(skips, rng):
    net = init(SegNetConfig(2, 4, skips))
    logits, _ = forward(net, rng.random((64, 64, 2)))
    assert logits.shape == (64, 64, 2) and np.isfinite(logits).all()
    batch, _ = forward(net, rng.random((3, 32, 48, 2)))
    assert batch.shape == (3, 32, 48, 2)


def test_skip_config_changes_values_not_shape(rng):
    x = rng.random((32, 32, 2))
    a, _ = forward(init(SegNetConfig(2, 4, (4,), seed=1)), x)
    b, _ = forward(init(SegNetConfig(2, 4, (4, 2, 1), seed=1)), x)
    assert a.shape == b.shape and not np.allclose(a, b)


def test_forward_errors(rng):
    net = init(SegNetConfig(2, 4))
    with pytest.raises(SchemaError):
        forward(net, rng.random((32, 32, 3)))
    with pytest.raises(SchemaError):
        forward(net, rng.random((30, 32, 2)))


def test_zero_net_gives_zero_logits(rng):
    net = init(SegNetConfig(2, 4))
    for p in net.params.values():
        p[...] = 0
    logits, _ = forward(net, rng.random((32, 32, 2)))
    assert np.all(logits == 0)


def test_conv_linearity_fixture(rng):
    w = rng.standard_normal((3, 3, 2, 4)).astype(np.float32)
    x = rng.standard_normal((1, 8, 8, 2)).astype(np.float32)
    y1, _ = conv_forward(x, w, np.zeros(4, np.float32))
    y2, _ = conv_forward(2 * x, w, np.zeros(4, np.float32))
    np.testing.assert_allclose(y2, 2 * y1, rtol=1e-6, atol=1e-6)


def test_forward_deterministic(rng):
    net = init(SegNetConfig(2, 4, seed=3))
    x = rng.random((32, 32, 2))
    assert np.array_equal(forward(net, x)[0], forward(net, x)[0])


def test_softmax_examples():
    np.testing.assert_allclose(softmax_probs(np.zeros((1, 1, 2))), [[[0.5, 0.5]]])
    p = softmax_probs(np.array([[[1000.0, 0.0]]]))
    assert np.all(np.isfinite(p)) and p[0, 0, 0] == 1.0 and p[0, 0, 1] == 0.0
    z = np.random.default_rng(0).standard_normal((4, 4, 2))
    np.testing.assert_allclose(softmax_probs(z + 7.5), softmax_probs(z), atol=1e-12)
    np.testing.assert_allclose(softmax_probs(z).sum(-1), 1.0)


# --- backward -------------------------------------------------------------------

def test_backward_zero_grad(rng):
    net = init(SegNetConfig(2, 4))
    _, tr = forward(net, rng.random((16, 16, 2)))
    grads = backward(net, tr, np.zeros((16, 16, 2)))
    assert all(np.all(g == 0) for g in grads.values())
    assert set(grads) == set(net.params)


def test_backward_duplicated_batch(rng):
    net = init(SegNetConfig(2, 4, seed=2))
    x = rng.random((16, 16, 2)).astype(np.float32)
    g = rng.standard_normal((16, 16, 2)).astype(np.float32)
    _, tr1 = forward(net, x)
    single = backward(net, tr1, g)
    _, tr2 = forward(net, np.stack([x, x]))
    double = backward(net, tr2, np.stack([g, g]))
    for k in single:
        np.testing.assert_allclose(double[k], 2 * single[k], rtol=1e-4, atol=1e-5)


def test_stale_trace_rejected(rng):
    net = init(SegNetConfig(2, 4))
    _, tr = forward(net, rng.random((16, 16, 2)))
    net.touch()
    with pytest.raises(ContractError):
        backward(net, tr, np.zeros((16, 16, 2)))
    other = net.copy()
    _, tr = forward(net, rng.random((16, 16, 2)))
    with pytest.raises(ContractError):
        backward(other, tr, np.zeros((16, 16, 2)))


@pytest.mark.parametrize("skips", [(4,), (4, 2, 1)])
def test_backward_matches_test_oracle(skips):
    """Independent loop-based central differences on a couple of tensors."""
    g = np.random.default_rng(7)
    net = init(SegNetConfig(2, 2, skips, seed=7), np.float64)
    x = g.standard_normal((1, 16, 16, 2))
    gl = g.standard_normal((1, 16, 16, 2))
    _, tr = forward(net, x)
    grads = backward(net, tr, gl)
    for name in ("enc1.b", "head.w", f"dec{skips[-1]}.b", "ctx.b"):
        num = finite_difference(lambda: (forward(net, x)[0] * gl).sum(), net.params[name], 1e-6)
        assert max_rel_error(grads[name], num) < 1e-5, name


@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_float32(seed):
    assert model_gradcheck(seed) <= 1e-3


# --- checkpoints -----------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    net = init(SegNetConfig(6, 4, (4, 2, 1), seed=99))
    save_checkpoint(net, tmp_path / "a.ckpt")
    raw = (tmp_path / "a.ckpt").read_bytes()
    assert raw[:4] == b"FSNW"
    back = load_checkpoint(tmp_path / "a.ckpt", net.config)
    assert back.config == net.config
    assert all(np.array_equal(back.params[k], net.params[k]) for k in net.params)
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "b.ckpt").read_bytes() == raw
    assert back.checksum() == net.checksum()


def test_checkpoint_config_mismatch(tmp_path):
    net = init(SegNetConfig(2, 4))
    save_checkpoint(net, tmp_path / "a.ckpt")
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "a.ckpt", SegNetConfig(6, 4))
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "a.ckpt", SegNetConfig(2, 4, (4,)))
    (tmp_path / "bad.ckpt").write_bytes(b"NOPE" + bytes(30))
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad.ckpt")
