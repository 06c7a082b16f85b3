import numpy as np
import pytest

from dsdkit import nnet
from dsdkit.errors import ConfigError, FormatError, NumericError, ShapeError

from conftest import FD_TOL, numeric_grad, rel_err


def test_build_shapes():
    m = nnet.build_mlp(10, [256, 128, 2], seed=0)
    assert [l.weight.shape for l in m.layers] == [(10, 256), (256, 128), (128, 2)]
    assert [l.activation for l in m.layers] == ["relu", "relu", "none"]
    out = nnet.forward(m, np.zeros((3, 10)))
    assert out.penultimate_embedding.shape == (3, 128)
    assert out.logits.shape == (3, 2)


def test_build_deterministic():
    a = nnet.build_mlp(5, [4, 2], seed=3)
    b = nnet.build_mlp(5, [4, 2], seed=3)
    assert all(np.array_equal(p, q) for p, q in zip(a.params(), b.params()))


def test_softmax_two_class_exact_complement():
    rng = np.random.default_rng(0)
    p = nnet.softmax(rng.normal(size=(100, 2)) * 10)
    assert np.array_equal(p[:, 0], 1.0 - p[:, 1])
    p3 = nnet.softmax(rng.normal(size=(5, 3)))
    assert np.allclose(p3.sum(1), 1.0)


def test_softmax_large_logits():
    p = nnet.softmax(np.array([[1000.0, 0.0]]))
    assert np.isfinite(p).all()


@pytest.mark.parametrize("seed", range(5))
def test_backward_finite_difference(seed):
    rng = np.random.default_rng(seed)
    m = nnet.build_mlp(4, [6, 5, 3], seed=seed)
    x = rng.normal(size=(7, 4))
    r = rng.normal(size=(7, 3))
    loss = lambda: float(np.sum(nnet.forward_cache(m, x)[-1] * r))
    grads, gx = nnet.backward(m, x, r, return_input_grad=True)
    for p, g in zip(m.params(), grads):
        assert rel_err(g, numeric_grad(loss, p)) < FD_TOL
    assert rel_err(gx, numeric_grad(loss, x)) < FD_TOL


def test_linear_layer_closed_form():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(20, 3))
    y = rng.normal(size=(20, 2))
    m = nnet.build_mlp(3, [2], seed=0)
    w = m.layers[0].weight
    out = nnet.forward_cache(m, x)[-1]
    n = x.shape[0]
    grads = nnet.backward(m, x, 2.0 * (out - y) / n)
    assert np.allclose(grads[0], 2.0 * x.T @ (x @ w - y) / n, atol=1e-12)


def test_backward_rejects_nonfinite():
    m = nnet.build_mlp(2, [2], seed=0)
    with pytest.raises(NumericError):
        nnet.backward(m, np.zeros((1, 2)), np.array([[np.nan, 0.0]]))


def test_forward_shape_error():
    m = nnet.build_mlp(3, [2], seed=0)
    with pytest.raises(ShapeError):
        nnet.forward(m, np.zeros((2, 4)))


def test_adam_first_step():
    p = [np.array([1.0, -2.0, 0.5])]
    g = [np.array([0.3, -4.0, 1e-3])]
    st = nnet.AdamState.zeros_like(p)
    new, st2 = nnet.adam_step(p, g, st, lr=0.01)
    expect = p[0] - 0.01 * g[0] / (np.abs(g[0]) + 1e-8)
    assert np.allclose(new[0], expect, rtol=0, atol=1e-15)
    assert st2.t == 1
    assert np.array_equal(p[0], [1.0, -2.0, 0.5])


def test_adam_bad_lr():
    p = [np.zeros(2)]
    with pytest.raises(ConfigError):
        nnet.adam_step(p, p, nnet.AdamState.zeros_like(p), lr=0.0)


def test_training_reduces_loss():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(200, 2))
    y = (x[:, 0] + x[:, 1] > 0).astype(int)
    m = nnet.build_mlp(2, [16, 2], seed=0)
    params = m.params()
    st = nnet.AdamState.zeros_like(params)

    def loss_and_grad(model):
        p = nnet.forward(model, x).probabilities
        onehot = np.eye(2)[y]
        return -np.mean(np.log(p[np.arange(200), y])), (p - onehot) / 200

    first, _ = loss_and_grad(m)
    for _ in range(300):
        _, g = loss_and_grad(m)
        params, st = nnet.adam_step(params, nnet.backward(m, x, g), st, lr=0.02)
        m = m.with_params(params)
    last, _ = loss_and_grad(m)
    assert last < 0.3 * first
    acc = np.mean(nnet.forward(m, x).probabilities.argmax(1) == y)
    assert acc > 0.95


def test_checkpoint_roundtrip(tmp_path):
    m = nnet.build_mlp(5, [7, 3], seed=9)
    path = tmp_path / "m.bin"
    nnet.save_model(m, path)
    back = nnet.load_model(path)
    assert [l.activation for l in back.layers] == [l.activation for l in m.layers]
    assert all(np.array_equal(p, q) for p, q in zip(m.params(), back.params()))
    assert nnet.model_to_bytes(back) == path.read_bytes()


def test_checkpoint_corrupt(tmp_path):
    blob = nnet.model_to_bytes(nnet.build_mlp(5, [7, 3], seed=9))
    with pytest.raises(FormatError):
        nnet.model_from_bytes(blob[:-5])
    with pytest.raises(FormatError):
        nnet.model_from_bytes(b"XXXXXXXX" + blob[8:])
    path = tmp_path / "t.bin"
    path.write_bytes(blob + b"\x00")
    with pytest.raises(FormatError):
        nnet.load_model(path)
