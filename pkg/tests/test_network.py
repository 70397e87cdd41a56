import numpy as np
import pytest

from ownverify import tensor as T
from ownverify.errors import FormatError, ShapeError
from ownverify.network import (Conv2d, Dense, Flatten, MaxPool, NetworkSpec, ReLU,
                               fan_in_bound, init_network, input_gradient, load_model,
                               model_from_bytes, model_to_bytes, save_model, spec_by_name)

from oracles import central_difference, relative_errors


def small_cnn():
    return NetworkSpec([Conv2d(1, 3, 3, 3, padding=1), ReLU(), MaxPool(2, 2), Flatten(),
                        Dense(48, 4)], (1, 8, 8), 4)


def test_spec_chaining_is_checked():
    with pytest.raises(ShapeError):
        NetworkSpec([Flatten(), Dense(10, 3)], (1, 4, 4), 3)
    with pytest.raises(ShapeError):
        NetworkSpec([Flatten(), Dense(16, 3)], (1, 4, 4), 4)


def test_spec_dict_round_trip():
    spec = spec_by_name("cnn-small")
    assert NetworkSpec.from_dict(spec.to_dict()) == spec


def test_unknown_architecture():
    with pytest.raises(ValueError):
        spec_by_name("resnet")


def test_init_is_deterministic_and_bounded():
    spec = spec_by_name("mlp-small")
    a, b, c = init_network(spec, 5), init_network(spec, 5), init_network(spec, 6)
    for pa, pb in zip(a.params, b.params):
        if pa is not None:
            assert np.array_equal(pa[0], pb[0])
    assert not np.array_equal(a.params[1][0], c.params[1][0])
    for layer, p in zip(spec.layers, a.params):
        if p is not None:
            fan_in = int(np.prod(p[0].shape[1:]))
            assert np.abs(p[0]).max() <= fan_in_bound(fan_in)
            assert not p[1].any()


def test_forward_is_a_distribution():
    net = init_network(spec_by_name("cnn-small"), 0)
    p = net.forward(np.random.default_rng(0).uniform(size=(1, 16, 16)))
    assert p.shape == (10,) and abs(p.sum() - 1) < 1e-12


def test_wrong_input_shape():
    net = init_network(small_cnn(), 0)
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 9, 9)))


def test_batch_forward_matches_single():
    net = init_network(small_cnn(), 1)
    xs = np.random.default_rng(1).uniform(size=(5, 1, 8, 8))
    batch = net.forward_batch(xs)
    for x, p in zip(xs, batch):
        np.testing.assert_allclose(net.forward(x), p, atol=1e-14)


@pytest.mark.parametrize("arch", ["cnn-small", "mlp-small"])
def test_input_gradient_finite_difference(arch):
    net = init_network(spec_by_name(arch), 3, gain=1.0)
    x = np.random.default_rng(3).uniform(0.2, 0.8, size=(1, 16, 16))
    g = input_gradient(net, x, 4)
    num = central_difference(lambda v: T.cross_entropy(net.forward(v), 4), x.copy())
    assert relative_errors(g, num).max() < 1e-4


def test_multi_class_gradients_match_single_calls():
    net = init_network(small_cnn(), 2)
    x = np.random.default_rng(2).uniform(size=(1, 8, 8))
    p, grads = net.input_gradients(x, [0, 3])
    np.testing.assert_allclose(p, net.forward(x))
    np.testing.assert_allclose(grads[0], input_gradient(net, x, 0), atol=1e-14)
    np.testing.assert_allclose(grads[1], input_gradient(net, x, 3), atol=1e-14)
    with pytest.raises(IndexError):
        net.input_gradients(x, [4])


def test_param_gradients_finite_difference():
    net = init_network(small_cnn(), 4, gain=1.0)
    r = np.random.default_rng(4)
    xs, ys = r.uniform(size=(3, 1, 8, 8)), np.array([0, 2, 3])
    _, grads, _ = net.loss_and_param_grads(xs, ys)
    for i in (0, 4):
        w = net.params[i][0]

        def loss(v, i=i):
            keep = net.params[i][0].copy()
            net.params[i][0][...] = v
            out = net.loss_and_param_grads(xs, ys)[0]
            net.params[i][0][...] = keep
            return out

        assert relative_errors(grads[i][0], central_difference(loss, w.copy())).max() < 1e-5


def test_model_round_trip(tmp_path):
    net = init_network(spec_by_name("cnn-small"), 9, provenance="trial")
    path = tmp_path / "m.nnet"
    save_model(net, path)
    back = load_model(path)
    assert back.spec == net.spec and back.provenance == "trial"
    x = np.full((1, 16, 16), 0.3)
    assert back.forward(x).tobytes() == net.forward(x).tobytes()
    assert path.read_bytes() == model_to_bytes(back)


def test_truncated_or_corrupt_model():
    buf = model_to_bytes(init_network(spec_by_name("mlp-small"), 0))
    with pytest.raises(FormatError):
        model_from_bytes(buf[:-10])
    with pytest.raises(FormatError):
        model_from_bytes(b"ABCD" + buf[4:])
    with pytest.raises(FormatError):
        model_from_bytes(buf + b"x")
