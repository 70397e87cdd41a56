import numpy as np
import pytest

from ownverify.data import LabeledDataset
from ownverify.desk import desk_model, desk_split
from ownverify.errors import TrainingDiverged
from ownverify.network import init_network, spec_by_name
from ownverify.train import accuracy, train


def toy_dataset(n=60, seed=0):
    # left half bright -> class 0, right half bright -> class 1
    r = np.random.default_rng(seed)
    images, labels = [], []
    for i in range(n):
        img = r.uniform(0, 0.2, size=(1, 16, 16))
        cls = i % 2
        img[0, :, cls * 8:(cls + 1) * 8] += 0.7
        images.append(img)
        labels.append(cls)
    return LabeledDataset(images, labels, 2)


def test_zero_learning_rate_leaves_weights_alone():
    data = toy_dataset()
    net = init_network(spec_by_name("mlp-small", k=2), 0)
    out = train(net, data, epochs=2, lr=0.0).network
    for a, b in zip(net.params, out.params):
        if a is not None:
            assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_input_network_not_mutated():
    data = toy_dataset()
    net = init_network(spec_by_name("mlp-small", k=2), 0)
    before = net.params[1][0].copy()
    train(net, data, epochs=1)
    assert np.array_equal(before, net.params[1][0])


def test_separable_toy_is_learned():
    res = train(init_network(spec_by_name("cnn-small", k=2), 1), toy_dataset(), epochs=5)
    assert res.train_accuracy >= 0.95
    assert accuracy(res.network, toy_dataset(seed=9)) >= 0.95


def test_training_is_deterministic():
    data = toy_dataset()
    net = init_network(spec_by_name("mlp-small", k=2), 2)
    a = train(net, data, epochs=2, seed=3).network
    b = train(net, data, epochs=2, seed=3).network
    assert all(np.array_equal(x[0], y[0]) for x, y in zip(a.params, b.params) if x is not None)


def test_divergence_is_reported():
    with pytest.raises(TrainingDiverged), np.errstate(all="ignore"):
        train(init_network(spec_by_name("mlp-small", k=2), 0), toy_dataset(), epochs=3, lr=1e200)


def test_empty_dataset():
    with pytest.raises(ValueError):
        train(init_network(spec_by_name("mlp-small"), 0), LabeledDataset([], [], 10))


@pytest.mark.parametrize("arch", ["cnn-small", "mlp-small"])
def test_desk_models_generalise(arch):
    _, held_out = desk_split()
    assert accuracy(desk_model(arch, 1), held_out) >= 0.9
