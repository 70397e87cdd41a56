"""The reference desk setup: one synthetic dataset and small trained models.

Shared by the test suite and the README walkthrough so every run trains
exactly the same networks.
"""
from __future__ import annotations

from functools import lru_cache

from .data import LabeledDataset, builtin_synthetic_dataset, split_dataset
from .network import Network, init_network, spec_by_name
from .train import train

DATA_K = 10
DATA_PER_CLASS = 100
DATA_SIDE = 16
DATA_SEED = 0
DATA_NOISE = 0.05
TEST_FRACTION = 0.2


@lru_cache(maxsize=None)
def desk_split() -> tuple[LabeledDataset, LabeledDataset]:
    """(train, held-out) halves of the reference dataset."""
    data = builtin_synthetic_dataset(DATA_K, DATA_PER_CLASS, DATA_SIDE, DATA_SEED, DATA_NOISE)
    return split_dataset(data, TEST_FRACTION, DATA_SEED)


@lru_cache(maxsize=None)
def desk_model(arch: str, seed: int) -> Network:
    """``arch`` initialised and trained from ``seed`` on the reference train half."""
    train_set, _ = desk_split()
    net = init_network(spec_by_name(arch), seed)
    return train(net, train_set, seed=seed, provenance=f"{arch} seed={seed}").network
