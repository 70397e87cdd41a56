"""Minibatch SGD on cross-entropy."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .errors import NonFiniteError, TrainingDiverged
from .network import Network

log = logging.getLogger(__name__)

DEFAULT_EPOCHS = 3
DEFAULT_LR = 0.05
DEFAULT_BATCH = 32


@dataclass
class TrainResult:
    network: Network
    train_accuracy: float
    final_loss: float


def accuracy(network: Network, data: LabeledDataset) -> float:
    xs, ys = data.arrays()
    return float((network.forward_batch(xs).argmax(axis=1) == ys).mean())


def train(network: Network, data: LabeledDataset, epochs: int = DEFAULT_EPOCHS,
          lr: float = DEFAULT_LR, batch: int = DEFAULT_BATCH, seed: int = 0,
          provenance: str | None = None) -> TrainResult:
    """Train a copy of ``network``; the input network is left untouched.

    Each epoch visits the samples in an order drawn from PCG64(seed), so the
    result is a deterministic function of the arguments.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    if epochs < 0 or batch < 1:
        raise ValueError("epochs must be >= 0 and batch >= 1")
    xs, ys = data.arrays()
    rng = np.random.Generator(np.random.PCG64(seed))
    params = [None if p is None else (p[0].copy(), p[1].copy()) for p in network.params]
    net = Network(network.spec, params, network.provenance)
    loss = float("nan")
    for epoch in range(epochs):
        order = rng.permutation(len(ys))
        total = 0.0
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            try:
                loss, grads, _ = net.loss_and_param_grads(xs[idx], ys[idx])
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from None
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            total += loss * len(idx)
            for p, g in zip(net.params, grads):
                if p is not None:
                    p[0][...] -= lr * g[0]
                    p[1][...] -= lr * g[1]
        loss = total / len(ys)
        log.debug("epoch %d loss %.6f", epoch, loss)
    if provenance is not None:
        net.provenance = provenance
    return TrainResult(net, accuracy(net, data), loss)
