"""Layer-structured classifiers: spec, initialization, forward/backward, NNET files."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import tensor as T
from .errors import FormatError, ShapeError

NNET_MAGIC = b"NNET"
NNET_VERSION = 1


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kh: int
    kw: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    window: int
    stride: int


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Union[Dense, Conv2d, ReLU, MaxPool, Flatten]
_LAYER_TYPES = {"dense": Dense, "conv2d": Conv2d, "relu": ReLU, "maxpool": MaxPool,
                "flatten": Flatten}
_LAYER_NAMES = {cls: name for name, cls in _LAYER_TYPES.items()}


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        self.shapes()

    def shapes(self) -> list[tuple]:
        """Activation shape after each layer; raises ShapeError if they don't chain."""
        if self.num_classes < 2:
            raise ShapeError("a classifier needs at least two classes")
        shape = self.input_shape
        if not shape or any(d <= 0 for d in shape):
            raise ShapeError(f"bad input shape {shape}")
        out = []
        for layer in self.layers:
            if isinstance(layer, Dense):
                if shape != (layer.in_features,):
                    raise ShapeError(f"dense expects ({layer.in_features},), got {shape}")
                shape = (layer.out_features,)
            elif isinstance(layer, Conv2d):
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise ShapeError(f"conv expects {layer.in_channels} channels, got {shape}")
                shape = (layer.out_channels,
                         T.conv_output_size(shape[1], layer.kh, layer.stride, layer.padding),
                         T.conv_output_size(shape[2], layer.kw, layer.stride, layer.padding))
            elif isinstance(layer, MaxPool):
                if len(shape) != 3:
                    raise ShapeError(f"maxpool expects [C, H, W], got {shape}")
                shape = (shape[0],
                         T.pool_output_size(shape[1], layer.window, layer.stride),
                         T.pool_output_size(shape[2], layer.window, layer.stride))
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif not isinstance(layer, ReLU):
                raise ShapeError(f"unknown layer {layer!r}")
            out.append(shape)
        if shape != (self.num_classes,):
            raise ShapeError(f"network emits {shape}, expected ({self.num_classes},)")
        return out

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [{"type": _LAYER_NAMES[type(l)], **asdict(l)} for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        try:
            layers = []
            for entry in d["layers"]:
                entry = dict(entry)
                layers.append(_LAYER_TYPES[entry.pop("type")](**entry))
            return cls(layers, tuple(d["input_shape"]), int(d["num_classes"]))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed network spec: {exc}") from None


def cnn_small(side: int = 16, channels: int = 1, k: int = 10, width: int = 8) -> NetworkSpec:
    """conv-relu-pool-conv-relu-pool-flatten-dense."""
    final = side // 4
    return NetworkSpec(
        [Conv2d(channels, width, 3, 3, 1, 1), ReLU(), MaxPool(2, 2),
         Conv2d(width, 2 * width, 3, 3, 1, 1), ReLU(), MaxPool(2, 2),
         Flatten(), Dense(2 * width * final * final, k)],
        (channels, side, side), k)


def mlp_small(side: int = 16, channels: int = 1, k: int = 10, hidden: int = 64) -> NetworkSpec:
    """flatten-dense-relu-dense."""
    n = channels * side * side
    return NetworkSpec([Flatten(), Dense(n, hidden), ReLU(), Dense(hidden, k)],
                       (channels, side, side), k)


ARCHITECTURES = {"cnn-small": cnn_small, "mlp-small": mlp_small}


def spec_by_name(name: str, **kwargs) -> NetworkSpec:
    try:
        return ARCHITECTURES[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown architecture {name!r}; "
                         f"choose from {sorted(ARCHITECTURES)}") from None


# Weights are drawn from U(-b, b) with b = INIT_GAIN * sqrt(6 / fan_in).  The
# gain above the usual He value makes the 256-pixel desk models about as
# sensitive to a small l-inf perturbation as a large-image network is.
INIT_GAIN = 2.5


def fan_in_bound(fan_in: int, gain: float = INIT_GAIN) -> float:
    """Half-width of the uniform init distribution."""
    return float(gain * np.sqrt(6.0 / fan_in))


@dataclass
class Network:
    """A classifier: spec plus one (weights, bias) pair per parameterized layer.

    ``params[i]`` is ``None`` for parameter-free layers.  Instances are treated
    as immutable once built; training returns a new Network.
    """

    spec: NetworkSpec
    params: list
    provenance: str = ""
    _shapes: list = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self._shapes = self.spec.shapes()
        if len(self.params) != len(self.spec.layers):
            raise ShapeError("one params entry per layer required")
        for layer, p in zip(self.spec.layers, self.params):
            expected = _param_shapes(layer)
            if expected is None:
                if p is not None:
                    raise ShapeError(f"{layer} takes no parameters")
                continue
            if p is None or tuple(p[0].shape) != expected[0] or tuple(p[1].shape) != expected[1]:
                raise ShapeError(f"parameter shapes for {layer} must be {expected}")

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def input_shape(self) -> tuple:
        return self.spec.input_shape

    # forward ---------------------------------------------------------------

    def _run(self, x: T.Tensor, batched: bool):
        """Forward pass; returns logits and the per-layer inputs for backward."""
        cache = []
        h = x
        for layer, p in zip(self.spec.layers, self.params):
            cache.append(h)
            if isinstance(layer, Dense):
                h = T.dense_forward(p[0], p[1], h)
            elif isinstance(layer, Conv2d):
                h = T.conv2d_forward(p[0], p[1], h, layer.stride, layer.padding)
            elif isinstance(layer, ReLU):
                h = T.relu(h)
            elif isinstance(layer, MaxPool):
                h = T.maxpool2d(h, layer.window, layer.stride)
            else:
                h = T.flatten(h, batched)
        return h, cache

    def _check_input(self, x, batched: bool) -> T.Tensor:
        x = np.asarray(x, dtype=np.float64)
        want = self.spec.input_shape
        if (x.shape[1:] if batched else x.shape) != want:
            raise ShapeError(f"network expects input {want}, got {x.shape}")
        return T.check_finite(x, "input")

    def logits(self, x: T.Tensor) -> T.Tensor:
        return self._run(self._check_input(x, False), False)[0]

    def forward(self, x: T.Tensor) -> T.Tensor:
        """Class probability vector for one image."""
        return T.softmax(self.logits(x))

    classify = forward

    def forward_batch(self, xs: T.Tensor) -> T.Tensor:
        return T.softmax(self._run(self._check_input(xs, True), True)[0])

    def predict(self, x: T.Tensor) -> int:
        return int(np.argmax(self.logits(x)))

    # backward --------------------------------------------------------------

    def _backward(self, cache, dlogits, batched: bool, param_grads: bool):
        grads = [None] * len(self.spec.layers)
        d = dlogits
        for idx in range(len(self.spec.layers) - 1, -1, -1):
            layer, p, h = self.spec.layers[idx], self.params[idx], cache[idx]
            if isinstance(layer, Dense):
                d, dw, db = T.dense_backward(p[0], h, d, param_grads)
                grads[idx] = (dw, db)
            elif isinstance(layer, Conv2d):
                d, dw, db = T.conv2d_backward(p[0], h, d, layer.stride, layer.padding,
                                              param_grads)
                grads[idx] = (dw, db)
            elif isinstance(layer, ReLU):
                d = T.relu_backward(h, d)
            elif isinstance(layer, MaxPool):
                d = T.maxpool2d_backward(h, d, layer.window, layer.stride)
            else:
                d = d.reshape(d.shape[:d.ndim - 1] + h.shape[1 if batched else 0:])
        return d, grads

    def input_gradients(self, x: T.Tensor, classes) -> tuple[T.Tensor, list[T.Tensor]]:
        """One forward pass, then d(cross-entropy)/dx for each class in ``classes``.

        Returns the probability vector at ``x`` and the list of gradients.
        """
        x = self._check_input(x, False)
        logits, cache = self._run(x, False)
        probs = T.softmax(logits)
        classes = list(classes)
        for cls in classes:
            if not 0 <= cls < self.num_classes:
                raise IndexError(f"class {cls} outside [0, {self.num_classes})")
        # the backward pass runs once with one dlogits row per class
        dlogits = np.tile(probs, (len(classes), 1))
        dlogits[np.arange(len(classes)), classes] -= 1.0
        g, _ = self._backward(cache, dlogits, False, False)
        T.check_finite(g, "input gradient")
        return probs, list(g)

    def loss_and_param_grads(self, xs: T.Tensor, labels: np.ndarray):
        """Mean cross-entropy over a batch, its parameter gradients, and the batch probs."""
        xs = self._check_input(xs, True)
        logits, cache = self._run(xs, True)
        probs = T.softmax(logits)
        n = len(labels)
        rows = np.arange(n)
        loss = float(-np.log(probs[rows, labels]).mean())
        dlogits = probs.copy()
        dlogits[rows, labels] -= 1.0
        dlogits /= n
        _, grads = self._backward(cache, dlogits, True, True)
        return loss, grads, probs


def input_gradient(network: Network, x: T.Tensor, cls: int) -> T.Tensor:
    """Gradient of cross_entropy(softmax(network(x)), cls) with respect to x."""
    return network.input_gradients(x, [cls])[1][0]


def _param_shapes(layer):
    if isinstance(layer, Dense):
        return (layer.out_features, layer.in_features), (layer.out_features,)
    if isinstance(layer, Conv2d):
        return (layer.out_channels, layer.in_channels, layer.kh, layer.kw), (layer.out_channels,)
    return None


def init_network(spec: NetworkSpec, seed: int, provenance: str | None = None,
                 gain: float = INIT_GAIN) -> Network:
    """Uniform(-b, b) weights with b = gain * sqrt(6 / fan_in), zero biases.

    The generator is numpy's PCG64 seeded with ``seed``; layers are drawn in order.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    params = []
    for layer in spec.layers:
        shapes = _param_shapes(layer)
        if shapes is None:
            params.append(None)
            continue
        wshape, bshape = shapes
        fan_in = int(np.prod(wshape[1:]))
        bound = fan_in_bound(fan_in, gain)
        params.append((rng.uniform(-bound, bound, size=wshape), np.zeros(bshape)))
    return Network(spec, params, provenance if provenance is not None else f"seed={seed}")


# --------------------------------------------------------------------------
# NNET v1 files
# --------------------------------------------------------------------------
#   "NNET" | u32 version | u32 header length | UTF-8 JSON header | TNSR records
# The JSON header holds the spec and provenance; parameter tensors follow in
# layer order, weights then bias.

def model_to_bytes(network: Network) -> bytes:
    header = json.dumps({"spec": network.spec.to_dict(), "provenance": network.provenance},
                        sort_keys=True).encode("utf-8")
    parts = [NNET_MAGIC, struct.pack("<II", NNET_VERSION, len(header)), header]
    for p in network.params:
        if p is not None:
            parts.append(T.tensor_to_bytes(p[0]))
            parts.append(T.tensor_to_bytes(p[1]))
    return b"".join(parts)


def model_from_bytes(buf: bytes) -> Network:
    if buf[:4] != NNET_MAGIC:
        raise FormatError("bad NNET magic")
    try:
        version, hlen = struct.unpack_from("<II", buf, 4)
    except struct.error:
        raise FormatError("truncated NNET header") from None
    if version != NNET_VERSION:
        raise FormatError(f"unsupported NNET version {version}")
    try:
        header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt NNET header: {exc}") from None
    spec = NetworkSpec.from_dict(header["spec"])
    pos = 12 + hlen
    params = []
    for layer in spec.layers:
        if _param_shapes(layer) is None:
            params.append(None)
            continue
        w, pos = T.tensor_from_bytes(buf, pos)
        b, pos = T.tensor_from_bytes(buf, pos)
        params.append((w, b))
    if pos != len(buf):
        raise FormatError("trailing bytes after NNET parameters")
    return Network(spec, params, header.get("provenance", ""))


def save_model(network: Network, path) -> None:
    Path(path).write_bytes(model_to_bytes(network))


def load_model(path) -> Network:
    return model_from_bytes(Path(path).read_bytes())
