"""Dense float64 tensor primitives with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C order.
Every forward primitive accepts either a single sample or a leading batch
axis; the backward helpers mirror that and return gradients for the input
and (where relevant) the parameters.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, NonFiniteError, ShapeError

Tensor = np.ndarray

TNSR_MAGIC = b"TNSR"
TNSR_VERSION = 1


def as_tensor(values, shape=None) -> Tensor:
    t = np.ascontiguousarray(values, dtype=np.float64)
    if shape is not None and t.shape != tuple(shape):
        raise ShapeError(f"expected shape {tuple(shape)}, got {t.shape}")
    return check_finite(t)


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.isfinite(t).all():
        raise NonFiniteError(f"{what} contains non-finite values")
    return t


def check_image(x: Tensor) -> Tensor:
    """Validate an image tensor: shape [C, H, W], every pixel in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"image must have shape [C, H, W], got {x.shape}")
    check_finite(x, "image")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("image pixels must lie in [0, 1]")
    return x


# --------------------------------------------------------------------------
# dense
# --------------------------------------------------------------------------

def dense_forward(weights: Tensor, bias: Tensor, x: Tensor) -> Tensor:
    if weights.ndim != 2 or bias.shape != (weights.shape[0],):
        raise ShapeError(f"bad dense parameters {weights.shape}, {bias.shape}")
    if x.shape[-1] != weights.shape[1]:
        raise ShapeError(f"dense expects {weights.shape[1]} inputs, got {x.shape[-1]}")
    return check_finite(x @ weights.T + bias, "dense output")


def dense_backward(weights: Tensor, x: Tensor, dout: Tensor, param_grads: bool = True):
    dx = dout @ weights
    if not param_grads:
        return dx, None, None
    dout2 = dout.reshape(-1, weights.shape[0])
    x2 = x.reshape(-1, weights.shape[1])
    return dx, dout2.T @ x2, dout2.sum(axis=0)


# --------------------------------------------------------------------------
# conv2d
# --------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if stride < 1 or padding < 0 or span < 0 or span % stride:
        raise ShapeError(
            f"non-integral conv output for size={size} kernel={kernel} "
            f"stride={stride} padding={padding}"
        )
    return span // stride + 1


def _batched(x: Tensor, rank: int):
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeError(f"expected rank {rank} or {rank + 1}, got shape {x.shape}")


def _pad_hw(x: Tensor, ph: int, pw: int) -> Tensor:
    if not (ph or pw):
        return x
    out = np.zeros(x.shape[:2] + (x.shape[2] + 2 * ph, x.shape[3] + 2 * pw))
    out[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]] = x
    return out


def _conv_windows(x: Tensor, kh: int, kw: int, stride: int, padding: int) -> Tensor:
    x = _pad_hw(x, padding, padding)
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # [B, C, H', W', kh, kw]


def conv2d_forward(kernels: Tensor, bias: Tensor, x: Tensor, stride: int = 1,
                   padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation.

    kernels: [outC, inC, kH, kW]; x: [inC, H, W] or [B, inC, H, W].
    """
    xb, single = _batched(x, 3)
    out_c, in_c, kh, kw = kernels.shape
    if xb.shape[1] != in_c or bias.shape != (out_c,):
        raise ShapeError(f"conv expects {in_c} input channels, got {xb.shape[1]}")
    conv_output_size(xb.shape[2], kh, stride, padding)
    conv_output_size(xb.shape[3], kw, stride, padding)
    win = _conv_windows(xb, kh, kw, stride, padding)
    out = np.tensordot(win, kernels, axes=([1, 4, 5], [1, 2, 3]))  # [B, H', W', O]
    out = out.transpose(0, 3, 1, 2) + bias[None, :, None, None]
    out = np.ascontiguousarray(out)
    check_finite(out, "conv output")
    return out[0] if single else out


def conv2d_backward(kernels: Tensor, x: Tensor, dout: Tensor, stride: int = 1,
                    padding: int = 0, param_grads: bool = True):
    """Gradients of a conv layer.

    ``x`` may be a single sample while ``dout`` carries a batch axis; the input
    gradient then has one row per ``dout`` row (several losses, one input).
    """
    xb, single = _batched(x, 3)
    db_out = dout[None] if dout.ndim == 3 else dout
    single = single and dout.ndim == 3
    _, in_c, kh, kw = kernels.shape
    h, w = xb.shape[2], xb.shape[3]

    if stride == 1 and padding <= min(kh, kw) - 1:
        # input gradient = full correlation of dout with the flipped, channel-swapped kernels
        flipped = kernels[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        dpad = _pad_hw(db_out, kh - 1 - padding, kw - 1 - padding)
        win = sliding_window_view(dpad, (kh, kw), axis=(2, 3))
        dx = np.tensordot(win, flipped, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    else:
        dx = _conv_input_grad_loop(kernels, db_out, (db_out.shape[0], in_c, h, w), stride,
                                   padding)
    dx = np.ascontiguousarray(dx[0] if single else dx)
    if not param_grads:
        return dx, None, None
    win = _conv_windows(xb, kh, kw, stride, padding)
    dk = np.tensordot(db_out, win, axes=([0, 2, 3], [0, 2, 3]))
    return dx, dk, db_out.sum(axis=(0, 2, 3))


def _conv_input_grad_loop(kernels, dout, in_shape, stride, padding):
    _, _, kh, kw = kernels.shape
    b, c, h, w = in_shape
    ho, wo = dout.shape[2], dout.shape[3]
    dxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(dout, kernels[:, :, i, j], axes=([1], [0]))
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                contrib.transpose(0, 3, 1, 2))
    return dxp[:, :, padding:padding + h, padding:padding + w]


# --------------------------------------------------------------------------
# elementwise and reshaping
# --------------------------------------------------------------------------

def relu(t: Tensor) -> Tensor:
    return np.maximum(t, 0.0)


def relu_backward(x: Tensor, dout: Tensor) -> Tensor:
    return np.where(x > 0.0, dout, 0.0)


def pool_output_size(size: int, window: int, stride: int) -> int:
    if window > size:
        raise ShapeError(f"pool window {window} larger than input {size}")
    if window < 1 or stride < 1:
        raise ShapeError("pool window and stride must be positive")
    return (size - window) // stride + 1


def maxpool2d(t: Tensor, window: int, stride: int) -> Tensor:
    xb, single = _batched(t, 3)
    pool_output_size(xb.shape[2], window, stride)
    pool_output_size(xb.shape[3], window, stride)
    win = sliding_window_view(xb, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.ascontiguousarray(win.max(axis=(4, 5)))
    return out[0] if single else out


def maxpool2d_backward(x: Tensor, dout: Tensor, window: int, stride: int) -> Tensor:
    """Route each output gradient to the first maximal element of its window.

    Like conv2d_backward, a single ``x`` may be paired with a batched ``dout``.
    """
    xb, single = _batched(x, 3)
    db_out = dout[None] if dout.ndim == 3 else dout
    single = single and dout.ndim == 3
    ho, wo = db_out.shape[2], db_out.shape[3]
    win = sliding_window_view(xb, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    arg = win.reshape(win.shape[:4] + (window * window,)).argmax(axis=-1)
    dx = np.zeros(db_out.shape[:2] + xb.shape[2:])
    for i in range(window):
        for j in range(window):
            routed = np.where(arg == i * window + j, db_out, 0.0)
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += routed
    return dx[0] if single else dx


def flatten(t: Tensor, batched: bool = False) -> Tensor:
    if batched:
        return t.reshape(t.shape[0], -1)
    return t.reshape(-1)


def sign(t: Tensor) -> Tensor:
    """Elementwise sign with sign(0) == 0."""
    return np.sign(t)


# --------------------------------------------------------------------------
# probabilities
# --------------------------------------------------------------------------

def softmax(logits: Tensor) -> Tensor:
    """Max-shifted softmax along the last axis."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] < 2:
        raise ShapeError("softmax needs at least two classes")
    check_finite(logits, "logits")
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def cross_entropy(probs: Tensor, cls: int) -> float:
    k = probs.shape[-1]
    if not 0 <= cls < k:
        raise IndexError(f"class {cls} outside [0, {k})")
    return float(-np.log(probs[cls]))


def clip_ball(candidate: Tensor, origin: Tensor, epsilon: float) -> Tensor:
    """Project onto the l-inf ball of radius epsilon around origin, within [0, 1]."""
    if candidate.shape != origin.shape:
        raise ShapeError(f"shape mismatch {candidate.shape} vs {origin.shape}")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    lo = np.maximum(origin - epsilon, 0.0)
    hi = np.minimum(origin + epsilon, 1.0)
    return np.minimum(np.maximum(candidate, lo), hi)


# --------------------------------------------------------------------------
# TNSR v1 files
# --------------------------------------------------------------------------

def tensor_to_bytes(t: Tensor) -> bytes:
    t = np.ascontiguousarray(t, dtype="<f8")
    header = TNSR_MAGIC + struct.pack("<II", TNSR_VERSION, t.ndim)
    header += struct.pack(f"<{t.ndim}I", *t.shape)
    return header + t.tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one TNSR record starting at ``offset``; return it and the next offset."""
    try:
        if buf[offset:offset + 4] != TNSR_MAGIC:
            raise FormatError("bad TNSR magic")
        version, rank = struct.unpack_from("<II", buf, offset + 4)
        if version != TNSR_VERSION:
            raise FormatError(f"unsupported TNSR version {version}")
        pos = offset + 12
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
    except struct.error as exc:
        raise FormatError(f"truncated TNSR header: {exc}") from None
    count = int(np.prod(dims, dtype=np.int64))
    end = pos + 8 * count
    if end > len(buf):
        raise FormatError("truncated TNSR payload")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=pos)
    return data.astype(np.float64).reshape(dims), end


def save_tensor(t: Tensor, path) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    buf = Path(path).read_bytes()
    t, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after TNSR payload")
    return t
