"""Datasets: the synthetic desk-scale generator, PGM/TNSR images, manifests."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import FormatError

log = logging.getLogger(__name__)


@dataclass
class LabeledDataset:
    images: list
    labels: list
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        for y in self.labels:
            if not 0 <= y < self.num_classes:
                raise ValueError(f"label {y} outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.images)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.stack(self.images), np.asarray(self.labels, dtype=np.int64)

    def subset(self, indices) -> "LabeledDataset":
        return LabeledDataset([self.images[i] for i in indices],
                              [self.labels[i] for i in indices], self.num_classes)


def split_dataset(data: LabeledDataset, test_fraction: float, seed: int):
    """Seeded shuffle then split into (train, held-out)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(data))
    n_test = int(round(len(data) * test_fraction))
    return data.subset(sorted(order[n_test:])), data.subset(sorted(order[:n_test]))


def class_prototype(cls: int, k: int, side: int) -> np.ndarray:
    """Noise-free template for one class: a Gaussian blob plus an oriented grating."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    c = (side - 1) / 2.0
    angle = 2.0 * np.pi * cls / k
    cy = c + 0.3 * side * np.sin(angle)
    cx = c + 0.3 * side * np.cos(angle)
    sigma = 0.13 * side
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    theta = np.pi * cls / k
    freq = (2 + cls % 3) / side
    grating = np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)))
    return 0.15 + 0.55 * blob + 0.15 * (1 + grating)


def builtin_synthetic_dataset(k: int = 10, per_class: int = 100, side: int = 16,
                              seed: int = 0, noise: float = 0.05) -> LabeledDataset:
    """Grayscale [1, side, side] images: class prototype, random contrast/offset, noise.

    Samples are interleaved by class (0, 1, ..., k-1, 0, 1, ...).
    """
    if k < 2:
        raise ValueError("need at least two classes")
    if per_class <= 0:
        raise ValueError("per_class must be positive (empty dataset)")
    rng = np.random.Generator(np.random.PCG64(seed))
    protos = [class_prototype(c, k, side) for c in range(k)]
    images, labels = [], []
    for _ in range(per_class):
        for c in range(k):
            contrast = rng.uniform(0.8, 1.2)
            offset = rng.uniform(-0.1, 0.1)
            img = (protos[c] - 0.5) * contrast + 0.5 + offset
            img = img + rng.normal(0.0, noise, size=img.shape)
            images.append(np.clip(img, 0.0, 1.0)[None])
            labels.append(c)
    return LabeledDataset(images, labels, k)


# --------------------------------------------------------------------------
# PGM (P5, 8-bit)
# --------------------------------------------------------------------------

def _pgm_tokens(buf: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise FormatError("truncated PGM header")
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte before the raster


def decode_pgm(buf: bytes) -> np.ndarray:
    tokens, pos = _pgm_tokens(buf, 4)
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("non-numeric PGM header field") from None
    if width <= 0 or height <= 0 or not 0 < maxval < 256:
        raise FormatError("unsupported PGM dimensions or maxval")
    raster = buf[pos:pos + width * height]
    if len(raster) != width * height:
        raise FormatError("truncated PGM raster")
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    return (pixels.astype(np.float64) / maxval)[None]


def encode_pgm(image: np.ndarray) -> bytes:
    """8-bit quantization of a [1, H, W] image in [0, 1]."""
    image = np.asarray(image)
    if image.ndim == 3:
        if image.shape[0] != 1:
            raise ValueError("PGM holds a single channel")
        image = image[0]
    q = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = q.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def load_image(path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] == T.TNSR_MAGIC:
        return T.check_image(T.load_tensor(path))
    return decode_pgm(buf)


# --------------------------------------------------------------------------
# manifests: "<path> <label>" per line, paths relative to the manifest
# --------------------------------------------------------------------------

def load_dataset(manifest_path, num_classes: int | None = None) -> LabeledDataset:
    """Read a manifest.  A ``# classes=<k>`` line fixes k; else ``num_classes`` or max label + 1."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    images, labels = [], []
    k = num_classes
    for lineno, raw in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("classes=") and k is None:
                k = int(body.split("=", 1)[1])
            continue
        try:
            rel, label = line.rsplit(None, 1)
            label = int(label)
        except ValueError:
            raise FormatError(f"{manifest_path}:{lineno}: expected '<path> <label>'") from None
        p = Path(rel)
        images.append(load_image(p if p.is_absolute() else root / p))
        labels.append(label)
    if not images:
        raise ValueError(f"{manifest_path}: empty dataset")
    if k is None:
        k = max(labels) + 1
    return LabeledDataset(images, labels, k)


def write_dataset(data: LabeledDataset, out_dir, fmt: str = "pgm") -> Path:
    """Write one image file per sample plus ``manifest.txt``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# classes={data.num_classes}"]
    width = len(str(max(len(data) - 1, 0)))
    for i, (img, y) in enumerate(zip(data.images, data.labels)):
        name = f"img_{i:0{width}d}.{fmt}"
        if fmt == "pgm":
            (out_dir / name).write_bytes(encode_pgm(img))
        elif fmt == "tnsr":
            T.save_tensor(img, out_dir / name)
        else:
            raise ValueError(f"unknown image format {fmt!r}")
        lines.append(f"{name} {y}")
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    log.info("wrote %d images to %s", len(data), out_dir)
    return manifest
