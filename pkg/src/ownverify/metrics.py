"""Distances used by verification: relative probability error and SSIM."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError


def prob_distance(p_target: float, p_observed: float) -> float:
    """Relative error |p_target - p_observed| / p_target."""
    if not p_target > 0:
        raise ValueError("p_target must be positive")
    if not (0 <= p_target <= 1 and 0 <= p_observed <= 1):
        raise ValueError("probabilities must lie in [0, 1]")
    return abs(p_target - p_observed) / p_target


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if not (self.sigma > 0 and self.k1 > 0 and self.k2 > 0 and self.dynamic_range > 0):
            raise ValueError("sigma, k1, k2 and dynamic_range must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian weights (sum to 1)."""
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a: np.ndarray, b: np.ndarray, params: SsimParams = SsimParams()) -> np.ndarray:
    """Local SSIM over every fully-contained window of a 2-D image pair."""
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"ssim_map needs equal 2-D images, got {a.shape}, {b.shape}")
    if min(a.shape) < params.window:
        raise ShapeError(f"image {a.shape} smaller than the {params.window}px window")
    w = gaussian_window(params.window, params.sigma)

    def filt(img):
        return np.tensordot(sliding_window_view(img, w.shape), w, axes=([2, 3], [0, 1]))

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    c1, c2 = params.c1, params.c2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)
            / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)))


def ssim(a: np.ndarray, b: np.ndarray, params: SsimParams = SsimParams()) -> float:
    """Mean SSIM.  Accepts [H, W] or [C, H, W]; channels are averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        return float(ssim_map(a, b, params).mean())
    if a.ndim != 3:
        raise ShapeError(f"expected [H, W] or [C, H, W], got {a.shape}")
    return float(np.mean([ssim_map(a[i], b[i], params).mean() for i in range(a.shape[0])]))
