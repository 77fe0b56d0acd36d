"""Edge-map extraction and assembly of the 4-channel (RGB + structure) generator input."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import StainPatch


@dataclass
class CannyParams:
    """Hysteresis thresholds are fractions of the max gradient magnitude."""

    sigma: float = 1.4
    low: float = 0.1
    high: float = 0.2

    def __post_init__(self) -> None:
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if not (0 < self.low < self.high <= 1):
            raise ValueError(f"need 0 < low < high <= 1, got low={self.low} high={self.high}")


@dataclass
class EdgeMap:
    values: np.ndarray  # H x W in [0, 1]; Canny output is binary {0, 1}

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"edge map must be 2-D, got shape {v.shape}")
        if v.min() < 0 or v.max() > 1:
            raise ValueError("edge map values must lie in [0, 1]")
        self.values = v


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """Luma conversion: 0.299 R + 0.587 G + 0.114 B."""
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114


def _gaussian_kernel1d(sigma: float) -> np.ndarray:
    half = math.ceil(3 * sigma)
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return k / k.sum()


_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = _SOBEL_X.T


def canny_edges(rgb: np.ndarray, params: CannyParams = CannyParams()) -> EdgeMap:
    """Classic Canny: Gaussian smoothing, Sobel gradients, 4-bin non-maximum
    suppression, and double-threshold hysteresis with 8-connected promotion.

    Borders are reflected for both smoothing and gradients, and thresholds are
    relative to the max gradient magnitude, so output is invariant to adding a
    constant brightness offset.
    """
    gray = to_grayscale(rgb)
    k = _gaussian_kernel1d(params.sigma)
    smooth = ndimage.correlate1d(gray, k, axis=0, mode="reflect")
    smooth = ndimage.correlate1d(smooth, k, axis=1, mode="reflect")

    gx = ndimage.convolve(smooth, _SOBEL_X, mode="reflect")
    gy = ndimage.convolve(smooth, _SOBEL_Y, mode="reflect")
    mag = np.hypot(gx, gy)
    max_mag = mag.max()
    if max_mag < 1e-12:  # flat image up to float round-off
        return EdgeMap(np.zeros_like(gray))
    # normalized magnitude rounded to 9 decimals: thresholds are relative
    # anyway, and rounding keeps NMS tie-breaks stable under the float noise a
    # constant brightness offset introduces
    mag = np.round(mag / max_mag, 9)

    # Quantize gradient direction to 4 bins: 0, 45, 90, 135 degrees.
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    bins = np.zeros(mag.shape, dtype=np.int8)
    bins[(angle >= 22.5) & (angle < 67.5)] = 1
    bins[(angle >= 67.5) & (angle < 112.5)] = 2
    bins[(angle >= 112.5) & (angle < 157.5)] = 3

    # Non-maximum suppression against the two neighbors along the gradient.
    padded = np.pad(mag, 1, mode="constant")
    offsets = {
        0: ((0, 1), (0, -1)),    # horizontal gradient -> compare left/right
        1: ((1, 1), (-1, -1)),   # diagonal
        2: ((1, 0), (-1, 0)),    # vertical gradient -> compare up/down
        3: ((1, -1), (-1, 1)),   # anti-diagonal
    }
    nms = np.zeros(mag.shape, dtype=bool)
    for b, ((r1, c1), (r2, c2)) in offsets.items():
        sel = bins == b
        n1 = padded[1 + r1:1 + r1 + mag.shape[0], 1 + c1:1 + c1 + mag.shape[1]]
        n2 = padded[1 + r2:1 + r2 + mag.shape[0], 1 + c2:1 + c2 + mag.shape[1]]
        nms |= sel & (mag >= n1) & (mag >= n2)

    strong = nms & (mag >= params.high)
    weak = nms & (mag >= params.low)

    labels, _ = ndimage.label(weak, structure=np.ones((3, 3)))
    keep = np.unique(labels[strong])
    keep = keep[keep != 0]
    edges = np.isin(labels, keep) & weak
    return EdgeMap(edges.astype(np.float64))


def concat_structure(patch: StainPatch, edges: EdgeMap) -> np.ndarray:
    """Build the HxWx4 generator input: RGB rescaled to [-1,1] in channels 0-2,
    edge values unchanged in channel 3."""
    if patch.pixels.shape[:2] != edges.values.shape:
        raise ValueError(
            f"shape mismatch: patch {patch.pixels.shape[:2]} vs edges {edges.values.shape}")
    out = np.empty(patch.pixels.shape[:2] + (4,), dtype=np.float64)
    out[..., :3] = patch.pixels * 2.0 - 1.0
    out[..., 3] = edges.values
    return out
