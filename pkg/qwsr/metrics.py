"""PSNR and SSIM on the Y channel of YCbCr."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from qwsr.degradation import gaussian_kernel
from qwsr.numerics import ImageGrid, as_grid, check_pixel_grid

# ITU-R BT.601, full range
_YCBCR = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
_YCBCR_OFFSET = np.array([0.0, 0.5, 0.5])

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DYNAMIC_RANGE = 1.0


def rgb_to_ycbcr(image: ImageGrid) -> ImageGrid:
    """Convert an RGB grid in [0, 1] to YCbCr."""
    grid = check_pixel_grid(image)
    if grid.shape[2] != 3:
        raise ValueError(f"Expected 3 channels, got {grid.shape[2]}")
    return grid @ _YCBCR.T + _YCBCR_OFFSET


def luma(image: ImageGrid) -> np.ndarray:
    """Y plane of an RGB grid in [0, 1]; single-channel grids are taken as Y already."""
    grid = check_pixel_grid(image)
    if grid.shape[2] == 1:
        return grid[:, :, 0]
    return rgb_to_ycbcr(grid)[:, :, 0]


def _luma_pair(a: ImageGrid, b: ImageGrid) -> tuple[np.ndarray, np.ndarray]:
    a, b = as_grid(a), as_grid(b)
    if a.shape != b.shape:
        raise ValueError(f"Image dims differ: {a.shape} != {b.shape}")
    return luma(a), luma(b)


def psnr_y(a: ImageGrid, b: ImageGrid) -> float:
    """PSNR in dB of the Y channels; math.inf for identical inputs."""
    y_a, y_b = _luma_pair(a, b)
    mse = float(np.mean((y_a - y_b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(DYNAMIC_RANGE**2 / mse)


def ssim_y(a: ImageGrid, b: ImageGrid) -> float:
    """Mean SSIM of the Y channels over all valid 11×11 Gaussian windows."""
    y_a, y_b = _luma_pair(a, b)
    if min(y_a.shape) < SSIM_WINDOW:
        raise ValueError(
            f"SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {y_a.shape}"
        )
    window = gaussian_kernel(SSIM_SIGMA, SSIM_WINDOW)
    c1 = (SSIM_K1 * DYNAMIC_RANGE) ** 2
    c2 = (SSIM_K2 * DYNAMIC_RANGE) ** 2

    def filtered(x: np.ndarray) -> np.ndarray:
        return convolve2d(x, window, mode="valid")

    mu_a = filtered(y_a)
    mu_b = filtered(y_b)
    var_a = filtered(y_a * y_a) - mu_a * mu_a
    var_b = filtered(y_b * y_b) - mu_b * mu_b
    covariance = filtered(y_a * y_b) - mu_a * mu_b
    ssim_map = ((2.0 * mu_a * mu_b + c1) * (2.0 * covariance + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return float(np.mean(ssim_map))


@dataclass
class MetricRow:
    """Metrics of one image."""

    filename: str
    psnr_y: float
    ssim_y: float


@dataclass
class MetricReport:
    """Per-image rows and corpus means."""

    rows: list[MetricRow] = field(default_factory=list)

    def add(self, filename: str, restored: ImageGrid, reference: ImageGrid) -> MetricRow:
        """Measure restored against reference and append the row."""
        row = evaluate_pair(filename, restored, reference)
        self.rows.append(row)
        return row

    @property
    def psnr_db(self) -> float:
        """Mean PSNR over rows."""
        return float(np.mean([row.psnr_y for row in self.rows])) if self.rows else math.nan

    @property
    def ssim(self) -> float:
        """Mean SSIM over rows."""
        return float(np.mean([row.ssim_y for row in self.rows])) if self.rows else math.nan


def evaluate_pair(filename: str, restored: ImageGrid, reference: ImageGrid) -> MetricRow:
    """PSNR_Y and SSIM_Y of one pair."""
    return MetricRow(filename, psnr_y(restored, reference), ssim_y(restored, reference))
