"""Synthesis of low-resolution images: blur, bicubic downscale, noise."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from qwsr.numerics import ImageGrid, as_grid, check_pixel_grid, conv2d_same

_LOGGER = logging.getLogger(__name__)

CATMULL_ROM_A = -0.5


def cubic_weight(distance: np.ndarray, a: float = CATMULL_ROM_A) -> np.ndarray:
    """Keys cubic convolution kernel."""
    t = np.abs(np.asarray(distance, dtype=np.float64))
    t2 = t * t
    t3 = t2 * t
    near = (a + 2.0) * t3 - (a + 3.0) * t2 + 1.0
    far = a * t3 - 5.0 * a * t2 + 8.0 * a * t - 4.0 * a
    return np.where(t < 1.0, near, np.where(t < 2.0, far, 0.0))


def _reflect(index: np.ndarray, size: int) -> np.ndarray:
    # half-sample symmetric: -1 -> 0, size -> size - 1
    period = 2 * size
    index = np.mod(index, period)
    return np.where(index >= size, period - 1 - index, index)


@lru_cache(maxsize=64)
def _resize_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Row-normalized interpolation matrix, widened on downscale."""
    scale = out_size / in_size
    stretch = min(scale, 1.0)
    support = 2.0 / stretch
    matrix = np.zeros((out_size, in_size))
    for row in range(out_size):
        center = (row + 0.5) / scale - 0.5
        taps = np.arange(int(np.floor(center - support)), int(np.ceil(center + support)) + 1)
        weights = stretch * cubic_weight(stretch * (center - taps))
        np.add.at(matrix[row], _reflect(taps, in_size), weights)
        matrix[row] /= matrix[row].sum()
    matrix.setflags(write=False)
    return matrix


def bicubic_resize(image: ImageGrid, out_h: int, out_w: int) -> ImageGrid:
    """
    Resize with Catmull-Rom cubic interpolation and symmetric edges.

    Pixel centers are aligned. On downscale the kernel is stretched by the
    scale ratio, so the result is low-passed as well as resampled.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"Output dims must be >= 1, got {out_h}×{out_w}")
    grid = as_grid(image)
    rows = _resize_matrix(grid.shape[0], out_h)
    cols = _resize_matrix(grid.shape[1], out_w)
    return np.einsum("ih,hwc,jw->ijc", rows, grid, cols)


def gaussian_kernel(sigma: float, size: int) -> np.ndarray:
    """Normalized isotropic Gaussian taps."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"Kernel size must be odd and positive, got {size}")
    if sigma <= 0:
        raise ValueError(f"Sigma must be > 0, got {sigma}")
    offsets = np.arange(size) - size // 2
    yy, xx = np.meshgrid(offsets, offsets, indexing="ij")
    kernel = np.exp(-(xx * xx + yy * yy) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


@dataclass(frozen=True, eq=False)
class DegradationSpec:
    """Blur kernel, noise level, integer scale factor and seed."""

    kernel: np.ndarray
    noise_sigma: float = 0.01
    scale_factor: int = 4
    rng_seed: int = 7

    def __post_init__(self) -> None:
        kernel = np.asarray(self.kernel, dtype=np.float64)
        if kernel.ndim != 2 or kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
            raise ValueError(f"Kernel must be 2D with odd sides, got {kernel.shape}")
        if abs(kernel.sum() - 1.0) > 1e-9:
            raise ValueError(f"Kernel taps must sum to 1, got {kernel.sum()}")
        if self.noise_sigma < 0:
            raise ValueError(f"Noise sigma must be >= 0, got {self.noise_sigma}")
        if self.scale_factor < 1:
            raise ValueError(f"Scale factor must be >= 1, got {self.scale_factor}")
        object.__setattr__(self, "kernel", kernel)

    @classmethod
    def gaussian(
        cls,
        blur_sigma: float,
        kernel_size: int,
        noise_sigma: float,
        scale_factor: int,
        rng_seed: int,
    ) -> DegradationSpec:
        """Spec with a Gaussian blur kernel."""
        return cls(gaussian_kernel(blur_sigma, kernel_size), noise_sigma, scale_factor, rng_seed)

    def rng(self, index: int = 0) -> np.random.Generator:
        """Noise generator of one image, derived from seed and image index."""
        return np.random.default_rng([self.rng_seed, index])


def _pad_to_multiple(grid: ImageGrid, factor: int) -> ImageGrid:
    pad_h = -grid.shape[0] % factor
    pad_w = -grid.shape[1] % factor
    if pad_h or pad_w:
        grid = np.pad(grid, ((0, pad_h), (0, pad_w), (0, 0)), mode="symmetric")
    return grid


def degrade(image: ImageGrid, spec: DegradationSpec, index: int = 0) -> ImageGrid:
    """
    Blur, downscale by the scale factor, add Gaussian noise, clamp.

    Deterministic for a given spec and image index.
    """
    grid = check_pixel_grid(image)
    grid = _pad_to_multiple(grid, spec.scale_factor)
    degraded = conv2d_same(grid, spec.kernel)
    if spec.scale_factor > 1:
        degraded = bicubic_resize(
            degraded,
            grid.shape[0] // spec.scale_factor,
            grid.shape[1] // spec.scale_factor,
        )
    if spec.noise_sigma > 0:
        degraded = degraded + spec.rng(index).normal(0.0, spec.noise_sigma, degraded.shape)
    return np.clip(degraded, 0.0, 1.0)


def degrade_batch(
    images: Sequence[ImageGrid], spec: DegradationSpec, indices: Sequence[int] | None = None
) -> list[ImageGrid]:
    """Degrade images, each with the noise stream of its image index (default 0, 1, ...)."""
    if indices is None:
        indices = range(len(images))
    if len(indices) != len(images):
        raise ValueError(f"{len(indices)} image indices for {len(images)} images")
    return [degrade(image, spec, index) for image, index in zip(images, indices)]
