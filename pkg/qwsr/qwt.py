"""Dual-tree quaternion wavelet transform."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from qwsr.numerics import Quaternion, quat_magnitude_map, quat_phase_map
from qwsr.wavelet import (
    FilterPair,
    SubbandSet,
    dual_tree_filters,
    dwt2d_multilevel,
    idwt2d_multilevel,
)

_LOGGER = logging.getLogger(__name__)

QWT_TREES = ("hh", "gh", "hg", "gg")
"""Tree order = quaternion component order (a, b, c, d).

First letter: filter along x (columns), second: filter along y (rows).
h is the primary bank, g its Hilbert pair.
"""

BANDS = ("phi_q", "psi_h", "psi_v", "psi_d")
PLANES_PER_LEVEL = len(BANDS) * 4


@dataclass
class QwtLevel:
    """Quaternion sub-bands of one level, each an (h, w, 4) component array."""

    phi_q: np.ndarray
    psi_h: np.ndarray
    psi_v: np.ndarray
    psi_d: np.ndarray
    source_shape: tuple[int, int]

    def band(self, name: str) -> np.ndarray:
        """Return a band by name."""
        if name not in BANDS:
            raise ValueError(f"Unknown band '{name}', expected one of {BANDS}")
        return getattr(self, name)


@dataclass
class QwtDecomposition:
    """Per-level quaternion sub-bands, finest level first."""

    levels: list[QwtLevel]
    source_shape: tuple[int, int]

    @property
    def level_count(self) -> int:
        """Number of levels."""
        return len(self.levels)

    def level(self, level: int) -> QwtLevel:
        """Return a 1-based level."""
        if not 1 <= level <= self.level_count:
            raise ValueError(f"Level {level} out of range 1..{self.level_count}")
        return self.levels[level - 1]

    def quaternion(self, level: int, band: str, row: int, col: int) -> Quaternion:
        """Single coefficient as Quaternion."""
        return Quaternion.from_array(self.level(level).band(band)[row, col])


def _tree_filters(tree: str, levels: int) -> list[tuple[FilterPair, FilterPair]]:
    along_x, along_y = tree
    per_level = []
    for level in range(1, levels + 1):
        primary, hilbert = dual_tree_filters(level)
        pick = {"h": primary, "g": hilbert}
        per_level.append((pick[along_y], pick[along_x]))
    return per_level


def _tree_pyramid(image: np.ndarray, tree: str, levels: int) -> list[SubbandSet]:
    return dwt2d_multilevel(image, _tree_filters(tree, levels), levels)


def qwt_forward(image: np.ndarray, levels: int = 1) -> QwtDecomposition:
    """Decompose a single-channel image into quaternion sub-bands."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        if image.shape[2] != 1:
            raise ValueError(
                f"Expected a single-channel image, got {image.shape[2]} channels"
            )
        image = image[:, :, 0]
    if image.ndim != 2:
        raise ValueError(f"Expected a 2D image, got shape {image.shape}")
    if levels < 1 or min(image.shape) < 2**levels:
        raise ValueError(f"Image of shape {image.shape} is too small for {levels} levels")

    pyramids = [_tree_pyramid(image, tree, levels) for tree in QWT_TREES]
    decomposed = []
    for index in range(levels):
        trees = [pyramid[index] for pyramid in pyramids]
        decomposed.append(
            QwtLevel(
                phi_q=np.stack([subbands.ll for subbands in trees], axis=-1),
                psi_h=np.stack([subbands.lh for subbands in trees], axis=-1),
                psi_v=np.stack([subbands.hl for subbands in trees], axis=-1),
                psi_d=np.stack([subbands.hh for subbands in trees], axis=-1),
                source_shape=trees[0].source_shape,
            )
        )
    return QwtDecomposition(decomposed, source_shape=image.shape)


def qwt_inverse(decomp: QwtDecomposition) -> np.ndarray:
    """Reconstruct the source image as the mean of the four tree inverses."""
    if not decomp.levels:
        raise ValueError("Decomposition has no levels")
    for level in decomp.levels:
        shapes = {level.band(name).shape for name in BANDS}
        if len(shapes) != 1 or next(iter(shapes))[-1] != 4:
            raise ValueError(f"Inconsistent quaternion sub-band shapes: {sorted(shapes)}")

    reconstructions = []
    for component, tree in enumerate(QWT_TREES):
        pyramid = [
            SubbandSet(
                ll=level.phi_q[..., component],
                lh=level.psi_h[..., component],
                hl=level.psi_v[..., component],
                hh=level.psi_d[..., component],
                level=number,
                source_shape=level.source_shape,
            )
            for number, level in enumerate(decomp.levels, start=1)
        ]
        reconstructions.append(
            idwt2d_multilevel(pyramid, _tree_filters(tree, decomp.level_count))
        )
    return np.mean(reconstructions, axis=0)


def qwt_planes(decomp: QwtDecomposition, level: int = 1) -> np.ndarray:
    """
    The 16 real planes of a level as an (h, w, 16) grid.

    Channel order: phi_q a..d, psi_h a..d, psi_v a..d, psi_d a..d.
    """
    selected = decomp.level(level)
    return np.concatenate([selected.band(name) for name in BANDS], axis=-1)


def qwt_magnitudes(decomp: QwtDecomposition, level: int = 1) -> np.ndarray:
    """Quaternion magnitude of every band, (h, w, 4) in band order."""
    selected = decomp.level(level)
    return np.stack([quat_magnitude_map(selected.band(name)) for name in BANDS], axis=-1)


def qwt_phases(decomp: QwtDecomposition, level: int = 1) -> np.ndarray:
    """Phase triple (phi, theta, psi) of every band, (h, w, 4, 3) in band order."""
    selected = decomp.level(level)
    return np.stack([quat_phase_map(selected.band(name)) for name in BANDS], axis=-2)


def detail_magnitude_energy(decomp: QwtDecomposition, level: int = 1) -> float:
    """Summed squared quaternion magnitude of the three directional bands."""
    magnitudes = qwt_magnitudes(decomp, level)[..., 1:]
    return float(np.sum(magnitudes * magnitudes))
