"""Real 1D/2D discrete wavelet transforms and the dual-tree filter banks."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence, Union

import numpy as np
import pywt

_LOGGER = logging.getLogger(__name__)

# Filter banks run circularly: exact perfect reconstruction and energy
# preservation at critical sampling for every orthonormal pair.
_MODE = "periodization"


class FilterName(Enum):
    """Shipped filter families."""

    HAAR = "haar"
    DAUB4 = "daub4"
    FARRAS_FIRST_STAGE = "farras"
    QSHIFT10 = "qshift10"


def _farras_lowpass() -> np.ndarray:
    # closed form of the 10-tap nearly symmetric first-stage pair
    a = 1.0 / (8.0 * math.sqrt(2.0))
    root = math.sqrt(15.0 / 32.0)
    b = (1.0 / math.sqrt(2.0) + root) / 2.0
    c = (1.0 / math.sqrt(2.0) - root) / 2.0
    return np.array([0.0, -a, a, b, b, a, -a, c, c, 0.0])


_QSHIFT10_TABULATED = np.array(
    [
        0.0511304052838317,
        -0.0139753702468888,
        -0.109836051665971,
        0.263839561058938,
        0.766628467793037,
        0.563655710127052,
        0.000873622695217097,
        -0.100231219507476,
        -0.00168968127252815,
        -0.00618188189211644,
    ]
)


def _orthonormality_residual(taps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    length = len(taps)
    rows = []
    residual = []
    for shift in range(0, length, 2):
        residual.append(
            float(np.dot(taps[: length - shift], taps[shift:])) - (1.0 if shift == 0 else 0.0)
        )
        row = np.zeros(length)
        row[: length - shift] += taps[shift:]
        row[shift:] += taps[: length - shift]
        rows.append(row)
    residual.append(float(taps.sum()) - math.sqrt(2.0))
    rows.append(np.ones(length))
    return np.array(residual), np.array(rows)


def _orthonormalize(taps: np.ndarray, iterations: int = 6) -> np.ndarray:
    """Refine tabulated taps onto the orthonormal, sum-sqrt(2) constraint set."""
    taps = taps.astype(np.float64).copy()
    for _ in range(iterations):
        residual, jacobian = _orthonormality_residual(taps)
        correction, *_ = np.linalg.lstsq(jacobian, residual, rcond=None)
        taps -= correction
    residual, _ = _orthonormality_residual(taps)
    _LOGGER.debug("Filter refinement residual: %g", np.abs(residual).max())
    return taps


@dataclass(frozen=True, eq=False)
class FilterPair:
    """Analysis lowpass/highpass taps with their synthesis counterparts."""

    name: FilterName
    lowpass: np.ndarray
    highpass: np.ndarray
    synthesis_lowpass: np.ndarray
    synthesis_highpass: np.ndarray
    tree: int = 0
    _wavelet: pywt.Wavelet = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        wavelet = pywt.Wavelet(
            f"{self.name.value}-{self.tree}",
            filter_bank=[
                list(self.lowpass),
                list(self.highpass),
                list(self.synthesis_lowpass),
                list(self.synthesis_highpass),
            ],
        )
        object.__setattr__(self, "_wavelet", wavelet)

    @classmethod
    def from_lowpass(cls, name: FilterName, lowpass: np.ndarray, tree: int = 0) -> FilterPair:
        """Build an orthonormal pair from its analysis lowpass (quadrature mirror)."""
        lowpass = np.asarray(lowpass, dtype=np.float64)
        signs = np.array([(-1.0) ** (n + 1) for n in range(len(lowpass))])
        highpass = signs * lowpass[::-1]
        return cls(name, lowpass, highpass, lowpass[::-1].copy(), highpass[::-1].copy(), tree)

    @property
    def wavelet(self) -> pywt.Wavelet:
        """PyWavelets filter bank."""
        return self._wavelet

    @property
    def is_orthonormal(self) -> bool:
        """Return True when the lowpass has unit energy and is orthogonal to its even shifts."""
        residual, _ = _orthonormality_residual(self.lowpass)
        return bool(np.all(np.abs(residual[:-1]) < 1e-10))


def _build_filters() -> dict[tuple[FilterName, int], FilterPair]:
    farras = _farras_lowpass()
    qshift = _orthonormalize(_QSHIFT10_TABULATED)
    return {
        (FilterName.HAAR, 0): FilterPair.from_lowpass(
            FilterName.HAAR, np.array(pywt.Wavelet("haar").dec_lo)
        ),
        (FilterName.DAUB4, 0): FilterPair.from_lowpass(
            FilterName.DAUB4, np.array(pywt.Wavelet("db2").dec_lo)
        ),
        (FilterName.FARRAS_FIRST_STAGE, 0): FilterPair.from_lowpass(
            FilterName.FARRAS_FIRST_STAGE, farras
        ),
        # one-sample delay of the time reverse
        (FilterName.FARRAS_FIRST_STAGE, 1): FilterPair.from_lowpass(
            FilterName.FARRAS_FIRST_STAGE, np.roll(farras[::-1], -1), tree=1
        ),
        (FilterName.QSHIFT10, 0): FilterPair.from_lowpass(FilterName.QSHIFT10, qshift),
        (FilterName.QSHIFT10, 1): FilterPair.from_lowpass(
            FilterName.QSHIFT10, qshift[::-1].copy(), tree=1
        ),
    }


_FILTERS = _build_filters()


def filter_pair(name: FilterName | str, tree: int = 0) -> FilterPair:
    """
    Return a shipped filter pair.

    tree 0 is the primary (h) bank, tree 1 its Hilbert pair (g). Only the
    dual-tree families have a tree 1.
    """
    name = FilterName(name)
    try:
        return _FILTERS[(name, tree)]
    except KeyError:
        raise ValueError(f"Filter family '{name.value}' has no tree {tree}") from None


def dual_tree_filters(level: int) -> tuple[FilterPair, FilterPair]:
    """Return the (h, g) pair for a 1-based pyramid level."""
    if level < 1:
        raise ValueError(f"Level must be >= 1, got {level}")
    name = FilterName.FARRAS_FIRST_STAGE if level == 1 else FilterName.QSHIFT10
    return filter_pair(name, 0), filter_pair(name, 1)


def _pad_to_even(array: np.ndarray, axes: Sequence[int]) -> np.ndarray:
    widths = [(0, 0)] * array.ndim
    for axis in axes:
        widths[axis] = (0, array.shape[axis] % 2)
    if any(width != (0, 0) for width in widths):
        array = np.pad(array, widths, mode="symmetric")
    return array


def dwt1d(signal: Sequence[float], filters: FilterPair) -> tuple[np.ndarray, np.ndarray]:
    """Single-level 1D transform; odd lengths are symmetrically padded to even."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim != 1:
        raise ValueError(f"Expected 1D signal, got shape {signal.shape}")
    if signal.size == 0:
        raise ValueError("Cannot transform an empty signal")
    approx, detail = pywt.dwt(_pad_to_even(signal, [0]), filters.wavelet, mode=_MODE)
    return approx, detail


def idwt1d(
    approx: Sequence[float],
    detail: Sequence[float],
    filters: FilterPair,
    length: int | None = None,
) -> np.ndarray:
    """Inverse of dwt1d; length crops the padding of odd-length sources."""
    approx = np.asarray(approx, dtype=np.float64)
    detail = np.asarray(detail, dtype=np.float64)
    if approx.shape != detail.shape:
        raise ValueError(
            f"Approximation and detail lengths differ: {approx.shape} != {detail.shape}"
        )
    signal = pywt.idwt(approx, detail, filters.wavelet, mode=_MODE)
    return signal if length is None else signal[:length]


@dataclass
class SubbandSet:
    """
    One level of a 2D transform.

    ll is φ(x)φ(y), lh the horizontal-edge band φ(x)ψ(y), hl the vertical-edge
    band ψ(x)φ(y) and hh the diagonal band ψ(x)ψ(y).
    """

    ll: np.ndarray
    lh: np.ndarray
    hl: np.ndarray
    hh: np.ndarray
    level: int = 1
    source_shape: tuple[int, int] = (0, 0)

    @property
    def details(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Detail bands (lh, hl, hh)."""
        return self.lh, self.hl, self.hh


AxisFilters = Union[FilterPair, "tuple[FilterPair, FilterPair]"]
"""One pair for both axes, or (pair along y, pair along x)."""


def _as_wavelets(filters: AxisFilters) -> tuple[pywt.Wavelet, pywt.Wavelet]:
    if isinstance(filters, FilterPair):
        return filters.wavelet, filters.wavelet
    along_y, along_x = filters
    return along_y.wavelet, along_x.wavelet


def _single_channel(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        if image.shape[2] != 1:
            raise ValueError(
                f"Expected a single-channel image, got {image.shape[2]} channels"
            )
        image = image[:, :, 0]
    if image.ndim != 2:
        raise ValueError(f"Expected a 2D image, got shape {image.shape}")
    return image


def dwt2d(image: np.ndarray, filters: AxisFilters, level: int = 1) -> SubbandSet:
    """Separable single-level 2D transform of a single-channel image."""
    image = _single_channel(image)
    if min(image.shape) < 1:
        raise ValueError(f"Cannot transform an empty image of shape {image.shape}")
    padded = _pad_to_even(image, [0, 1])
    ll, (lh, hl, hh) = pywt.dwt2(padded, _as_wavelets(filters), mode=_MODE)
    return SubbandSet(ll, lh, hl, hh, level=level, source_shape=image.shape)


def idwt2d(subbands: SubbandSet, filters: AxisFilters) -> np.ndarray:
    """Inverse of dwt2d, cropped to the source shape."""
    shapes = {band.shape for band in (subbands.ll, *subbands.details)}
    if len(shapes) != 1:
        raise ValueError(f"Inconsistent sub-band shapes: {sorted(shapes)}")
    image = pywt.idwt2(
        (subbands.ll, subbands.details), _as_wavelets(filters), mode=_MODE
    )
    if subbands.source_shape != (0, 0):
        height, width = subbands.source_shape
        image = image[:height, :width]
    return image


def _per_level(filters: AxisFilters | Sequence[AxisFilters], levels: int) -> list[AxisFilters]:
    if isinstance(filters, FilterPair) or (
        isinstance(filters, tuple)
        and len(filters) == 2
        and all(isinstance(item, FilterPair) for item in filters)
    ):
        return [filters] * levels  # type: ignore[list-item]
    per_level = list(filters)  # type: ignore[arg-type]
    if len(per_level) != levels:
        raise ValueError(f"Expected filters for {levels} levels, got {len(per_level)}")
    return per_level


def dwt2d_multilevel(
    image: np.ndarray,
    filters: AxisFilters | Sequence[AxisFilters],
    levels: int,
) -> list[SubbandSet]:
    """
    Pyramid decomposition, finest level first.

    filters is one pair for every level or a sequence with one entry per level.
    Every level keeps its ll; the last one is the coarsest approximation.
    """
    image = _single_channel(image)
    if levels < 1:
        raise ValueError(f"Levels must be >= 1, got {levels}")
    if min(image.shape) < 2**levels:
        raise ValueError(
            f"Image of shape {image.shape} is too small for {levels} levels"
        )
    pyramid = []
    current = image
    for level, level_filters in enumerate(_per_level(filters, levels), start=1):
        subbands = dwt2d(current, level_filters, level=level)
        pyramid.append(subbands)
        current = subbands.ll
    return pyramid


def idwt2d_multilevel(
    pyramid: Sequence[SubbandSet],
    filters: AxisFilters | Sequence[AxisFilters],
) -> np.ndarray:
    """Inverse of dwt2d_multilevel, reconstructing from the coarsest ll."""
    if not pyramid:
        raise ValueError("Empty pyramid")
    per_level = _per_level(filters, len(pyramid))
    current = pyramid[-1].ll
    for subbands, level_filters in zip(reversed(pyramid), reversed(per_level)):
        if current.shape != subbands.lh.shape:
            raise ValueError(
                f"Level {subbands.level} approximation shape {current.shape} "
                f"does not match detail shape {subbands.lh.shape}"
            )
        current = idwt2d(
            SubbandSet(
                current,
                subbands.lh,
                subbands.hl,
                subbands.hh,
                level=subbands.level,
                source_shape=subbands.source_shape,
            ),
            level_filters,
        )
    return current


def detail_energy(subbands: SubbandSet) -> float:
    """Sum of squares of the detail bands."""
    return float(sum(np.sum(band * band) for band in subbands.details))


def subband_energy(subbands: SubbandSet) -> float:
    """Sum of squares of all four bands."""
    return float(np.sum(subbands.ll * subbands.ll)) + detail_energy(subbands)
