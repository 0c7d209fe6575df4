"""Shared grids, quaternion values, convolution and the parameter store."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from Crypto.Hash import SHA256
from scipy import ndimage
from torch import nn

from qwsr.common import DivergenceError, FrozenParameterError

_LOGGER = logging.getLogger(__name__)

ImageGrid = np.ndarray
"""H×W×C float64 raster, channel-last. Pixel-domain grids hold values in [0, 1]."""

_SINGULAR_TOLERANCE = 1e-10


def as_grid(array: np.ndarray) -> ImageGrid:
    """Return array as a float64 H×W×C grid, adding a channel axis to 2D input."""
    grid = np.asarray(array, dtype=np.float64)
    if grid.ndim == 2:
        grid = grid[:, :, np.newaxis]
    if grid.ndim != 3:
        raise ValueError(f"Expected a H×W or H×W×C grid, got shape {grid.shape}")
    return grid


def check_pixel_grid(grid: ImageGrid) -> ImageGrid:
    """Validate a pixel-domain grid (finite, values in [0, 1])."""
    grid = as_grid(grid)
    if not np.all(np.isfinite(grid)):
        raise ValueError("Pixel grid contains non-finite values")
    if grid.size and (grid.min() < 0.0 or grid.max() > 1.0):
        raise ValueError(
            f"Pixel grid values outside [0, 1]: min={grid.min()}, max={grid.max()}"
        )
    return grid


def to_tensor(grids: ImageGrid | Sequence[ImageGrid]) -> torch.Tensor:
    """Convert one H×W×C grid or a batch of grids to an N×C×H×W float64 tensor."""
    array = np.asarray(grids, dtype=np.float64)
    if array.ndim == 3:
        array = array[np.newaxis]
    if array.ndim != 4:
        raise ValueError(f"Expected grid or batch of grids, got shape {array.shape}")
    return torch.from_numpy(np.ascontiguousarray(array.transpose(0, 3, 1, 2)))


def to_grid(tensor: torch.Tensor) -> np.ndarray:
    """Convert an N×C×H×W tensor to a batch of H×W×C grids."""
    if tensor.ndim != 4:
        raise ValueError(f"Expected N×C×H×W tensor, got shape {tuple(tensor.shape)}")
    return tensor.detach().to(torch.float64).cpu().numpy().transpose(0, 2, 3, 1)


def conv2d_same(grid: ImageGrid, kernel: np.ndarray) -> ImageGrid:
    """
    Correlate every channel with kernel, zero-padded, same output size.

    The kernel must have odd side lengths so it has a center tap.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
        raise ValueError(f"Kernel must be 2D with odd side lengths, got {kernel.shape}")
    grid = as_grid(grid)
    channels = [
        ndimage.correlate(grid[:, :, channel], kernel, mode="constant", cval=0.0)
        for channel in range(grid.shape[2])
    ]
    return np.stack(channels, axis=-1)


@dataclass(frozen=True)
class Quaternion:
    """Quaternion a + bi + cj + dk."""

    a: float
    b: float
    c: float
    d: float

    def as_array(self) -> np.ndarray:
        """Components (a, b, c, d) as array."""
        return np.array([self.a, self.b, self.c, self.d], dtype=np.float64)

    @classmethod
    def from_array(cls, components: Iterable[float]) -> Quaternion:
        """Create from four components."""
        a, b, c, d = (float(value) for value in components)
        return cls(a, b, c, d)

    def __mul__(self, other: Quaternion) -> Quaternion:
        """Hamilton product."""
        return Quaternion(
            self.a * other.a - self.b * other.b - self.c * other.c - self.d * other.d,
            self.a * other.b + self.b * other.a + self.c * other.d - self.d * other.c,
            self.a * other.c - self.b * other.d + self.c * other.a + self.d * other.b,
            self.a * other.d + self.b * other.c - self.c * other.b + self.d * other.a,
        )

    def __neg__(self) -> Quaternion:
        return Quaternion(-self.a, -self.b, -self.c, -self.d)


def quat_magnitude(q: Quaternion) -> float:
    """Return |q|."""
    return math.sqrt(q.a * q.a + q.b * q.b + q.c * q.c + q.d * q.d)


def quat_magnitude_map(components: np.ndarray) -> np.ndarray:
    """Return |q| for every quaternion of a (..., 4) component array."""
    components = np.asarray(components, dtype=np.float64)
    if components.shape[-1] != 4:
        raise ValueError(f"Last axis must hold 4 components, got {components.shape}")
    return np.sqrt(np.sum(components * components, axis=-1))


def _compose_unit(phi: np.ndarray, theta: np.ndarray, psi: np.ndarray) -> np.ndarray:
    # e^{i phi} e^{k psi} e^{j theta}
    cphi, sphi = np.cos(phi), np.sin(phi)
    cth, sth = np.cos(theta), np.sin(theta)
    cpsi, spsi = np.cos(psi), np.sin(psi)
    return np.stack(
        [
            cphi * cpsi * cth + sphi * spsi * sth,
            sphi * cpsi * cth - cphi * spsi * sth,
            cphi * cpsi * sth - sphi * spsi * cth,
            cphi * spsi * cth + sphi * cpsi * sth,
        ],
        axis=-1,
    )


def quat_phase_map(components: np.ndarray) -> np.ndarray:
    """
    Three-angle phase (phi, theta, psi) of every quaternion of a (..., 4) array.

    Uses q = |q| e^{i phi} e^{k psi} e^{j theta} with phi in [-pi, pi),
    theta in [-pi/2, pi/2] and psi in [-pi/4, pi/4]. The angles come from
    the two complex pairs

        (a + d) + i(b - c) = (cos psi + sin psi) e^{i(phi - theta)}
        (a - d) + i(b + c) = (cos psi - sin psi) e^{i(phi + theta)}

    whose moduli are never negative on the psi range. When one modulus
    vanishes (psi = ±pi/4) only phi ∓ theta is defined, theta is then set
    to 0. Zero quaternions get all angles 0.
    """
    components = np.asarray(components, dtype=np.float64)
    magnitude = quat_magnitude_map(components)
    safe = np.where(magnitude > 0.0, magnitude, 1.0)
    unit = components / safe[..., np.newaxis]
    a, b, c, d = unit[..., 0], unit[..., 1], unit[..., 2], unit[..., 3]

    diff_re, diff_im = a + d, b - c
    sum_re, sum_im = a - d, b + c
    diff_mod = np.hypot(diff_re, diff_im)
    sum_mod = np.hypot(sum_re, sum_im)
    psi = np.arctan2(diff_mod - sum_mod, diff_mod + sum_mod)

    diff_angle = np.arctan2(diff_im, diff_re)
    sum_angle = np.arctan2(sum_im, sum_re)
    theta = 0.5 * _wrap(sum_angle - diff_angle)
    theta = np.where(
        (diff_mod < _SINGULAR_TOLERANCE) | (sum_mod < _SINGULAR_TOLERANCE), 0.0, theta
    )
    phi = np.where(diff_mod < _SINGULAR_TOLERANCE, sum_angle, diff_angle + theta)
    phi = _wrap(phi)

    angles = np.stack([phi, theta, psi], axis=-1)
    return np.where((magnitude > 0.0)[..., np.newaxis], angles, 0.0)


def _wrap(angle: np.ndarray) -> np.ndarray:
    # into [-pi, pi)
    wrapped = np.mod(angle + np.pi, 2.0 * np.pi) - np.pi
    return np.where(wrapped >= np.pi, wrapped - 2.0 * np.pi, wrapped)


def quat_phase(q: Quaternion) -> tuple[float, float, float]:
    """Return the phase triple (phi, theta, psi) of q."""
    if quat_magnitude(q) == 0.0:
        raise ValueError("Phase of the zero quaternion is undefined")
    phi, theta, psi = quat_phase_map(q.as_array())
    return float(phi), float(theta), float(psi)


def quat_from_phase(magnitude: float, phi: float, theta: float, psi: float) -> Quaternion:
    """Build |q| e^{i phi} e^{k psi} e^{j theta}."""
    unit = _compose_unit(np.float64(phi), np.float64(theta), np.float64(psi))
    return Quaternion.from_array(magnitude * unit)


class ParamStore:
    """
    Named trainable tensors of a module, with gradients and AdamW state.

    Entries are the module's named parameters. Frozen entries are left out of
    the optimizer, so no step can move them.
    """

    def __init__(
        self,
        module: nn.Module,
        learning_rate: float = 5e-5,
        weight_decay: float = 0.0,
        betas: tuple[float, float] = (0.9, 0.999),
    ) -> None:
        """Initialize ParamStore."""
        self.module = module
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.betas = betas
        self.step_count = 0
        self._frozen: set[str] = set()
        self._optimizer: torch.optim.AdamW | None = None

    @property
    def entries(self) -> dict[str, nn.Parameter]:
        """Parameters by name."""
        return dict(self.module.named_parameters())

    @property
    def trainable_names(self) -> list[str]:
        """Names of entries not frozen."""
        return [name for name in self.entries if name not in self._frozen]

    @property
    def is_frozen(self) -> bool:
        """Return True when no entry is trainable."""
        return not self.trainable_names

    def is_entry_frozen(self, name: str) -> bool:
        """Return True when entry name is frozen."""
        return name in self._frozen

    def _matching(self, prefixes: Sequence[str] | None) -> set[str]:
        names = self.entries.keys()
        if prefixes is None:
            return set(names)
        matched = {name for name in names if name.startswith(tuple(prefixes))}
        if not matched:
            raise ValueError(f"No parameters match prefixes {list(prefixes)}")
        return matched

    def freeze(self, prefixes: Sequence[str] | None = None) -> None:
        """Freeze all entries, or those whose name starts with one of prefixes."""
        self._frozen |= self._matching(prefixes)
        self._update_requires_grad()

    def unfreeze(self, prefixes: Sequence[str] | None = None) -> None:
        """Unfreeze all entries, or those whose name starts with one of prefixes."""
        self._frozen -= self._matching(prefixes)
        self._update_requires_grad()

    def _update_requires_grad(self) -> None:
        for name, parameter in self.entries.items():
            parameter.requires_grad_(name not in self._frozen)
        # optimizer is rebuilt over the new trainable set on next step
        self._optimizer = None

    @property
    def optimizer(self) -> torch.optim.AdamW:
        """AdamW over the trainable entries."""
        if self._optimizer is None:
            trainable = [self.entries[name] for name in self.trainable_names]
            if not trainable:
                raise FrozenParameterError(
                    f"{type(self.module).__name__} is frozen, nothing to optimize"
                )
            self._optimizer = torch.optim.AdamW(
                trainable,
                lr=self.learning_rate,
                betas=self.betas,
                weight_decay=self.weight_decay,
            )
        return self._optimizer

    def zero_grad(self) -> None:
        """Reset gradient slots of every entry."""
        for parameter in self.entries.values():
            parameter.grad = None

    def step(self) -> None:
        """Apply one AdamW step to the trainable entries."""
        optimizer = self.optimizer
        for name in self.trainable_names:
            grad = self.entries[name].grad
            if grad is not None and not torch.all(torch.isfinite(grad)):
                raise DivergenceError(
                    f"Non-finite gradient for '{name}'", step=self.step_count
                )
        optimizer.step()
        self.step_count += 1

    def snapshot(self) -> dict[str, np.ndarray]:
        """Copy of every entry value."""
        return {
            name: parameter.detach().cpu().numpy().copy()
            for name, parameter in self.entries.items()
        }

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        """Assign entry values; every entry must be present with a matching shape."""
        entries = self.entries
        missing = sorted(set(entries) - set(values))
        if missing:
            raise ValueError(f"Missing values for {missing}")
        for name, parameter in entries.items():
            if tuple(values[name].shape) != tuple(parameter.shape):
                raise ValueError(
                    f"Shape mismatch for '{name}': {values[name].shape} != {tuple(parameter.shape)}"
                )
        with torch.no_grad():
            for name, parameter in entries.items():
                parameter.copy_(torch.from_numpy(np.asarray(values[name])))

    def moments(self) -> dict[str, np.ndarray]:
        """AdamW moment buffers of the trainable entries, keyed 'exp_avg/<name>' etc."""
        if self._optimizer is None:
            return {}
        moments: dict[str, np.ndarray] = {}
        for name in self.trainable_names:
            state = self._optimizer.state.get(self.entries[name], {})
            for key in ("exp_avg", "exp_avg_sq"):
                if key in state:
                    moments[f"{key}/{name}"] = state[key].detach().cpu().numpy().copy()
        return moments

    def load_moments(self, moments: dict[str, np.ndarray], step_count: int) -> None:
        """Restore AdamW moment buffers saved by moments()."""
        self.step_count = step_count
        if not moments:
            return
        optimizer = self.optimizer
        for name in self.trainable_names:
            keys = (f"exp_avg/{name}", f"exp_avg_sq/{name}")
            if all(key in moments for key in keys):
                optimizer.state[self.entries[name]] = {
                    "step": torch.tensor(float(step_count)),
                    "exp_avg": torch.from_numpy(moments[keys[0]].copy()),
                    "exp_avg_sq": torch.from_numpy(moments[keys[1]].copy()),
                }

    def digest(self, names: Iterable[str] | None = None) -> str:
        """SHA-256 over names, shapes and raw bytes of the selected entries."""
        entries = self.entries
        hasher = SHA256.new()
        for name in sorted(entries if names is None else names):
            value = entries[name].detach().cpu().numpy()
            hasher.update(name.encode("utf-8"))
            hasher.update(repr(value.shape).encode("ascii"))
            hasher.update(np.ascontiguousarray(value).tobytes())
        return hasher.hexdigest()


def grad_check(
    f: Callable[[ParamStore], torch.Tensor],
    store: ParamStore,
    step: float = 1e-4,
    max_entries_per_tensor: int | None = None,
    seed: int = 0,
) -> float:
    """
    Compare reverse-mode gradients with central differences.

    Returns the largest |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    over the trainable entries, optionally sampling at most
    max_entries_per_tensor coordinates of each tensor.
    """
    store.zero_grad()
    loss = f(store)
    if not torch.isfinite(loss):
        raise DivergenceError("Function value is not finite at the check point")
    loss.backward()

    rng = np.random.default_rng(seed)
    worst = 0.0
    entries = store.entries
    for name in store.trainable_names:
        parameter = entries[name]
        analytic = (
            parameter.grad.detach().clone()
            if parameter.grad is not None
            else torch.zeros_like(parameter)
        )
        flat_count = parameter.numel()
        indices = np.arange(flat_count)
        if max_entries_per_tensor is not None and flat_count > max_entries_per_tensor:
            indices = rng.choice(flat_count, size=max_entries_per_tensor, replace=False)

        flat = parameter.data.view(-1)
        for index in indices:
            original = flat[index].item()
            with torch.no_grad():
                flat[index] = original + step
                plus = f(store).item()
                flat[index] = original - step
                minus = f(store).item()
                flat[index] = original
            if not (math.isfinite(plus) and math.isfinite(minus)):
                raise DivergenceError(f"Function value is not finite near '{name}'")
            numeric = (plus - minus) / (2.0 * step)
            exact = analytic.view(-1)[index].item()
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
            worst = max(worst, error)
    _LOGGER.debug("Gradient check worst relative error: %g", worst)
    store.zero_grad()
    return worst
