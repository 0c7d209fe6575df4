"""Common assertion helpers and fixtures data."""
from __future__ import annotations

import numpy as np
import torch


def rms(a, b) -> float:
    """Root mean square difference."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    assert a.shape == b.shape, f"{a.shape} != {b.shape}"
    return float(np.sqrt(np.mean((a - b) ** 2)))


def assert_rms_below(a, b, limit):
    """Assert RMS difference of two arrays is below limit."""
    error = rms(a, b)
    assert error < limit, f"RMS {error} >= {limit}"


def assert_tensors_equal(a: torch.Tensor, b: torch.Tensor):
    """Assert two tensors are bitwise equal."""
    assert a.shape == b.shape
    assert torch.equal(a, b)


def assert_snapshots_equal(before: dict, after: dict):
    """Assert two ParamStore snapshots hold bitwise equal values."""
    assert before.keys() == after.keys()
    for name, value in before.items():
        assert np.array_equal(value, after[name]), name


def random_rgb(height: int, width: int, seed: int = 0) -> np.ndarray:
    """Random RGB grid in [0, 1]."""
    return np.random.default_rng(seed).random((height, width, 3))


def smooth_rgb(height: int, width: int, seed: int = 0) -> np.ndarray:
    """Low-frequency RGB pattern in [0, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    channels = []
    for _ in range(3):
        fy, fx, phase = rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0, np.pi)
        channels.append(
            0.5 + 0.4 * np.sin(2 * np.pi * (fy * yy / height + fx * xx / width) + phase)
        )
    return np.stack(channels, axis=-1)
