"""Test checkpoint module."""
from __future__ import annotations

import os

import numpy as np
import pytest
import torch
from torch import nn

from qwsr.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    Checkpoint,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    restore_stores,
    save_checkpoint,
    stores_to_tensors,
)
from qwsr.common import CheckpointError, ModelKind
from qwsr.numerics import ParamStore
from tests.assert_utils import assert_snapshots_equal


def _checkpoint():
    rng = np.random.default_rng(0)
    return Checkpoint(
        kind=ModelKind.VAE,
        tensors={
            "vae/weight": rng.standard_normal((3, 2)),
            "vae/bias": rng.standard_normal(3).astype(np.float32),
            "vae/scale": np.array(2.5),
        },
        config={"seed": 7, "cfw_w": 0.5, "sampler": "ddim"},
        rng_state=bytes(range(16)),
        metadata={"stage": "vae", "step_counts": {"vae": 3}},
    )


def _store(seed):
    torch.manual_seed(seed)
    return ParamStore(nn.Linear(3, 2).double(), learning_rate=0.1)


def _step(store):
    store.zero_grad()
    torch.sum(store.module(torch.ones(2, 3, dtype=torch.float64)) ** 2).backward()
    store.step()


class TestEncoding:
    """Test the binary layout."""

    def test_roundtrip(self):
        """Tensors, config, metadata and RNG state come back bitwise."""
        original = _checkpoint()
        data = encode_checkpoint(original)
        assert data.startswith(MAGIC)
        decoded = decode_checkpoint(data)
        assert decoded.kind == ModelKind.VAE
        assert decoded.config == original.config
        assert decoded.metadata == original.metadata
        assert decoded.rng_state == original.rng_state
        assert decoded.tensors.keys() == original.tensors.keys()
        for name, value in original.tensors.items():
            assert decoded.tensors[name].dtype == value.dtype
            assert decoded.tensors[name].shape == value.shape
            assert np.array_equal(decoded.tensors[name], value)

    def test_forced_precision(self):
        """A forced dtype converts every tensor."""
        decoded = decode_checkpoint(encode_checkpoint(_checkpoint(), dtype="float32"))
        assert all(value.dtype == np.float32 for value in decoded.tensors.values())

    def test_deterministic(self):
        """Encoding is a pure function of the checkpoint."""
        assert encode_checkpoint(_checkpoint()) == encode_checkpoint(_checkpoint())

    def test_bad_magic(self):
        """Other files are rejected."""
        data = b"NOTACKPT" + encode_checkpoint(_checkpoint())[len(MAGIC):]
        with pytest.raises(CheckpointError, match="magic"):
            decode_checkpoint(data)

    def test_version_mismatch(self):
        """Another format version is rejected."""
        data = bytearray(encode_checkpoint(_checkpoint()))
        data[len(MAGIC):len(MAGIC) + 2] = (FORMAT_VERSION + 1).to_bytes(2, "little")
        with pytest.raises(CheckpointError, match="version"):
            decode_checkpoint(bytes(data))

    @pytest.mark.parametrize("keep", [0.5, 0.9])
    def test_truncated(self, keep):
        """Truncated files are rejected."""
        data = encode_checkpoint(_checkpoint())
        with pytest.raises(CheckpointError):
            decode_checkpoint(data[: int(len(data) * keep)])

    def test_checksum(self):
        """A flipped tensor byte fails the checksum."""
        data = bytearray(encode_checkpoint(_checkpoint()))
        data[-33] ^= 0xFF
        with pytest.raises(CheckpointError, match="checksum"):
            decode_checkpoint(bytes(data))

    def test_trailing_bytes(self):
        """Bytes after the checksum are rejected."""
        with pytest.raises(CheckpointError):
            decode_checkpoint(encode_checkpoint(_checkpoint()) + b"\x00")


class TestFiles:
    """Test checkpoint files."""

    def test_save_and_load(self, tmp_path):
        """Saved files load back and leave no temp files."""
        path = str(tmp_path / "run" / "vae.ckpt")
        save_checkpoint(path, _checkpoint())
        assert os.listdir(tmp_path / "run") == ["vae.ckpt"]
        loaded = load_checkpoint(path)
        assert np.array_equal(loaded.tensors["vae/weight"], _checkpoint().tensors["vae/weight"])

    def test_overwrite(self, tmp_path):
        """Saving again replaces the file."""
        path = str(tmp_path / "vae.ckpt")
        save_checkpoint(path, _checkpoint())
        replacement = _checkpoint()
        replacement.metadata = {"stage": "vae", "step_counts": {"vae": 9}}
        save_checkpoint(path, replacement)
        assert load_checkpoint(path).metadata["step_counts"]["vae"] == 9

    def test_corrupt_file_names_path(self, tmp_path):
        """Load errors name the file."""
        path = tmp_path / "broken.ckpt"
        path.write_bytes(b"garbage")
        with pytest.raises(CheckpointError, match="broken.ckpt"):
            load_checkpoint(str(path))


class TestStores:
    """Test store flattening and restore."""

    def test_restore_continues_training(self):
        """Restored values, moments and step counts continue like the original."""
        store = _store(0)
        _step(store)
        tensors, step_counts = stores_to_tensors({"model": store})
        assert "model/weight" in tensors
        assert "model/optimizer/exp_avg/weight" in tensors
        checkpoint = decode_checkpoint(
            encode_checkpoint(
                Checkpoint(ModelKind.VAE, tensors, metadata={"step_counts": step_counts})
            )
        )

        restored = _store(1)
        restore_stores(checkpoint, {"model": restored})
        assert restored.step_count == 1
        assert_snapshots_equal(store.snapshot(), restored.snapshot())
        _step(store)
        _step(restored)
        assert_snapshots_equal(store.snapshot(), restored.snapshot())

    def test_missing_model_leaves_stores_untouched(self):
        """A checkpoint lacking one store's tensors assigns nothing."""
        source = _store(0)
        tensors, _ = stores_to_tensors({"first": source})
        checkpoint = Checkpoint(ModelKind.VAE, tensors)
        first, second = _store(1), _store(2)
        before = first.snapshot()
        with pytest.raises(CheckpointError):
            restore_stores(checkpoint, {"first": first, "second": second})
        assert_snapshots_equal(before, first.snapshot())

    def test_shape_mismatch(self):
        """Tensors of another shape are rejected."""
        tensors, _ = stores_to_tensors({"model": _store(0)})
        tensors["model/bias"] = np.zeros(5)
        target = _store(1)
        before = target.snapshot()
        with pytest.raises(CheckpointError, match="shape"):
            restore_stores(Checkpoint(ModelKind.VAE, tensors), {"model": target})
        assert_snapshots_equal(before, target.snapshot())
