"""Construct declarations and IO of the checkpoint format."""
from __future__ import annotations

import io
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from typing import Any

import construct  # type: ignore
import numpy as np
from Crypto.Hash import SHA256

from qwsr.common import CheckpointError, ModelKind
from qwsr.numerics import ParamStore

_LOGGER = logging.getLogger(__name__)

MAGIC = b"QWSRCKPT"
FORMAT_VERSION = 1

TensorDType = construct.Enum(construct.Int8ub, float32=1, float64=2)

_NUMPY_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}

Kind = construct.Enum(
    construct.Int8ub, **{kind.name.lower(): kind.value for kind in ModelKind}
)

Utf8Text = construct.PascalString(construct.Int32ul, "utf8")

Tensor = construct.Struct(
    "name" / construct.PascalString(construct.Int16ul, "utf8"),
    "dtype" / TensorDType,
    "shape" / construct.PrefixedArray(construct.Int8ub, construct.Int32ul),
    "data" / construct.Prefixed(construct.Int64ul, construct.GreedyBytes),
)

Header = construct.Struct(
    "magic" / construct.Const(MAGIC),
    "version" / construct.Int16ul,
)

Body = construct.Struct(
    "kind" / Kind,
    "config" / Utf8Text,  # JSON
    "metadata" / Utf8Text,  # JSON
    "rng_state" / construct.Prefixed(construct.Int32ul, construct.GreedyBytes),
    "tensors" / construct.PrefixedArray(construct.Int32ul, Tensor),
)

CheckpointFile = construct.Struct(
    "header" / Header,
    "body" / construct.RawCopy(Body),
    "checksum"
    / construct.Checksum(
        construct.Bytes(32),
        lambda data: SHA256.new(data).digest(),
        construct.this.body.data,
    ),
    construct.Terminated,
)


@dataclass
class Checkpoint:
    """Named tensors plus the config snapshot and RNG state they were produced with."""

    kind: ModelKind
    tensors: dict[str, np.ndarray]
    config: dict[str, Any] = field(default_factory=dict)
    rng_state: bytes = b""
    metadata: dict[str, Any] = field(default_factory=dict)


def _encode_tensor(name: str, value: np.ndarray, dtype: str | None) -> dict[str, Any]:
    value = np.asarray(value)
    if dtype is None:
        dtype = "float32" if value.dtype == np.float32 else "float64"
    array = np.ascontiguousarray(value, dtype=_NUMPY_DTYPES[dtype])
    return {"name": name, "dtype": dtype, "shape": list(array.shape), "data": array.tobytes()}


def _decode_tensor(entry: construct.Container) -> np.ndarray:
    dtype = _NUMPY_DTYPES[str(entry.dtype)]
    expected = int(np.prod(entry.shape, dtype=np.int64)) * dtype.itemsize
    if len(entry.data) != expected:
        raise CheckpointError(
            f"Tensor '{entry.name}' holds {len(entry.data)} bytes, shape needs {expected}"
        )
    return np.frombuffer(entry.data, dtype=dtype).reshape(tuple(entry.shape)).copy()


def encode_checkpoint(checkpoint: Checkpoint, dtype: str | None = None) -> bytes:
    """
    Serialize a checkpoint.

    Tensors keep their own precision unless dtype ('float32' or 'float64')
    forces one.
    """
    body = {
        "kind": checkpoint.kind.name.lower(),
        "config": json.dumps(checkpoint.config, sort_keys=True),
        "metadata": json.dumps(checkpoint.metadata, sort_keys=True),
        "rng_state": checkpoint.rng_state,
        "tensors": [
            _encode_tensor(name, value, dtype)
            for name, value in sorted(checkpoint.tensors.items())
        ],
    }
    return CheckpointFile.build(
        {
            "header": {"version": FORMAT_VERSION},
            "body": {"value": body},
            "checksum": None,
        }
    )


def decode_checkpoint(data: bytes) -> Checkpoint:
    """Parse and verify checkpoint bytes."""
    stream = io.BytesIO(data)
    try:
        header = Header.parse_stream(stream)
    except construct.ConstructError as ex:
        raise CheckpointError(f"Not a checkpoint (bad magic or header): {ex}") from ex
    if header.version != FORMAT_VERSION:
        raise CheckpointError(
            f"Checkpoint format version {header.version} is not supported (expected {FORMAT_VERSION})"
        )

    stream.seek(0)
    try:
        parsed = CheckpointFile.parse_stream(stream)
    except construct.ChecksumError as ex:
        raise CheckpointError("Checkpoint checksum mismatch") from ex
    except construct.ConstructError as ex:
        raise CheckpointError(
            f"Checkpoint truncated or corrupt near byte {stream.tell()} of {len(data)}: {ex}"
        ) from ex

    body = parsed.body.value
    return Checkpoint(
        kind=ModelKind[str(body.kind).upper()],
        tensors={entry.name: _decode_tensor(entry) for entry in body.tensors},
        config=json.loads(body.config),
        rng_state=bytes(body.rng_state),
        metadata=json.loads(body.metadata),
    )


def save_checkpoint(path: str, checkpoint: Checkpoint, dtype: str | None = None) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    data = encode_checkpoint(checkpoint, dtype)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    handle, temp_path = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
    try:
        with os.fdopen(handle, "wb") as temp_file:
            temp_file.write(data)
            temp_file.flush()
            os.fsync(temp_file.fileno())
        os.replace(temp_path, path)
    except BaseException:
        if os.path.exists(temp_path):
            os.remove(temp_path)
        raise
    _LOGGER.info("Wrote %s checkpoint %s (%d bytes)", checkpoint.kind.name, path, len(data))


def load_checkpoint(path: str) -> Checkpoint:
    """Read and verify a checkpoint file."""
    with open(path, "rb") as checkpoint_file:
        data = checkpoint_file.read()
    try:
        return decode_checkpoint(data)
    except CheckpointError as ex:
        raise CheckpointError(f"{path}: {ex}") from ex


def stores_to_tensors(stores: dict[str, ParamStore]) -> tuple[dict[str, np.ndarray], dict[str, int]]:
    """Flatten stores to '<model>/<entry>' tensors plus their optimizer state."""
    tensors: dict[str, np.ndarray] = {}
    step_counts: dict[str, int] = {}
    for model_name, store in stores.items():
        for name, value in store.snapshot().items():
            tensors[f"{model_name}/{name}"] = value
        for name, value in store.moments().items():
            tensors[f"{model_name}/optimizer/{name}"] = value
        step_counts[model_name] = store.step_count
    return tensors, step_counts


def restore_stores(checkpoint: Checkpoint, stores: dict[str, ParamStore]) -> None:
    """
    Assign checkpoint tensors to stores.

    Every store is validated before any value is assigned, so a mismatch
    leaves all models untouched.
    """
    plans = []
    for model_name, store in stores.items():
        prefix = f"{model_name}/"
        optimizer_prefix = f"{prefix}optimizer/"
        values = {
            name[len(prefix):]: value
            for name, value in checkpoint.tensors.items()
            if name.startswith(prefix) and not name.startswith(optimizer_prefix)
        }
        moments = {
            name[len(optimizer_prefix):]: value
            for name, value in checkpoint.tensors.items()
            if name.startswith(optimizer_prefix)
        }
        entries = store.entries
        missing = sorted(set(entries) - set(values))
        if missing:
            raise CheckpointError(f"Checkpoint lacks '{model_name}' tensors {missing}")
        for name, parameter in entries.items():
            if tuple(values[name].shape) != tuple(parameter.shape):
                raise CheckpointError(
                    f"Tensor '{prefix}{name}' has shape {values[name].shape}, "
                    f"model expects {tuple(parameter.shape)}"
                )
        plans.append((store, values, moments, model_name))

    step_counts = checkpoint.metadata.get("step_counts", {})
    for store, values, moments, model_name in plans:
        store.load_values(values)
        # frozen stores have no optimizer to receive moments
        store.load_moments(
            {} if store.is_frozen else moments, int(step_counts.get(model_name, 0))
        )
