"""
Dense float64 tensors, named checkpoints and the TMAP-v1 binary format.

A tensor is a read-only, C-contiguous ``numpy.ndarray`` of dtype float64 with at
least one dimension and no zero-sized dimension. A checkpoint is an immutable,
lexicographically ordered map of such tensors plus a string-to-string meta map.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from aim_merge.core.errors import (
    BadMagicError,
    CheckpointFormatError,
    HeaderLengthMismatchError,
    InputError,
    LayoutError,
    NonFiniteValueError,
    ShapeMismatchError,
    TruncatedPayloadError,
    ValidationError,
)

logger = logging.getLogger(__name__)

MAGIC = b"TMAPv1\x00\x00"
PREAMBLE_SIZE = 16
ITEM_SIZE = 8
FLOAT_DTYPE = np.dtype("<f8")

ArrayLike = Union[np.ndarray, Sequence[float], Sequence[Sequence[float]]]


def as_tensor(values: ArrayLike, shape: Optional[Sequence[int]] = None, name: Optional[str] = None) -> np.ndarray:
    """
    Convert values to a frozen float64 tensor.

    Args:
        values: Nested sequence or array of numbers
        shape: Optional target shape; values are reshaped row-major
        name: Tensor name used in error messages

    Returns:
        Read-only, C-contiguous float64 array
    """
    label = f"'{name}'" if name else "tensor"
    array = np.array(values, dtype=np.float64, order="C", copy=True)
    if shape is not None:
        shape = tuple(int(d) for d in shape)
        if int(np.prod(shape)) != array.size:
            raise ShapeMismatchError(array.shape, shape, name)
        array = array.reshape(shape)
    if array.ndim == 0:
        raise ValidationError(f"{label} must have at least one dimension")
    if any(d <= 0 for d in array.shape):
        raise ValidationError(f"{label} has a non-positive dimension: {list(array.shape)}")
    if not np.all(np.isfinite(array)):
        raise NonFiniteValueError(f"{label} contains non-finite values")
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """Named map of float64 tensors plus string metadata."""

    tensors: Mapping[str, np.ndarray]
    meta: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        frozen = {name: as_tensor(self.tensors[name], name=name) for name in sorted(self.tensors)}
        object.__setattr__(self, "tensors", frozen)
        object.__setattr__(self, "meta", {str(k): str(v) for k, v in sorted(self.meta.items())})

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if list(self.tensors) != list(other.tensors) or dict(self.meta) != dict(other.meta):
            return False
        return all(
            self.tensors[n].shape == other.tensors[n].shape
            and self.tensors[n].tobytes() == other.tensors[n].tobytes()
            for n in self.tensors
        )

    def __len__(self) -> int:
        return len(self.tensors)

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def names(self) -> List[str]:
        return list(self.tensors)

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: tensor.shape for name, tensor in self.tensors.items()}

    def with_meta(self, **updates: str) -> "Checkpoint":
        return Checkpoint(self.tensors, {**self.meta, **updates})

    def map(self, fn, meta: Optional[Mapping[str, str]] = None) -> "Checkpoint":
        """Apply ``fn(name, tensor)`` to every tensor."""
        return Checkpoint({n: fn(n, t) for n, t in self.tensors.items()}, self.meta if meta is None else meta)


_BINARY_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def tensor_binary_op(a: np.ndarray, b: np.ndarray, op: str, name: Optional[str] = None) -> np.ndarray:
    """Elementwise add/sub/mul of two equally shaped tensors."""
    if op not in _BINARY_OPS:
        raise InputError(f"unknown tensor op '{op}', expected one of {sorted(_BINARY_OPS)}")
    if a.shape != b.shape:
        raise ShapeMismatchError(a.shape, b.shape, name)
    return as_tensor(_BINARY_OPS[op](a, b), name=name)


class CompatReport(BaseModel):
    """Differences that prevent two checkpoints from being merged."""

    missing_in_b: List[str] = Field(default_factory=list, description="Tensors present only in a")
    missing_in_a: List[str] = Field(default_factory=list, description="Tensors present only in b")
    shape_mismatches: Dict[str, Tuple[List[int], List[int]]] = Field(default_factory=dict)

    @property
    def is_compatible(self) -> bool:
        return not (self.missing_in_a or self.missing_in_b or self.shape_mismatches)

    def summary(self) -> str:
        parts = []
        if self.missing_in_b:
            parts.append(f"missing in second: {', '.join(self.missing_in_b)}")
        if self.missing_in_a:
            parts.append(f"missing in first: {', '.join(self.missing_in_a)}")
        for name, (left, right) in self.shape_mismatches.items():
            parts.append(f"'{name}' shape {left} vs {right}")
        return "; ".join(parts) if parts else "compatible"


def checkpoint_compat_check(a: Checkpoint, b: Checkpoint) -> CompatReport:
    names_a, names_b = set(a.tensors), set(b.tensors)
    mismatches = {
        name: (list(a[name].shape), list(b[name].shape))
        for name in sorted(names_a & names_b)
        if a[name].shape != b[name].shape
    }
    return CompatReport(
        missing_in_b=sorted(names_a - names_b),
        missing_in_a=sorted(names_b - names_a),
        shape_mismatches=mismatches,
    )


# ============================================================================
# TMAP-v1 serialization
# ============================================================================

def encode_checkpoint(c: Checkpoint) -> bytes:
    """Encode a checkpoint as TMAP-v1 bytes. Identical checkpoints give identical bytes."""
    entries = {}
    chunks = []
    offset = 0
    for name, tensor in c.tensors.items():
        payload = tensor.astype(FLOAT_DTYPE, copy=False).tobytes(order="C")
        entries[name] = {"shape": list(tensor.shape), "offset": offset, "len": len(payload)}
        chunks.append(payload)
        offset += len(payload)

    header = json.dumps(
        {"meta": dict(c.meta), "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
    ).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(blob) < PREAMBLE_SIZE:
        if not MAGIC.startswith(blob[: len(MAGIC)]):
            raise BadMagicError(blob[: len(MAGIC)])
        raise TruncatedPayloadError(f"{source}: file too short for TMAP-v1 preamble ({len(blob)} bytes)")
    if blob[: len(MAGIC)] != MAGIC:
        raise BadMagicError(blob[: len(MAGIC)])

    (header_len,) = struct.unpack("<Q", blob[len(MAGIC):PREAMBLE_SIZE])
    data_start = PREAMBLE_SIZE + header_len
    if data_start > len(blob):
        raise TruncatedPayloadError(
            f"{source}: header declares {header_len} bytes but only {len(blob) - PREAMBLE_SIZE} remain"
        )

    try:
        header = json.loads(blob[PREAMBLE_SIZE:data_start].decode("utf-8"))
        meta = header["meta"]
        entries = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise CheckpointFormatError(f"{source}: unreadable header: {e}") from e
    if not isinstance(meta, dict) or not isinstance(entries, dict):
        raise CheckpointFormatError(f"{source}: header 'meta' and 'tensors' must be objects")

    data = memoryview(blob)[data_start:]
    expected_offset = 0
    tensors = {}
    for name, entry in sorted(entries.items(), key=lambda item: _entry_offset(item, source)):
        try:
            shape = [int(d) for d in entry["shape"]]
            offset = int(entry["offset"])
            length = int(entry["len"])
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointFormatError(f"{source}: bad entry for '{name}': {e}") from e

        if offset != expected_offset:
            kind = "gap" if offset > expected_offset else "overlap"
            raise LayoutError(f"{source}: {kind} before '{name}' (offset {offset}, expected {expected_offset})")
        if not shape or any(d <= 0 for d in shape):
            raise LayoutError(f"{source}: '{name}' has invalid shape {shape}")
        if length != int(np.prod(shape)) * ITEM_SIZE:
            raise HeaderLengthMismatchError(
                f"{source}: '{name}' declares len {length} but shape {shape} needs {int(np.prod(shape)) * ITEM_SIZE}"
            )
        if offset + length > len(data):
            raise TruncatedPayloadError(f"{source}: payload for '{name}' is truncated")

        values = np.frombuffer(data[offset:offset + length], dtype=FLOAT_DTYPE).reshape(shape)
        if not np.all(np.isfinite(values)):
            raise NonFiniteValueError(f"{source}: '{name}' contains non-finite values")
        tensors[name] = values.astype(np.float64)
        expected_offset = offset + length

    if expected_offset != len(data):
        raise HeaderLengthMismatchError(
            f"{source}: header accounts for {expected_offset} data bytes, file holds {len(data)}"
        )

    logger.debug(f"Decoded {len(tensors)} tensors from {source}")
    return Checkpoint(tensors, meta)


def _entry_offset(item, source: str) -> int:
    name, entry = item
    try:
        return int(entry["offset"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointFormatError(f"{source}: bad entry for '{name}': {e}") from e


def checkpoint_save(c: Checkpoint, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(c))
    logger.info(f"Wrote checkpoint with {len(c)} tensors to {path}")


def checkpoint_load(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"checkpoint file not found: {path}")
    checkpoint = decode_checkpoint(path.read_bytes(), source=str(path))
    logger.info(f"Loaded checkpoint with {len(checkpoint)} tensors from {path}")
    return checkpoint


def zeros_like(c: Checkpoint) -> Checkpoint:
    return c.map(lambda _, t: np.zeros_like(t))

