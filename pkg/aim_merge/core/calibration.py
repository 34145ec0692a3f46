"""Calibration sets: CSV (one sample per row) or binary CALBv1 files."""

import csv
import hashlib
import io
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from aim_merge.core.errors import InputError, ShapeMismatchError

logger = logging.getLogger(__name__)

CALB_MAGIC = b"CALBv1\x00\x00"
CALB_PREAMBLE = len(CALB_MAGIC) + 16


@dataclass(frozen=True, eq=False)
class CalibrationSet:
    samples: np.ndarray  # [n_samples, input_dim]
    source_id: str = ""

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64, order="C", copy=True)
        if samples.ndim != 2 or samples.shape[0] == 0 or samples.shape[1] == 0:
            raise InputError(f"calibration set must be a non-empty 2-D array, got shape {list(samples.shape)}")
        if not np.all(np.isfinite(samples)):
            raise InputError("calibration set contains non-finite values")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def input_dim(self) -> int:
        return self.samples.shape[1]

    def subset(self, count: int) -> "CalibrationSet":
        """First ``count`` samples."""
        if count < 1 or count > len(self):
            raise InputError(f"cannot take {count} samples from a set of {len(self)}")
        return CalibrationSet(self.samples[:count], f"{self.source_id}[:{count}]")

    def scaled(self, factor: float) -> "CalibrationSet":
        return CalibrationSet(self.samples * factor, f"{self.source_id}*{factor!r}")

    def check_input_dim(self, input_dim: int) -> None:
        if self.input_dim != input_dim:
            raise ShapeMismatchError((self.input_dim,), (input_dim,), "calibration sample")


def load_calibration(path: Path) -> CalibrationSet:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"calibration file not found: {path}")
    blob = path.read_bytes()
    source_id = hashlib.sha256(blob).hexdigest()[:16]
    if blob.startswith(CALB_MAGIC):
        samples = _decode_calb(blob, str(path))
    else:
        samples = _parse_csv(blob, str(path))
    calib = CalibrationSet(samples, source_id)
    logger.info(f"Loaded {len(calib)} calibration samples of width {calib.input_dim} from {path}")
    return calib


def _decode_calb(blob: bytes, source: str) -> np.ndarray:
    if len(blob) < CALB_PREAMBLE:
        raise InputError(f"{source}: truncated CALBv1 header")
    rows, cols = struct.unpack("<QQ", blob[len(CALB_MAGIC):CALB_PREAMBLE])
    expected = rows * cols * 8
    payload = blob[CALB_PREAMBLE:]
    if len(payload) != expected:
        raise InputError(f"{source}: CALBv1 declares {rows}x{cols} values but holds {len(payload)} bytes")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)


def _parse_csv(blob: bytes, source: str) -> np.ndarray:
    try:
        text = blob.decode("utf-8")
    except UnicodeDecodeError as e:
        raise InputError(f"{source}: calibration CSV is not UTF-8: {e}") from e

    rows = []
    for line_no, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or all(not cell.strip() for cell in row):
            continue
        try:
            rows.append([float(cell) for cell in row])
        except ValueError as e:
            raise InputError(f"{source}:{line_no}: non-numeric calibration value: {e}") from e
        if len(rows[-1]) != len(rows[0]):
            raise InputError(f"{source}:{line_no}: expected {len(rows[0])} values, got {len(rows[-1])}")
    if not rows:
        raise InputError(f"{source}: calibration set is empty")
    return np.array(rows, dtype=np.float64)


def save_calibration(calib: CalibrationSet, path: Path, binary: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if binary:
        rows, cols = calib.samples.shape
        path.write_bytes(CALB_MAGIC + struct.pack("<QQ", rows, cols) + calib.samples.astype("<f8").tobytes())
    else:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            for sample in calib.samples:
                writer.writerow([repr(float(v)) for v in sample])
    logger.info(f"Wrote {len(calib)} calibration samples to {path}")
