"""
Pareto filtering, exact hypervolume and HV Gain over benchmark score vectors.

Scores are maximized in every coordinate and the reference point is the origin.
"""

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from aim_merge.core.errors import InputError, ScoreTableError, ShapeMismatchError
from aim_merge.core.models import HVReport

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoreTable:
    """Rows of normalized scores in [0, 1], keyed by model name in file order."""

    benchmarks: List[str]
    rows: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def dimensions(self) -> int:
        return len(self.benchmarks)

    @property
    def names(self) -> List[str]:
        return list(self.rows)

    def vector(self, name: str) -> np.ndarray:
        if name not in self.rows:
            raise InputError(f"unknown model '{name}' in score table (known: {', '.join(self.rows)})")
        return self.rows[name]

    def points(self, names: Sequence[str]) -> np.ndarray:
        if not names:
            return np.zeros((0, self.dimensions))
        return np.stack([self.vector(name) for name in names])


def load_scores(path: Path) -> ScoreTable:
    """
    Read a score CSV with header ``model,<bench1>,...``.

    When any value exceeds 1 the whole table is read as percentages and divided by 100.
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"score file not found: {path}")
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise InputError(f"{path}: cannot read score table: {e}") from e
    return parse_scores(text, str(path))


def parse_scores(text: str, source: str = "<scores>") -> ScoreTable:
    lines = [row for row in csv.reader(io.StringIO(text)) if row and any(cell.strip() for cell in row)]
    if not lines:
        raise ScoreTableError(f"{source}: score table is empty")

    header = [cell.strip() for cell in lines[0]]
    if len(header) < 2 or header[0].lower() != "model":
        raise ScoreTableError(f"{source}: header must be 'model,<benchmark>,...', got {','.join(header)}")
    benchmarks = header[1:]

    names: List[str] = []
    values: List[List[float]] = []
    for line_no, row in enumerate(lines[1:], start=2):
        if len(row) != len(header):
            raise ScoreTableError(f"{source}:{line_no}: expected {len(header)} cells, got {len(row)}")
        name = row[0].strip()
        if not name:
            raise ScoreTableError(f"{source}:{line_no}: empty model name")
        if name in names:
            raise ScoreTableError(f"{source}:{line_no}: duplicate model '{name}'")
        try:
            scores = [float(cell) for cell in row[1:]]
        except ValueError as e:
            raise ScoreTableError(f"{source}:{line_no}: non-numeric score: {e}") from e
        for bench, score in zip(benchmarks, scores):
            if not np.isfinite(score) or score < 0.0 or score > 100.0:
                raise ScoreTableError(f"{source}:{line_no}: score {score!r} for '{bench}' is outside [0, 100]")
        names.append(name)
        values.append(scores)

    if not names:
        raise ScoreTableError(f"{source}: score table has no rows")

    matrix = np.array(values, dtype=np.float64)
    if np.any(matrix > 1.0):
        logger.debug(f"{source}: scores read as percentages")
        matrix = matrix / 100.0

    table = ScoreTable(benchmarks, {name: matrix[i] for i, name in enumerate(names)})
    logger.info(f"Loaded {len(names)} score rows over {len(benchmarks)} benchmarks from {source}")
    return table


# ============================================================================
# Pareto dominance
# ============================================================================

def non_dominated_mask(points: np.ndarray) -> np.ndarray:
    """True for rows that no other row weakly dominates with at least one strict improvement."""
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    # ge[j, i]: row j >= row i in every coordinate
    ge = np.all(points[:, None, :] >= points[None, :, :], axis=2)
    gt = np.any(points[:, None, :] > points[None, :, :], axis=2)
    return ~np.any(ge & gt, axis=0)


def pareto_filter(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return points[non_dominated_mask(points)]


# ============================================================================
# Hypervolume
# ============================================================================

def _hv_2d(points: np.ndarray) -> float:
    order = np.lexsort((-points[:, 1], -points[:, 0]))
    volume, top = 0.0, 0.0
    for x, y in points[order]:
        if y > top:
            volume += x * (y - top)
            top = y
    return volume


def _hv_sweep(points: np.ndarray) -> float:
    n, d = points.shape
    if n == 0:
        return 0.0
    if d == 1:
        return float(points[:, 0].max())
    if d == 2:
        return _hv_2d(points)

    # Slab between consecutive last coordinates is dominated by the points above it.
    points = points[np.argsort(-points[:, -1], kind="stable")]
    volume = 0.0
    for k in range(n):
        upper = points[k, -1]
        lower = points[k + 1, -1] if k + 1 < n else 0.0
        height = upper - lower
        if height <= 0.0:
            continue
        projected = np.unique(points[: k + 1, :-1], axis=0)
        volume += height * _hv_sweep(pareto_filter(projected))
    return volume


def hypervolume(points: np.ndarray, reference: Optional[np.ndarray] = None) -> float:
    """
    Exact Lebesgue measure of the union of boxes [reference, p].

    Args:
        points: Array [n, d] of score vectors
        reference: Reference point, the origin when omitted

    Returns:
        Dominated hypervolume (0.0 for an empty set)
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.size == 0:
        return 0.0
    d = points.shape[1]
    reference = np.zeros(d) if reference is None else np.asarray(reference, dtype=np.float64)
    if reference.shape != (d,):
        raise ShapeMismatchError(reference.shape, (d,), "reference point")
    shifted = points - reference
    if not np.all(np.isfinite(shifted)):
        raise InputError("hypervolume points must be finite")
    if np.any(shifted < 0.0):
        raise InputError("hypervolume points must dominate the reference point")
    front = pareto_filter(np.unique(shifted, axis=0))
    return _hv_sweep(front)


def hv_gain(population: np.ndarray, merged: np.ndarray) -> float:
    """d-th root of the hypervolume added by ``merged`` to the population's front."""
    population = np.asarray(population, dtype=np.float64)
    merged = np.asarray(merged, dtype=np.float64)
    d = merged.shape[-1]
    if population.size and population.shape[1] != d:
        raise ShapeMismatchError(population.shape[1:], merged.shape, "merged score vector")
    population = population.reshape(-1, d)
    base_volume = hypervolume(population)
    merged_volume = hypervolume(np.vstack([population, merged[None, :]]))
    return max(merged_volume - base_volume, 0.0) ** (1.0 / d)


def hv_gain_rel_change(gain: float, reference_gain: float) -> Optional[float]:
    """(gain - reference) / reference; None when the reference gain is zero."""
    if reference_gain == 0.0:
        return None
    return (gain - reference_gain) / reference_gain


def percent_change(value: float, reference: float) -> Optional[float]:
    if reference == 0.0:
        return None
    return 100.0 * (value - reference) / reference


def resolve_population(
    table: ScoreTable, population: Sequence[str], include_base: bool = False, base_name: str = "Base"
) -> List[str]:
    names = list(dict.fromkeys(population))
    if include_base and base_name not in names:
        names.insert(0, base_name)
    if not names:
        raise InputError("population is empty")
    for name in names:
        table.vector(name)
    return names


def hv_report(
    table: ScoreTable,
    population: Sequence[str],
    merged: str,
    include_base: bool = False,
    base_name: str = "Base",
    compare: Optional[str] = None,
) -> HVReport:
    """HV of the population front, HV with the merged row, the gain, and optional per-benchmark changes."""
    names = resolve_population(table, population, include_base, base_name)
    points = table.points(names)
    merged_vector = table.vector(merged)

    hv_base = hypervolume(points)
    hv_with = hypervolume(np.vstack([points, merged_vector]))
    gain = hv_gain(points, merged_vector)

    candidates = names + ([merged] if merged not in names else [])
    mask = non_dominated_mask(table.points(candidates))
    front = sorted(name for name, keep in zip(candidates, mask) if keep)

    changes = None
    if compare is not None:
        compare_vector = table.vector(compare)
        changes = {
            bench: percent_change(float(merged_vector[i]), float(compare_vector[i]))
            for i, bench in enumerate(table.benchmarks)
        }
        compare_gain = hv_gain(points, compare_vector)
        rel = hv_gain_rel_change(gain, compare_gain)
        changes["hv_gain"] = None if rel is None else 100.0 * rel

    logger.info(f"HV gain of '{merged}' over {len(names)} models: {gain:.6f}")
    return HVReport(
        hv_base=hv_base,
        hv_with_merged=hv_with,
        hv_gain=gain,
        dimensions=table.dimensions,
        merged=merged,
        population=names,
        pareto_front=front,
        changes=changes,
    )
