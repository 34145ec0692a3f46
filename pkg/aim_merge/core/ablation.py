"""
Relaxation-factor and calibration-size sweeps.

At desk scale the metrics are either toy-task measurements on the relaxed model
(mean output entropy over the calibration set and mean squared logit distance to
the base model) or HV Gain recomputed from externally supplied scores.
"""

import csv
import io
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from aim_merge.core.aim import relax
from aim_merge.core.calibration import CalibrationSet
from aim_merge.core.errors import InputError
from aim_merge.core.evaluation import ScoreTable, hv_gain, hv_gain_rel_change, resolve_population
from aim_merge.core.models import ModelSpec
from aim_merge.core.parallel import parallel_map
from aim_merge.core.profiler import Profile, profile_activations, profile_similarity
from aim_merge.core.runtime import entropy_loss, forward
from aim_merge.core.tensors import Checkpoint

logger = logging.getLogger(__name__)

SweepRow = Dict[str, Optional[float]]


@dataclass(frozen=True)
class ToySetup:
    """A completed merge: base model, merged delta and the calibration inputs to score on."""

    spec: ModelSpec
    base: Checkpoint
    delta: Checkpoint
    calib: CalibrationSet


@dataclass(frozen=True)
class ScoreSetup:
    table: ScoreTable
    population: List[str]
    merged_template: str
    include_base: bool = False
    base_name: str = "Base"

    def merged_name(self, omega: float) -> str:
        try:
            return self.merged_template.format(omega=omega)
        except (IndexError, KeyError, ValueError) as e:
            raise InputError(f"merged-row template '{self.merged_template}' must use only {{omega}}: {e!r}") from e


def toy_metrics(spec: ModelSpec, base: Checkpoint, model: Checkpoint, calib: CalibrationSet, threads: Optional[int] = None) -> Dict[str, float]:
    """
    Mean entropy of the model's output distribution and mean squared logit
    distance to the base model over the calibration samples.
    """

    def measure(sample: np.ndarray):
        logits = forward(spec, model, sample).logits
        reference = forward(spec, base, sample).logits
        return entropy_loss(logits), float(np.sum((logits - reference) ** 2))

    results = parallel_map(measure, calib.samples, threads)
    entropies, shifts = zip(*results)
    return {"entropy_mean": float(np.mean(entropies)), "logit_shift": float(np.mean(shifts))}


def omega_sweep(
    omegas: Sequence[float],
    profile: Optional[Profile] = None,
    toy: Optional[ToySetup] = None,
    scores: Optional[ScoreSetup] = None,
    threads: Optional[int] = None,
) -> List[SweepRow]:
    """
    One row per omega.

    Toy columns need ``toy`` and ``profile``; score columns need ``scores``. At
    least one of the two must be given. ``hv_gain_rel_change`` is relative to the
    omega = 1.0 row and empty when that row is missing or has zero gain.
    """
    if toy is None and scores is None:
        raise InputError("omega sweep needs a merge setup with a profile, a score table, or both")
    if toy is not None and profile is None:
        raise InputError("omega sweep on a merge setup needs a profile")

    rows: List[SweepRow] = []
    gains: Dict[float, float] = {}
    population = None
    if scores is not None:
        names = resolve_population(scores.table, scores.population, scores.include_base, scores.base_name)
        population = scores.table.points(names)

    for omega in omegas:
        row: SweepRow = {"omega": float(omega)}
        if toy is not None:
            relaxed = relax(toy.base, toy.delta, profile, omega, toy.spec, threads)
            row.update(toy_metrics(toy.spec, toy.base, relaxed, toy.calib, threads))
        if scores is not None:
            gain = hv_gain(population, scores.table.vector(scores.merged_name(omega)))
            gains[float(omega)] = gain
            row["hv_gain"] = gain
        logger.debug(f"omega={omega}: {row}")
        rows.append(row)

    if scores is not None:
        reference = gains.get(1.0)
        for row in rows:
            row["hv_gain_rel_change"] = None if reference is None else hv_gain_rel_change(row["hv_gain"], reference)

    logger.info(f"Swept {len(rows)} omega values")
    return rows


def calib_size_sweep(
    spec: ModelSpec,
    base: Checkpoint,
    calib: CalibrationSet,
    sizes: Sequence[int],
    delta: Optional[Checkpoint] = None,
    omega: float = 0.4,
    threads: Optional[int] = None,
) -> List[SweepRow]:
    """
    Profile with the first k samples for every k and compare against the full-set profile.

    Sizes larger than the calibration set are clipped to it. When ``delta`` is
    given, the toy metrics of the model relaxed with each k-sample profile are added.
    """
    full = profile_activations(spec, base, calib, threads)
    clipped = []
    for size in sizes:
        if size < 1:
            raise InputError(f"calibration size must be positive, got {size}")
        if size > len(calib):
            logger.warning(f"Calibration size {size} exceeds the {len(calib)} available samples; clipped")
            size = len(calib)
        if size not in clipped:
            clipped.append(size)

    rows: List[SweepRow] = []
    for size in clipped:
        subset = calib.subset(size)
        profile = profile_activations(spec, base, subset, threads)
        similarity = list(profile_similarity(profile, full).values())
        row: SweepRow = {
            "calib_size": float(size),
            "min_cosine": float(min(similarity)),
            "mean_cosine": float(np.mean(similarity)),
        }
        if delta is not None:
            relaxed = relax(base, delta, profile, omega, spec, threads)
            row.update(toy_metrics(spec, base, relaxed, calib, threads))
        rows.append(row)

    logger.info(f"Swept {len(rows)} calibration sizes against a {len(calib)}-sample profile")
    return rows


def rows_to_csv(rows: List[SweepRow], decimals: int = 6) -> str:
    """Render sweep rows as CSV; missing values become empty cells."""
    if not rows:
        return ""
    columns = list(rows[0])
    for row in rows[1:]:
        columns.extend(key for key in row if key not in columns)

    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        cells = []
        for column in columns:
            value = row.get(column)
            if value is None:
                cells.append("")
            elif column == "calib_size":
                cells.append(str(int(value)))
            else:
                cells.append(f"{value:.{decimals}f}")
        writer.writerow(cells)
    return out.getvalue()
