"""
Tensor-level merge methods over task vectors (expert minus base).

All methods return a merge delta: a Checkpoint with the base's tensor names and
shapes. The merged model is base + delta.
"""

import logging
import math
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from aim_merge.core.errors import CompatibilityError, InputError, ShapeMismatchError
from aim_merge.core.models import MergeConfig, MergeMethod
from aim_merge.core.parallel import parallel_map
from aim_merge.core.rng import keyed_uniforms
from aim_merge.core.tensors import Checkpoint, checkpoint_compat_check, tensor_binary_op

logger = logging.getLogger(__name__)

DELTA_KIND = "delta"


def _per_tensor(names: Sequence[str], fn: Callable[[str], np.ndarray], threads: Optional[int]) -> Dict[str, np.ndarray]:
    names = list(names)
    return dict(zip(names, parallel_map(fn, names, threads)))


def _check_deltas(deltas: Sequence[Checkpoint], lambdas: Optional[Sequence[float]] = None) -> List[float]:
    if not deltas:
        raise InputError("at least one delta is required")
    reference = deltas[0]
    for index, delta in enumerate(deltas[1:], start=1):
        report = checkpoint_compat_check(reference, delta)
        if report.shape_mismatches:
            name, (left, right) = next(iter(report.shape_mismatches.items()))
            raise ShapeMismatchError(left, right, name)
        if not report.is_compatible:
            raise CompatibilityError(report, f"deltas 0 and {index}")
    if lambdas is None:
        return [1.0] * len(deltas)
    if len(lambdas) != len(deltas):
        raise InputError(f"got {len(lambdas)} lambdas for {len(deltas)} deltas")
    return [float(lam) for lam in lambdas]


def task_vectors(base: Checkpoint, experts: Sequence[Checkpoint], threads: Optional[int] = None) -> List[Checkpoint]:
    """Delta_i = theta_i - theta_pre for every expert."""
    deltas = []
    for index, expert in enumerate(experts):
        report = checkpoint_compat_check(base, expert)
        if not report.is_compatible:
            raise CompatibilityError(report, f"base and expert {index}")
        tensors = _per_tensor(base.names, lambda n: tensor_binary_op(expert[n], base[n], "sub", n), threads)
        deltas.append(Checkpoint(tensors, {"kind": DELTA_KIND, "expert_index": str(index)}))
    logger.info(f"Computed {len(deltas)} task vectors over {len(base)} tensors")
    return deltas


def merge_task_arithmetic(
    deltas: Sequence[Checkpoint], lambdas: Optional[Sequence[float]] = None, threads: Optional[int] = None
) -> Checkpoint:
    """sum_i lambda_i * Delta_i"""
    lambdas = _check_deltas(deltas, lambdas)

    def combine(name: str) -> np.ndarray:
        total = np.zeros_like(deltas[0][name])
        for lam, delta in zip(lambdas, deltas):
            total = total + lam * delta[name]
        return total

    tensors = _per_tensor(deltas[0].names, combine, threads)
    return Checkpoint(tensors, {"kind": DELTA_KIND, "method": MergeMethod.TASK_ARITHMETIC.value})


def merge_average(
    deltas: Sequence[Checkpoint], lambdas: Optional[Sequence[float]] = None, threads: Optional[int] = None
) -> Checkpoint:
    """(1/n) sum_i lambda_i * Delta_i"""
    summed = merge_task_arithmetic(deltas, lambdas, threads)
    count = float(len(deltas))
    return summed.map(lambda _, t: t / count, {"kind": DELTA_KIND, "method": MergeMethod.AVERAGE.value})


def dare_sparsify(delta: Checkpoint, drop_rate: float, seed: int, stream: int = 0, threads: Optional[int] = None) -> Checkpoint:
    """
    Drop each entry with probability ``drop_rate`` and rescale survivors by 1/(1 - drop_rate).

    Args:
        delta: Task vector to sparsify
        drop_rate: Drop probability p in [0, 1)
        seed: Run seed
        stream: Independent stream number, the expert index inside run_merge
    """
    if not 0.0 <= drop_rate < 1.0:
        raise InputError(f"drop_rate must be in [0, 1), got {drop_rate}")
    if drop_rate == 0.0:
        return delta
    # 1 - p in exact decimal arithmetic, so p=0.9 rescales by exactly 10.0
    scale = 1.0 / float(Fraction(1) - Fraction(repr(float(drop_rate))))

    def sparsify(name: str) -> np.ndarray:
        keep = keyed_uniforms(seed, stream, name, delta[name].shape) >= drop_rate
        return np.where(keep, delta[name] * scale, 0.0)

    tensors = _per_tensor(delta.names, sparsify, threads)
    return Checkpoint(tensors, {**delta.meta, "dare_drop_rate": repr(drop_rate), "dare_seed": str(seed)})


def trim_top_k(values: np.ndarray, density: float) -> np.ndarray:
    """Keep the ceil(density * K) largest-magnitude entries; ties go to the lower flat index."""
    flat = values.ravel()
    keep_count = math.ceil(round(density * flat.size, 9))
    if keep_count >= flat.size:
        return values.copy()
    order = np.argsort(-np.abs(flat), kind="stable")
    trimmed = np.zeros_like(flat)
    kept = order[:keep_count]
    trimmed[kept] = flat[kept]
    return trimmed.reshape(values.shape)


def ties_merge(
    deltas: Sequence[Checkpoint],
    lambdas: Optional[Sequence[float]] = None,
    density: float = 0.5,
    threads: Optional[int] = None,
) -> Checkpoint:
    """
    TIES merge: trim each task vector, elect a per-entry sign from the weighted sum,
    then average the weighted values that agree with the elected sign.
    """
    if not 0.0 < density <= 1.0:
        raise InputError(f"density must be in (0, 1], got {density}")
    lambdas = _check_deltas(deltas, lambdas)

    def combine(name: str) -> np.ndarray:
        weighted = np.stack([lam * trim_top_k(delta[name], density) for lam, delta in zip(lambdas, deltas)])
        elected = np.sign(weighted.sum(axis=0))
        agree = (np.sign(weighted) == elected) & (elected != 0.0) & (weighted != 0.0)
        count = agree.sum(axis=0)
        total = np.where(agree, weighted, 0.0).sum(axis=0)
        return np.where(count > 0, total / np.maximum(count, 1), 0.0)

    tensors = _per_tensor(deltas[0].names, combine, threads)
    return Checkpoint(tensors, {"kind": DELTA_KIND, "method": MergeMethod.TIES.value, "density": repr(density)})


def run_merge(
    base: Checkpoint, experts: Sequence[Checkpoint], config: MergeConfig, threads: Optional[int] = None
) -> Tuple[Checkpoint, Checkpoint]:
    """
    Merge experts into base.

    Returns:
        (delta, merged) where merged = base + delta
    """
    if not experts:
        raise InputError("at least one expert is required")
    method = MergeMethod(config.method)
    lambdas = config.resolved_lambdas(len(experts))
    deltas = task_vectors(base, experts, threads)

    if method.uses_dare:
        deltas = [
            dare_sparsify(delta, config.drop_rate, config.seed, stream=index, threads=threads)
            for index, delta in enumerate(deltas)
        ]

    if method in (MergeMethod.AVERAGE, MergeMethod.DARE_AVERAGE):
        merged_delta = merge_average(deltas, lambdas, threads)
    elif method in (MergeMethod.TASK_ARITHMETIC, MergeMethod.DARE_TA):
        merged_delta = merge_task_arithmetic(deltas, lambdas, threads)
    elif method in (MergeMethod.TIES, MergeMethod.DARE_TIES):
        merged_delta = ties_merge(deltas, lambdas, config.density, threads)
    else:
        raise InputError(f"unknown merge method '{method}'")

    meta = {
        "kind": DELTA_KIND,
        "method": method.value,
        "experts": str(len(experts)),
        "lambdas": ",".join(repr(lam) for lam in lambdas),
        "density": repr(config.density),
        "drop_rate": repr(config.drop_rate),
        "seed": str(config.seed),
    }
    merged_delta = Checkpoint(merged_delta.tensors, meta)
    merged = apply_delta(base, merged_delta, threads)
    logger.info(f"Merged {len(experts)} experts with {method.value}")
    return merged_delta, merged


def apply_delta(base: Checkpoint, delta: Checkpoint, threads: Optional[int] = None) -> Checkpoint:
    """theta_pre + delta"""
    report = checkpoint_compat_check(base, delta)
    if not report.is_compatible:
        raise CompatibilityError(report, "base and delta")
    tensors = _per_tensor(base.names, lambda n: tensor_binary_op(base[n], delta[n], "add", n), threads)
    return Checkpoint(tensors, {**base.meta, "merge_method": delta.meta.get("method", "")})
