"""
Activation-informed relaxation of a merge delta.

theta = theta_pre + (1 - s * (1 - omega)) * delta, where s is the saliency of the
input channel (activation variant, applied to weight rows) or of the individual
parameter (sensitivity variant, applied elementwise). Tensors without saliency
information keep their full delta.
"""

import logging
from typing import Optional

import numpy as np

from aim_merge.core.errors import CompatibilityError, ProfileError, RelaxationError, ShapeMismatchError
from aim_merge.core.models import ModelSpec
from aim_merge.core.parallel import parallel_map
from aim_merge.core.profiler import ActivationProfile, Profile, SensitivityProfile
from aim_merge.core.tensors import Checkpoint, as_tensor, checkpoint_compat_check

logger = logging.getLogger(__name__)


def _check_unit(value, label: str) -> None:
    values = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(values)) or values.min(initial=0.0) < 0.0 or values.max(initial=0.0) > 1.0:
        raise RelaxationError(f"{label} must be in [0, 1], got {value!r}")


def relaxation_factor(saliency, omega: float):
    """
    1 - s(1 - omega). Works on scalars and arrays; the result lies in [omega, 1].

    Args:
        saliency: Normalized saliency in [0, 1]
        omega: Relaxation factor in [0, 1]; 1 means no relaxation
    """
    _check_unit(omega, "omega")
    _check_unit(saliency, "saliency")
    factor = 1.0 - np.asarray(saliency, dtype=np.float64) * (1.0 - float(omega))
    return float(factor) if np.ndim(factor) == 0 else factor


def _check_spec_id(profile: Profile, spec: ModelSpec) -> None:
    if profile.model_spec_id and profile.model_spec_id != spec.spec_id:
        raise ProfileError(f"profile was built for model {profile.model_spec_id}, not {spec.spec_id}")


def _check_delta(base: Checkpoint, delta: Checkpoint) -> None:
    report = checkpoint_compat_check(base, delta)
    if not report.is_compatible:
        raise CompatibilityError(report, "base and delta")


def _apply(base: Checkpoint, delta: Checkpoint, factors, threads: Optional[int], omega: float) -> Checkpoint:
    """base + factor * delta per tensor. ``factors`` maps a tensor name to a broadcastable array or None."""

    def relax_tensor(name: str) -> np.ndarray:
        factor = factors.get(name)
        if factor is None:
            return as_tensor(base[name] + delta[name], name=name)
        return as_tensor(base[name] + factor * delta[name], name=name)

    names = base.names
    tensors = dict(zip(names, parallel_map(relax_tensor, names, threads)))
    meta = {**base.meta, "merge_method": delta.meta.get("method", ""), "omega": repr(float(omega))}
    return Checkpoint(tensors, meta)


def relax_activation(
    base: Checkpoint,
    delta: Checkpoint,
    profile: ActivationProfile,
    spec: Optional[ModelSpec],
    omega: float,
    threads: Optional[int] = None,
) -> Checkpoint:
    """
    Scale row i of every layer weight delta by 1 - a_i(1 - omega).

    Without a spec, layer weights are located by the profile's layer names
    (``<layer>.weight``), and their row count must match the profile width.
    """
    _check_unit(omega, "omega")
    if spec is not None:
        _check_spec_id(profile, spec)
        profile.check_spec(spec)
    _check_delta(base, delta)

    factors = {}
    for layer_name, saliency in profile.layers.items():
        weight_name = f"{layer_name}.weight"
        if weight_name not in delta:
            raise ProfileError(f"delta has no weight tensor for profiled layer '{layer_name}'")
        weight = delta[weight_name]
        if weight.ndim != 2 or weight.shape[0] != saliency.size:
            raise ShapeMismatchError(weight.shape, (saliency.size, *weight.shape[1:]), weight_name)
        factors[weight_name] = relaxation_factor(saliency, omega)[:, None]

    logger.info(f"Relaxing {len(factors)} layer weights with omega={omega}")
    return _apply(base, delta, factors, threads, omega)


def relax_sensitivity(
    base: Checkpoint,
    delta: Checkpoint,
    profile: SensitivityProfile,
    omega: float,
    threads: Optional[int] = None,
) -> Checkpoint:
    """Scale every delta entry by 1 - g(1 - omega); tensors absent from the profile pass through."""
    _check_unit(omega, "omega")
    _check_delta(base, delta)

    factors = {}
    for name, saliency in profile.tensors.items():
        if name not in delta:
            logger.debug(f"Profile tensor '{name}' has no delta counterpart")
            continue
        if saliency.shape != delta[name].shape:
            raise ShapeMismatchError(saliency.shape, delta[name].shape, name)
        factors[name] = relaxation_factor(saliency, omega)

    logger.info(f"Relaxing {len(factors)} of {len(delta)} tensors by gradient sensitivity with omega={omega}")
    return _apply(base, delta, factors, threads, omega)


def relax(
    base: Checkpoint,
    delta: Checkpoint,
    profile: Profile,
    omega: float,
    spec: Optional[ModelSpec] = None,
    threads: Optional[int] = None,
) -> Checkpoint:
    """Dispatch on the profile kind."""
    if isinstance(profile, ActivationProfile):
        return relax_activation(base, delta, profile, spec, omega, threads)
    if spec is not None:
        _check_spec_id(profile, spec)
    return relax_sensitivity(base, delta, profile, omega, threads)
