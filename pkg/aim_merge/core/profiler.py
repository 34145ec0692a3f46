"""
Saliency profiling of a base model over a calibration set.

Two profile kinds are produced:
- ActivationProfile: per linear layer, the mean |x_i| of every input channel,
  normalized by the layer maximum (the diagonal of A_pre).
- SensitivityProfile: per parameter tensor, the mean |dH/dtheta| of the entropy
  of the output distribution, normalized by the tensor maximum (G_pre).

A layer or tensor whose raw statistic is all zero gets an all-zero profile.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping, Optional, Union

import numpy as np
from pydantic import ValidationError as PydanticValidationError

from aim_merge.core.calibration import CalibrationSet
from aim_merge.core.errors import InputError, ProfileError
from aim_merge.core.models import ModelSpec, ProfileDocument, ShapedValues
from aim_merge.core.parallel import parallel_map
from aim_merge.core.runtime import backward_entropy, check_params, forward
from aim_merge.core.tensors import Checkpoint

logger = logging.getLogger(__name__)


def normalize_saliency(raw: np.ndarray) -> np.ndarray:
    """Divide by the maximum; an all-zero input stays all zero."""
    raw = np.abs(np.asarray(raw, dtype=np.float64))
    peak = raw.max() if raw.size else 0.0
    if peak == 0.0:
        return np.zeros_like(raw)
    return raw / peak


def _check_profile_values(name: str, values: np.ndarray) -> np.ndarray:
    values = np.array(values, dtype=np.float64, copy=True)
    if values.size == 0:
        raise ProfileError(f"profile entry '{name}' is empty")
    if not np.all(np.isfinite(values)):
        raise ProfileError(f"profile entry '{name}' contains non-finite values")
    if values.min() < 0.0 or values.max() > 1.0:
        raise ProfileError(
            f"profile entry '{name}' has values outside [0, 1] "
            f"(min {values.min()!r}, max {values.max()!r})"
        )
    if values.max() != 1.0 and np.any(values != 0.0):
        raise ProfileError(f"profile entry '{name}' must have maximum 1.0 or be all zeros")
    values.setflags(write=False)
    return values


@dataclass(frozen=True, eq=False)
class ActivationProfile:
    layers: Mapping[str, np.ndarray]
    model_spec_id: str = ""
    sample_count: int = 0
    source_id: str = ""
    kind = "activation"

    def __post_init__(self):
        layers = {name: _check_profile_values(name, self.layers[name]) for name in sorted(self.layers)}
        for name, values in layers.items():
            if values.ndim != 1:
                raise ProfileError(f"activation profile for '{name}' must be a vector")
        object.__setattr__(self, "layers", layers)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ActivationProfile):
            return NotImplemented
        return (
            (self.model_spec_id, self.sample_count, self.source_id)
            == (other.model_spec_id, other.sample_count, other.source_id)
            and list(self.layers) == list(other.layers)
            and all(np.array_equal(self.layers[n], other.layers[n]) for n in self.layers)
        )

    def check_spec(self, spec: ModelSpec) -> None:
        """The profile must cover exactly the linear layers of ``spec`` with matching widths."""
        expected = {layer.name: layer.in_dim for layer in spec.layers}
        if set(self.layers) != set(expected):
            raise ProfileError(
                f"profile layers {sorted(self.layers)} do not match model layers {sorted(expected)}"
            )
        for name, width in expected.items():
            if self.layers[name].shape != (width,):
                raise ProfileError(
                    f"profile for '{name}' has {self.layers[name].size} channels, layer has {width}"
                )


@dataclass(frozen=True, eq=False)
class SensitivityProfile:
    tensors: Mapping[str, np.ndarray]
    model_spec_id: str = ""
    sample_count: int = 0
    source_id: str = ""
    kind = "sensitivity"

    def __post_init__(self):
        tensors = {name: _check_profile_values(name, self.tensors[name]) for name in sorted(self.tensors)}
        object.__setattr__(self, "tensors", tensors)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SensitivityProfile):
            return NotImplemented
        return (
            (self.model_spec_id, self.sample_count, self.source_id)
            == (other.model_spec_id, other.sample_count, other.source_id)
            and list(self.tensors) == list(other.tensors)
            and all(
                self.tensors[n].shape == other.tensors[n].shape
                and np.array_equal(self.tensors[n], other.tensors[n])
                for n in self.tensors
            )
        )


Profile = Union[ActivationProfile, SensitivityProfile]


def _validate_inputs(spec: ModelSpec, base: Checkpoint, calib: CalibrationSet) -> None:
    if len(calib) == 0:
        raise InputError("calibration set is empty")
    check_params(spec, base)
    calib.check_input_dim(spec.input_dim)


def mean_abs_activations(
    spec: ModelSpec, base: Checkpoint, calib: CalibrationSet, threads: Optional[int] = None
) -> Dict[str, np.ndarray]:
    """Mean over samples of |x| fed into every linear layer, before normalization."""
    _validate_inputs(spec, base, calib)
    traces = parallel_map(lambda sample: forward(spec, base, sample), calib.samples, threads)

    totals = {layer.name: np.zeros(layer.in_dim) for layer in spec.layers}
    for trace in traces:
        for name in totals:
            totals[name] += np.abs(trace.inputs[name])
    return {name: total / len(calib) for name, total in totals.items()}


def profile_activations(
    spec: ModelSpec, base: Checkpoint, calib: CalibrationSet, threads: Optional[int] = None
) -> ActivationProfile:
    means = mean_abs_activations(spec, base, calib, threads)
    layers = {}
    for name, mean in means.items():
        layers[name] = normalize_saliency(mean)
        if not layers[name].any():
            logger.warning(f"Layer '{name}' saw all-zero activations; it gets no relaxation")
        logger.debug(f"Layer '{name}': peak mean |x| {mean.max():.6g}")

    logger.info(f"Profiled activations of {len(layers)} layers over {len(calib)} samples")
    return ActivationProfile(layers, spec.spec_id, len(calib), calib.source_id)


def mean_abs_gradients(
    spec: ModelSpec, base: Checkpoint, calib: CalibrationSet, threads: Optional[int] = None
) -> Dict[str, np.ndarray]:
    """Mean over samples of |dH/dtheta| for every parameter tensor, before normalization."""
    _validate_inputs(spec, base, calib)
    grads = parallel_map(lambda sample: backward_entropy(spec, base, sample), calib.samples, threads)

    totals = {name: np.zeros(shape) for name, shape in spec.parameter_shapes().items()}
    for grad in grads:
        for name in totals:
            totals[name] += np.abs(grad[name])
    return {name: total / len(calib) for name, total in totals.items()}


def profile_sensitivity(
    spec: ModelSpec, base: Checkpoint, calib: CalibrationSet, threads: Optional[int] = None
) -> SensitivityProfile:
    means = mean_abs_gradients(spec, base, calib, threads)
    tensors = {}
    for name, mean in means.items():
        tensors[name] = normalize_saliency(mean)
        if not tensors[name].any():
            logger.warning(f"Tensor '{name}' has all-zero gradients; it gets no relaxation")

    logger.info(f"Profiled gradient sensitivity of {len(tensors)} tensors over {len(calib)} samples")
    return SensitivityProfile(tensors, spec.spec_id, len(calib), calib.source_id)


def profile_similarity(a: ActivationProfile, b: ActivationProfile) -> Dict[str, float]:
    """Per-layer cosine similarity between two activation profiles of the same model."""
    if set(a.layers) != set(b.layers):
        raise ProfileError("profiles cover different layers")
    similarities = {}
    for name in a.layers:
        u, v = a.layers[name], b.layers[name]
        norm = np.linalg.norm(u) * np.linalg.norm(v)
        if norm == 0.0:
            similarities[name] = 1.0 if not (u.any() or v.any()) else 0.0
        else:
            similarities[name] = float(np.dot(u, v) / norm)
    return similarities


# ============================================================================
# JSON persistence
# ============================================================================

def profile_to_document(profile: Profile) -> ProfileDocument:
    if isinstance(profile, ActivationProfile):
        return ProfileDocument(
            kind="activation",
            model_spec_id=profile.model_spec_id,
            sample_count=profile.sample_count,
            source_id=profile.source_id,
            layers={name: values.tolist() for name, values in profile.layers.items()},
        )
    return ProfileDocument(
        kind="sensitivity",
        model_spec_id=profile.model_spec_id,
        sample_count=profile.sample_count,
        source_id=profile.source_id,
        tensors={
            name: ShapedValues(shape=list(values.shape), values=values.ravel().tolist())
            for name, values in profile.tensors.items()
        },
    )


def profile_from_document(doc: ProfileDocument) -> Profile:
    if doc.kind == "activation":
        return ActivationProfile(
            {name: np.array(values, dtype=np.float64) for name, values in doc.layers.items()},
            doc.model_spec_id,
            doc.sample_count,
            doc.source_id,
        )
    tensors = {}
    for name, entry in doc.tensors.items():
        if not entry.shape or int(np.prod(entry.shape)) != len(entry.values):
            raise ProfileError(f"profile tensor '{name}' shape {entry.shape} does not fit {len(entry.values)} values")
        tensors[name] = np.array(entry.values, dtype=np.float64).reshape(entry.shape)
    return SensitivityProfile(tensors, doc.model_spec_id, doc.sample_count, doc.source_id)


def save_profile(profile: Profile, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = profile_to_document(profile).model_dump(mode="json", exclude_none=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    logger.info(f"Wrote {profile.kind} profile to {path}")


def load_profile(path: Path) -> Profile:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"profile file not found: {path}")
    try:
        doc = ProfileDocument.model_validate_json(path.read_text(encoding="utf-8"))
    except PydanticValidationError as e:
        raise ProfileError(f"{path}: malformed profile: {e}") from e
    except (OSError, UnicodeDecodeError) as e:
        raise InputError(f"{path}: cannot read profile: {e}") from e
    profile = profile_from_document(doc)
    logger.info(f"Loaded {profile.kind} profile from {path}")
    return profile
