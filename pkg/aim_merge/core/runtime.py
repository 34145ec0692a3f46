"""
Deterministic feed-forward runtime: stacked linear layers with an elementwise
nonlinearity, forward traces for activation capture and reverse-mode gradients
of the softmax entropy of the final logits.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np
from pydantic import ValidationError as PydanticValidationError

from aim_merge.core.errors import InputError, ModelSpecError, ShapeMismatchError
from aim_merge.core.models import Activation, ModelSpec
from aim_merge.core.tensors import Checkpoint, as_tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ForwardTrace:
    """Per-layer inputs x (what multiplies the weight), pre-activations z, and final logits."""

    inputs: Dict[str, np.ndarray] = field(default_factory=dict)
    pre_activations: Dict[str, np.ndarray] = field(default_factory=dict)
    logits: np.ndarray = field(default_factory=lambda: np.zeros(0))


def load_model_spec(path: Path) -> ModelSpec:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"model spec file not found: {path}")
    try:
        return ModelSpec.model_validate_json(path.read_text(encoding="utf-8"))
    except PydanticValidationError as e:
        raise ModelSpecError(f"{path}: invalid model spec: {e}") from e
    except (OSError, UnicodeDecodeError) as e:
        raise InputError(f"{path}: cannot read model spec: {e}") from e


def save_model_spec(spec: ModelSpec, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(spec.model_dump(mode="json"), indent=2), encoding="utf-8")


def check_params(spec: ModelSpec, params: Checkpoint) -> None:
    """Raise unless ``params`` holds every tensor the model spec names with the right shape."""
    for name, shape in spec.parameter_shapes().items():
        if name not in params:
            raise ModelSpecError(f"checkpoint is missing tensor '{name}'")
        if params[name].shape != shape:
            raise ShapeMismatchError(params[name].shape, shape, name)


def _activate(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind == Activation.RELU:
        return np.maximum(z, 0.0)
    if kind == Activation.TANH:
        return np.tanh(z)
    return z


def _activation_grad(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind == Activation.RELU:
        return (z > 0.0).astype(np.float64)
    if kind == Activation.TANH:
        return 1.0 - np.tanh(z) ** 2
    return np.ones_like(z)


def forward(spec: ModelSpec, params: Checkpoint, x: np.ndarray) -> ForwardTrace:
    check_params(spec, params)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.input_dim,):
        raise ShapeMismatchError(x.shape, (spec.input_dim,), "model input")

    inputs, pre_activations = {}, {}
    h = x
    for layer in spec.layers:
        inputs[layer.name] = h
        z = h @ params[layer.weight_name]
        if layer.has_bias:
            z = z + params[layer.bias_name]
        pre_activations[layer.name] = z
        h = _activate(layer.activation, z)

    return ForwardTrace(inputs=inputs, pre_activations=pre_activations, logits=h)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits)
    return shifted - np.log(np.sum(np.exp(shifted)))


def entropy_loss(logits: np.ndarray) -> float:
    """H(softmax(logits)), clipped into [0, log K] against round-off."""
    logits = np.asarray(logits, dtype=np.float64)
    log_p = log_softmax(logits)
    p = np.exp(log_p)
    entropy = float(-np.sum(p * log_p))
    return min(max(entropy, 0.0), float(np.log(logits.size)))


def entropy_grad_logits(logits: np.ndarray) -> np.ndarray:
    """dH/dz_j = -p_j (log p_j + H)."""
    log_p = log_softmax(np.asarray(logits, dtype=np.float64))
    p = np.exp(log_p)
    entropy = -np.sum(p * log_p)
    return -p * (log_p + entropy)


def backward_entropy(spec: ModelSpec, params: Checkpoint, x: np.ndarray) -> Checkpoint:
    """Gradient of entropy_loss(forward(x).logits) with respect to every parameter tensor."""
    trace = forward(spec, params, x)
    grads = {}
    upstream = entropy_grad_logits(trace.logits)
    for layer in reversed(spec.layers):
        dz = upstream * _activation_grad(layer.activation, trace.pre_activations[layer.name])
        grads[layer.weight_name] = np.outer(trace.inputs[layer.name], dz)
        if layer.has_bias:
            grads[layer.bias_name] = dz
        upstream = params[layer.weight_name] @ dz

    return Checkpoint(grads, {"kind": "gradient", "model_spec_id": spec.spec_id})


def random_params(spec: ModelSpec, seed: int = 0, scale: float = 0.5) -> Checkpoint:
    """Gaussian parameters for toy experiments; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    tensors = {
        name: as_tensor(rng.normal(0.0, scale, size=shape), name=name)
        for name, shape in spec.parameter_shapes().items()
    }
    return Checkpoint(tensors, {"model_spec_id": spec.spec_id})
