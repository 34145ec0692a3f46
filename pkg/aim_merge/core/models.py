import hashlib
import json
from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from aim_merge.core.errors import InputError

# ============================================================================
# Model architecture
# ============================================================================

class Activation(str, Enum):
    RELU = "relu"
    TANH = "tanh"
    IDENTITY = "identity"


class LayerSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = Field(..., min_length=1)
    in_dim: int = Field(..., gt=0)
    out_dim: int = Field(..., gt=0)
    has_bias: bool = False
    activation: Activation = Activation.IDENTITY

    @property
    def weight_name(self) -> str:
        return f"{self.name}.weight"

    @property
    def bias_name(self) -> str:
        return f"{self.name}.bias"


class ModelSpec(BaseModel):
    """Stack of linear layers; weights are stored [in_dim, out_dim] so that y = x @ W."""

    model_config = ConfigDict(extra="forbid")

    layers: List[LayerSpec] = Field(..., min_length=1)

    @model_validator(mode="after")
    def _check_chain(self) -> "ModelSpec":
        seen = set()
        for index, layer in enumerate(self.layers):
            if layer.name in seen:
                raise ValueError(f"duplicate layer name '{layer.name}'")
            seen.add(layer.name)
            if index and layer.in_dim != self.layers[index - 1].out_dim:
                raise ValueError(
                    f"layer '{layer.name}' in_dim {layer.in_dim} != "
                    f"previous out_dim {self.layers[index - 1].out_dim}"
                )
        return self

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def spec_id(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        for layer in self.layers:
            shapes[layer.weight_name] = (layer.in_dim, layer.out_dim)
            if layer.has_bias:
                shapes[layer.bias_name] = (layer.out_dim,)
        return dict(sorted(shapes.items()))


# ============================================================================
# Merge and relaxation settings
# ============================================================================

class MergeMethod(str, Enum):
    AVERAGE = "average"
    TASK_ARITHMETIC = "task_arithmetic"
    TIES = "ties"
    DARE_TA = "dare_ta"
    DARE_TIES = "dare_ties"
    DARE_AVERAGE = "dare_average"

    @property
    def uses_dare(self) -> bool:
        return self.value.startswith("dare_")


class MergeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    method: MergeMethod = MergeMethod.TASK_ARITHMETIC
    lambdas: Optional[List[float]] = Field(default=None, description="Per-expert weights, default 1.0 each")
    density: float = Field(default=0.5, gt=0.0, le=1.0, description="Fraction kept by the TIES trim")
    drop_rate: float = Field(default=0.5, ge=0.0, lt=1.0, description="DARE drop probability")
    seed: int = Field(default=0, ge=0, lt=2**64)

    def resolved_lambdas(self, expert_count: int) -> List[float]:
        if self.lambdas is None:
            return [1.0] * expert_count
        if len(self.lambdas) != expert_count:
            raise InputError(f"got {len(self.lambdas)} lambdas for {expert_count} experts")
        return list(self.lambdas)


class RelaxationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    omega: float = Field(default=0.4, ge=0.0, le=1.0)
    variant: Literal["activation", "sensitivity"] = "activation"


# ============================================================================
# File documents
# ============================================================================

class ShapedValues(BaseModel):
    shape: List[int]
    values: List[float]


class ProfileDocument(BaseModel):
    """On-disk form of an activation or sensitivity profile."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["activation", "sensitivity"]
    model_spec_id: str
    sample_count: int = Field(..., ge=0)
    source_id: str = ""
    layers: Optional[Dict[str, List[float]]] = None
    tensors: Optional[Dict[str, ShapedValues]] = None

    @model_validator(mode="after")
    def _check_kind_payload(self) -> "ProfileDocument":
        if self.kind == "activation" and self.layers is None:
            raise ValueError("activation profile needs 'layers'")
        if self.kind == "sensitivity" and self.tensors is None:
            raise ValueError("sensitivity profile needs 'tensors'")
        return self


class RunManifest(BaseModel):
    """Written next to every output. Holds nothing time-dependent."""

    command: str
    argv: List[str]
    config: Dict[str, Any]
    inputs: Dict[str, str] = Field(default_factory=dict, description="path -> sha256")
    outputs: Dict[str, str] = Field(default_factory=dict, description="path -> sha256")
    seed: Optional[int] = None
    tool_version: str


class HVReport(BaseModel):
    hv_base: float
    hv_with_merged: float
    hv_gain: float
    dimensions: int
    merged: str
    population: List[str]
    pareto_front: List[str]
    changes: Optional[Dict[str, Optional[float]]] = None
