"""
Run configuration, validated with pydantic.

A config file is JSON:

    {
      "seed": 7,
      "dataset": "data/adult.csv", "schema": "data/adult.schema.json",
      "out": "runs/adult",
      "methods": [{"name": "wachter", "params": {"gamma": 0.5}},
                  {"name": "ours", "params": {"alpha": 0.5}}],
      "references": 100, "count": 1, "k_ynn": 5, "workers": 4
    }

`synthetic` replaces dataset + schema with the built-in two-blob generator.
Paths are checked at validation time; a missing one is an ArtifactError, any
other invalid value a ConfigError. CLI flags are merged in as overrides before
validation, so a flag goes through exactly the same checks as the file.
"""

import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional

from pydantic import BaseModel, ConfigDict, Field, FilePath, ValidationError, field_validator, model_validator

from cf_utils.errors import ArtifactError, ConfigError
from cf_utils.generators import METHODS, MethodParams
from cf_utils.models import ACTIVATIONS, HIDDEN
from cf_utils.optim import LR, STEPS
from cf_utils.posterior import MIN_TARGET_PROB, RESTARTS

TRAIN_STEPS = 2000
REFERENCES = 100
K_YNN = 5


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class TrainSpec(_Strict):
    lr: float = Field(LR, gt=0)
    steps: int = Field(TRAIN_STEPS, ge=0)
    batch_size: Optional[int] = Field(None, ge=1)


class LaplaceSpec(_Strict):
    restarts: int = Field(RESTARTS, ge=1)
    lr: float = Field(LR, gt=0)
    steps: int = Field(STEPS, ge=0)
    min_target_prob: float = Field(MIN_TARGET_PROB, ge=0, le=1)


class SyntheticSpec(_Strict):
    """Two anisotropic Gaussian classes at ±separation/2 along the first axis."""
    n: int = Field(400, ge=4)
    dim: int = Field(2, ge=2)
    separation: float = Field(3.0, gt=0)
    stretch: float = Field(4.0, gt=0)   # variance along the long axis
    angle: float = 0.5                  # radians; rotation of the long axis in the first plane


class MethodSpec(_Strict):
    name: str
    params: Dict[str, Any] = Field(default_factory=dict)

    @field_validator("name")
    @classmethod
    def _known(cls, v: str) -> str:
        if v not in METHODS:
            raise ValueError(f"unknown method {v!r}; choose from {METHODS}")
        return v

    def method_params(self, **overrides) -> MethodParams:
        return MethodParams.from_mapping({**self.params, **overrides})

    @model_validator(mode="after")
    def _params_ok(self) -> "MethodSpec":
        self.method_params()
        return self


class RunConfig(_Strict):
    seed: int
    dataset: Optional[FilePath] = None
    schema_file: Optional[FilePath] = Field(None, alias="schema")
    model: Optional[FilePath] = None
    out: Path = Path("out")
    hidden: List[int] = Field(default_factory=lambda: list(HIDDEN))
    activation: str = "tanh"
    train: TrainSpec = Field(default_factory=TrainSpec)
    laplace: LaplaceSpec = Field(default_factory=LaplaceSpec)
    prior_mode: Literal["empirical", "schema"] = "empirical"
    prior_jitter: float = Field(1e-9, ge=0)
    data_noise: float = Field(0.0, ge=0)
    target: Optional[int] = Field(None, ge=0)
    count: int = Field(1, ge=1)
    references: int = Field(REFERENCES, ge=0)
    k_ynn: int = Field(K_YNN, ge=1)
    workers: int = Field(1, ge=1)
    timing: Literal["wall", "off"] = "off"
    methods: List[MethodSpec] = Field(default_factory=list)
    grid: Optional[Dict[str, List[float]]] = None
    synthetic: Optional[SyntheticSpec] = None

    @field_validator("activation")
    @classmethod
    def _activation(cls, v: str) -> str:
        if v not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {v!r}")
        return v

    @field_validator("hidden")
    @classmethod
    def _hidden(cls, v: List[int]) -> List[int]:
        if any(h < 1 for h in v):
            raise ValueError(f"hidden sizes must be >= 1, got {v}")
        return v

    @model_validator(mode="after")
    def _data_source(self) -> "RunConfig":
        if self.synthetic is None and self.dataset is None:
            raise ValueError("set either `dataset` (+ `schema`) or `synthetic`")
        if self.dataset is not None and self.schema_file is None:
            raise ValueError("`dataset` needs a `schema` file describing its columns")
        if self.grid:
            for key, values in self.grid.items():
                if not values:
                    raise ValueError(f"grid entry {key!r} is empty")
                MethodParams.from_mapping({key: values[0]})
        return self


def _raise_for(e: ValidationError, source: str):
    for err in e.errors():
        if err["type"] in ("path_not_file", "path_not_exists"):
            loc = ".".join(str(p) for p in err["loc"])
            raise ArtifactError(f"{source}: {loc} does not exist ({err.get('input')})") from None
    msgs = "; ".join(f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in e.errors())
    raise ConfigError(f"{source}: {msgs}") from None


def build_config(data: Mapping[str, Any], overrides: Optional[Mapping[str, Any]] = None,
                 source: str = "config") -> RunConfig:
    """Validate a mapping plus overrides (None-valued overrides are ignored)."""
    merged = dict(data)
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as e:
        _raise_for(e, source)


def load_config(path: str, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Read a JSON config; relative paths inside it resolve against its directory."""
    if not os.path.isfile(path):
        raise ArtifactError(f"config not found at {path}")
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    base = os.path.dirname(os.path.abspath(path))
    for key in ("dataset", "schema", "model"):
        if isinstance(data.get(key), str) and not os.path.isabs(data[key]):
            data[key] = os.path.join(base, data[key])
    return build_config(data, overrides, source=path)
