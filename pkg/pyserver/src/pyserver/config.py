"""Serving configuration: which checkpoints, in which roles, where to bind.

A config names at most one policy checkpoint (answers /v1/logprobs and
/v1/rollout) and at most one reward checkpoint (answers /v1/reward, with
the bounds every score is clamped into).  At least one model must be
served; when both are, their tokenizers must agree, because the protocol
speaks a single vocabulary per endpoint.
"""

from __future__ import annotations

from typing import Literal

import yaml
from pydantic import (BaseModel, ConfigDict, Field, ValidationError,
                      model_validator)

from .errors import ServerConfigError


class ModelSpec(BaseModel):
    """One checkpoint to serve in one role."""

    model_config = ConfigDict(extra="forbid")

    checkpoint: str
    role: Literal["policy", "reward"]
    bounds: tuple[float, float] | None = None
    device: str = "cpu"
    dtype: Literal["float32", "float64", "float16"] = "float32"

    @model_validator(mode="after")
    def _role_rules(self) -> "ModelSpec":
        if self.role == "reward":
            if self.bounds is None:
                raise ValueError("reward role requires declared bounds")
            lo, hi = self.bounds
            if not lo < hi:
                raise ValueError(
                    f"bounds must satisfy lo < hi, got [{lo}, {hi}]")
        elif self.bounds is not None:
            raise ValueError("policy role must not declare reward bounds")
        return self


class ServerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    host: str = "127.0.0.1"
    port: int = Field(default=8600, ge=0, le=65535)
    models: list[ModelSpec] = Field(min_length=1)

    @model_validator(mode="after")
    def _one_per_role(self) -> "ServerConfig":
        for role in ("policy", "reward"):
            if sum(1 for m in self.models if m.role == role) > 1:
                raise ValueError(f"at most one {role} model may be served")
        return self

    def by_role(self, role: str) -> ModelSpec | None:
        for spec in self.models:
            if spec.role == role:
                return spec
        return None


def _format_validation_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"  {loc}: {err['msg']}")
    return "\n".join(lines)


def load_config(path: str) -> ServerConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ServerConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ServerConfigError(f"config is not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ServerConfigError(
            f"config root must be a mapping, got {type(raw).__name__}")
    try:
        return ServerConfig.model_validate(raw)
    except ValidationError as exc:
        raise ServerConfigError(
            "invalid config:\n" + _format_validation_error(exc)) from None
