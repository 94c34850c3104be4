"""Run configuration: one YAML file, every field defaulted, unknown keys rejected."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ToyParams(_Strict):
    num_layers: int = 6
    encoding_layer: int = 3
    margin: float = 60.0


class BackendConfig(_Strict):
    kind: Literal["toy", "real"] = "toy"
    model_name: Optional[str] = None
    context_limit: Optional[int] = None
    device: str = "cpu"
    dtype: Optional[str] = None
    toy: ToyParams = Field(default_factory=ToyParams)

    @model_validator(mode="after")
    def _needs_name(self):
        if self.kind == "real" and not self.model_name:
            raise ValueError("backend.kind 'real' needs backend.model_name")
        return self


class ClientConfig(_Strict):
    mode: Literal["live", "record", "replay"] = "replay"
    fixtures: Optional[str] = None
    endpoint: Optional[str] = None
    model: Optional[str] = None
    token_env: str = "TASKVEC_API_TOKEN"
    timeout: float = 60.0
    label: Optional[str] = None


class JudgeConfig(_Strict):
    kind: Literal["oracle", "llm"] = "oracle"
    client: ClientConfig = Field(default_factory=ClientConfig)
    max_retries: int = Field(2, ge=0)


class TemplateConfig(_Strict):
    pair_format: str = "{input} {separator} {output}"
    separator: str = "->"
    pair_joiner: str = "\n"
    query_format: str = "{input} {separator}"


class GenerationConfig(_Strict):
    max_tokens: int = Field(128, ge=1)
    stop_tokens: list[str] = Field(default_factory=lambda: ["\n"])


class RegionConfig(_Strict):
    r1_boost_min: float = 4.0
    r1_deficit_max: float = 2.0
    r2_boost_max: float = 1.0
    r2_deficit_min: float = 4.0


class PipelineConfig(_Strict):
    source: Optional[str] = None
    generator: ClientConfig = Field(default_factory=ClientConfig)
    num_examples: int = Field(30, ge=30, le=50)
    keep: int = 30
    batch_size: int = Field(20, ge=1)
    attempts: int = Field(3, ge=1)
    base_delay: float = 0.5


class CompositionalConfig(_Strict):
    n_pairs: int = Field(100, ge=1)
    grid_pairs: int = Field(1, ge=1)
    seed: int = 0


class RunConfig(_Strict):
    backend: BackendConfig = Field(default_factory=BackendConfig)
    judge: JudgeConfig = Field(default_factory=JudgeConfig)
    template: TemplateConfig = Field(default_factory=TemplateConfig)
    generation: GenerationConfig = Field(default_factory=GenerationConfig)
    # "toy" selects the built-in letter tasks; anything else is a bundle path
    dataset: str = "toy"
    tasks: Optional[int] = Field(None, ge=1)
    layers: Optional[list[int]] = None
    # None: the toy's encoding layer, or 15 on a real model
    layer: Optional[int] = None
    episodes_per_task: int = Field(10, ge=1)
    k_shots: int = Field(7, ge=1)
    seed: int = 0
    output_dir: str = "runs"
    regions: RegionConfig = Field(default_factory=RegionConfig)
    failure_threshold: float = Field(0.10, ge=0.0, le=1.0)
    workers: int = Field(1, ge=1)
    pipeline: PipelineConfig = Field(default_factory=PipelineConfig)
    compositional: CompositionalConfig = Field(default_factory=CompositionalConfig)


def load_config(path: str | Path | None) -> tuple[RunConfig, str]:
    """Parse a config file, returning the model and the raw text it came from."""
    if path is None:
        return RunConfig(), ""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config top level must be a mapping")
    try:
        return RunConfig.model_validate(data), text
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def apply_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """Return a copy with dotted-path overrides (``{"judge.kind": "llm"}``) applied."""
    data = cfg.model_dump()
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = data
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node[p]
        node[leaf] = value
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(), sort_keys=True, allow_unicode=True)


__all__ = ["ConfigError", "RunConfig", "apply_overrides", "dump_config", "load_config"]
