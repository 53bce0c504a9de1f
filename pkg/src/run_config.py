#!/usr/bin/env python3
"""
WAE-RNF - Run Configuration
Validated run settings with layered sources: field defaults, a key=value config
file, ``RNF_*`` environment variables and explicit overrides (CLI flags).
"""

import logging
import os
from typing import Dict, Literal, Mapping, Optional, Tuple

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from objectives import FLOW_OBJECTIVES, AnnealSchedule
from rnf import DEFAULT_BETA, DEFAULT_NUM_CLUSTERS, DEFAULT_SCALES
from rnf_utils import ConfigError

logger = logging.getLogger('run_config')

ENV_PREFIX = 'RNF_'

Objective = Literal['vae', 'vae-nf', 'wae', 'wae-nf', 'wae-rnf']


class RunConfig(BaseModel):
    """Everything one training/evaluation run needs."""

    model_config = ConfigDict(extra='forbid', frozen=True)

    # Objective and flows
    objective: Objective = 'wae-rnf'
    num_flows: int = Field(3, ge=0)
    num_clusters: int = Field(DEFAULT_NUM_CLUSTERS, ge=1)
    kernel: Literal['inverse-multiquadratic', 'gaussian', 'imq', 'rbf'] = 'inverse-multiquadratic'
    kernel_scales: Tuple[float, ...] = DEFAULT_SCALES
    kernel_beta: float = Field(DEFAULT_BETA, gt=0)
    kernel_regularized: bool = True

    # Architecture
    latent_dim: int = Field(32, ge=1)
    hidden: int = Field(200, ge=1)
    embed_dim: int = Field(200, ge=1)
    mlp_hidden: int = Field(200, ge=1)
    injection: Literal['init-state', 'init-state+concat'] = 'init-state+concat'
    dropout: float = Field(0.2, ge=0.0, lt=1.0)

    # Optimization
    epochs: int = Field(48, ge=0)
    steps_per_epoch: int = Field(2000, ge=1)
    batch_size: int = Field(32, ge=2)
    lr: float = Field(1e-3, gt=0)
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    clip_norm: float = Field(5.0, gt=0)

    # Annealing
    alpha_end: float = Field(0.8, ge=0)
    ramp_epochs: float = Field(21.0, gt=0)
    kl_weight: Optional[float] = Field(None, ge=0)

    # Cluster gathering
    clusters_path: Optional[str] = None
    pretrain_fraction: float = Field(0.25, ge=0, le=1)

    # Data
    data_dir: Optional[str] = None
    synthetic_sentences: int = Field(2000, ge=2)
    vocab_cap: int = Field(20000, ge=5)
    prefetch_depth: int = Field(2, ge=0)

    # Evaluation
    eval_batch_size: int = Field(64, ge=1)
    eval_train_size: int = Field(500, ge=1)
    mi_batch: int = Field(64, ge=2)
    mi_samples: int = Field(512, ge=100)

    # Seeds and paths
    seed: int = 0
    eval_seed: int = 1234
    checkpoint: Optional[str] = None
    out: str = 'runs/default'
    run_label: Optional[str] = None

    @field_validator('kernel_scales', mode='before')
    @classmethod
    def _split_scales(cls, value):
        if isinstance(value, str):
            value = [part for part in value.replace(' ', '').split(',') if part]
        return value

    @field_validator('kl_weight', 'clusters_path', 'data_dir', 'checkpoint', 'run_label', mode='before')
    @classmethod
    def _blank_is_none(cls, value):
        if isinstance(value, str) and value.strip().lower() in ('', 'none', 'null'):
            return None
        return value

    @model_validator(mode='after')
    def _check_objective(self) -> 'RunConfig':
        if self.objective in FLOW_OBJECTIVES and self.num_flows < 1:
            raise ValueError(f"objective '{self.objective}' needs num_flows >= 1")
        if self.kernel_scales and any(s <= 0 for s in self.kernel_scales):
            raise ValueError("kernel_scales must be positive")
        if self.objective == 'wae-rnf' and self.clusters_path is None and self.pretrain_fraction <= 0:
            raise ValueError("wae-rnf needs clusters_path or a pre-training phase (pretrain_fraction > 0)")
        return self

    @property
    def flow_count(self) -> int:
        return self.num_flows if self.objective in FLOW_OBJECTIVES else 0

    @property
    def run_name(self) -> str:
        return self.run_label or self.objective

    @property
    def pretrain_epochs(self) -> int:
        if self.objective != 'wae-rnf' or self.clusters_path is not None:
            return 0
        return max(1, int(round(self.pretrain_fraction * self.epochs)))

    def schedule(self) -> AnnealSchedule:
        return AnnealSchedule.for_objective(self.objective, self.kl_weight, self.alpha_end, self.ramp_epochs)

    def to_flat_dict(self) -> Dict[str, str]:
        """key=value strings, the inverse of the config file format."""
        flat = {}
        for key, value in self.model_dump().items():
            if value is None:
                flat[key] = ''
            elif isinstance(value, tuple):
                flat[key] = ','.join(repr(float(v)) for v in value)
            else:
                flat[key] = str(value)
        return flat


def _env_values(environ: Mapping[str, str]) -> Dict[str, str]:
    fields = set(RunConfig.model_fields)
    values = {}
    for key, value in environ.items():
        if key.startswith(ENV_PREFIX):
            name = key[len(ENV_PREFIX):].lower()
            if name in fields:
                values[name] = value
    return values


def _file_values(path: str) -> Dict[str, str]:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    raw = dotenv_values(path)
    values = {}
    for key, value in raw.items():
        name = key.lower()
        if name.startswith(ENV_PREFIX.lower()):
            name = name[len(ENV_PREFIX):]
        if name not in RunConfig.model_fields:
            raise ConfigError(f"{path}: unknown config key '{key}'")
        values[name] = '' if value is None else value
    return values


def load_run_config(config_path: Optional[str] = None,
                    overrides: Optional[Mapping[str, object]] = None,
                    environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """
    Merge config sources; later sources win.

    Args:
        config_path: Optional key=value file (dotenv syntax)
        overrides: Explicit values, e.g. CLI flags; None entries are ignored
        environ: Environment mapping (default: os.environ)

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: on unknown keys or invalid values
    """
    merged: Dict[str, object] = {}
    if config_path:
        merged.update(_file_values(config_path))
    merged.update(_env_values(os.environ if environ is None else environ))
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    try:
        cfg = RunConfig(**merged)
    except ValidationError as e:
        raise ConfigError(f"invalid run configuration: {e}") from e
    logger.debug(f"Run config: {cfg.model_dump()}")
    return cfg


def config_from_dict(values: Mapping[str, object]) -> RunConfig:
    try:
        return RunConfig(**dict(values))
    except ValidationError as e:
        raise ConfigError(f"invalid stored configuration: {e}") from e

