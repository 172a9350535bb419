#!/usr/bin/env python3
"""
Configuration models for RHRSegNet experiments
Pydantic models with strict key checking, YAML loading and command-line overrides
"""

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from errors import InvalidConfig

load_dotenv()

CONFIG_VERSION = 1
DatasetLayout = Literal['cityscapes', 'darkzurich', 'nightcity', 'synthetic']


class StrictModel(BaseModel):
    """Base model rejecting unknown keys"""
    model_config = ConfigDict(extra='forbid', validate_assignment=True)


class RelightConfig(StrictModel):
    base_channels: int = Field(32, ge=1)
    num_res_blocks: int = Field(3, ge=0)
    zero_init_last: bool = True


class SegConfig(StrictModel):
    stem_channels: int = Field(64, ge=1)
    branch_channels: List[int] = [32, 64, 128, 256]
    blocks_per_branch: int = Field(2, ge=1)
    modules_per_stage: List[int] = [1, 1, 2, 1]
    head_mid_channels: int = Field(128, ge=1)
    num_classes: int = Field(19, ge=2)

    @field_validator('branch_channels')
    @classmethod
    def validate_branch_channels(cls, v):
        if len(v) != 4:
            raise ValueError('branch_channels must list exactly 4 counts')
        if any(c < 1 for c in v):
            raise ValueError('branch_channels must be positive')
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError('branch_channels must be strictly increasing')
        return v

    @field_validator('modules_per_stage')
    @classmethod
    def validate_modules_per_stage(cls, v):
        if len(v) != 4:
            raise ValueError('modules_per_stage must list exactly 4 counts')
        if any(m < 1 for m in v):
            raise ValueError('every stage needs at least one exchange module')
        return v


class AugConfig(StrictModel):
    crop_height: int = 512
    crop_width: int = 1024
    hflip_probability: float = Field(0.5, ge=0.0, le=1.0)
    scale_range: Tuple[float, float] = (0.75, 1.25)
    normalize_mean: Tuple[float, float, float] = (0.485, 0.456, 0.406)
    normalize_std: Tuple[float, float, float] = (0.229, 0.224, 0.225)

    @field_validator('crop_height', 'crop_width')
    @classmethod
    def validate_crop(cls, v):
        if v < 32 or v % 32 != 0:
            raise ValueError(f'crop size {v} must be a positive multiple of 32')
        return v

    @field_validator('scale_range')
    @classmethod
    def validate_scale_range(cls, v):
        if v[0] <= 0 or v[0] > v[1]:
            raise ValueError(f'scale_range {v} must satisfy 0 < min <= max')
        return v

    @field_validator('normalize_std')
    @classmethod
    def validate_std(cls, v):
        if any(s <= 0 for s in v):
            raise ValueError('normalize_std entries must be positive')
        return v


class AdaptConfig(StrictModel):
    adv_weight: float = Field(0.001, ge=0.0)
    disc_lr: float = Field(1e-4, gt=0.0)
    disc_channels: int = Field(64, ge=1)


class DatasetSpec(StrictModel):
    root: Path
    layout: DatasetLayout = 'cityscapes'
    train_split: str = 'train'
    val_split: str = 'val'


class TrainConfig(StrictModel):
    max_iterations: int = Field(200, ge=0)
    batch_size: int = Field(4, ge=1)
    base_lr: float = Field(0.01, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(5e-4, ge=0.0)
    poly_power: float = Field(0.9, ge=0.0)
    seed: int = Field(0, ge=0)
    relight_enabled: bool = True
    adaptation: Optional[AdaptConfig] = None
    source: DatasetSpec
    target: Optional[DatasetSpec] = None
    aug: AugConfig = AugConfig()
    eval_interval: int = Field(50, ge=1)
    eval_batch_size: int = Field(1, ge=1)
    eval_crop: Optional[Tuple[int, int]] = None
    workers: int = Field(0, ge=0)

    @field_validator('eval_crop')
    @classmethod
    def validate_eval_crop(cls, v):
        if v is not None and any(d < 32 or d % 32 for d in v):
            raise ValueError(f'eval_crop {v} must be positive multiples of 32')
        return v

    @model_validator(mode='after')
    def validate_adaptation(self):
        if self.adaptation is not None and self.target is None:
            raise ValueError('adaptation requires a target dataset')
        return self

    @model_validator(mode='after')
    def validate_batch_statistics(self):
        # train-mode BN on the 1/32 branch needs more than one value per channel
        coarse = self.batch_size * (self.aug.crop_height // 32) * (self.aug.crop_width // 32)
        if coarse < 2:
            raise ValueError(
                f'batch_size {self.batch_size} with a {self.aug.crop_height}x{self.aug.crop_width} crop '
                f'leaves one value per channel on the coarsest branch; raise batch_size or the crop')
        return self


class ExperimentConfig(StrictModel):
    version: int = CONFIG_VERSION
    train: TrainConfig
    relight: RelightConfig = RelightConfig()
    seg: SegConfig = SegConfig()

    @field_validator('version')
    @classmethod
    def validate_version(cls, v):
        if v != CONFIG_VERSION:
            raise ValueError(f'unsupported config version {v} (expected {CONFIG_VERSION})')
        return v


class Settings(BaseModel):
    """Process-level settings read from the environment"""
    run_root: Path = Path('runs')
    log_level: str = 'INFO'
    workers: int = 0


# ===== VALIDATION HELPERS =====

def describe_validation_error(error: ValidationError) -> str:
    """Flatten a pydantic error into one line per offending key"""
    lines = []
    for item in error.errors():
        location = '.'.join(str(part) for part in item['loc']) or '<root>'
        lines.append(f"{location}: {item['msg']}")
    return '; '.join(lines)


def revalidate(model: StrictModel) -> StrictModel:
    """Re-run validation on a model instance, raising InvalidConfig"""
    try:
        return type(model).model_validate(model.model_dump())
    except ValidationError as e:
        raise InvalidConfig(describe_validation_error(e)) from e


def load_experiment_config(path: Path) -> ExperimentConfig:
    """Parse a YAML experiment document"""
    path = Path(path)
    if not path.is_file():
        raise InvalidConfig(f"config file not found: {path}")
    try:
        document = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise InvalidConfig(f"config file {path} is not valid YAML: {e}") from e
    return parse_experiment_config(document)


def parse_experiment_config(document: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(document)
    except ValidationError as e:
        raise InvalidConfig(describe_validation_error(e)) from e


def dump_experiment_config(cfg: ExperimentConfig) -> str:
    """YAML echo of a fully-defaulted config"""
    return yaml.safe_dump(cfg.model_dump(mode='json'), sort_keys=True)


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(cfg.model_dump(mode='json'), sort_keys=True)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:10]


def apply_overrides(cfg: ExperimentConfig, overrides: Sequence[str]) -> ExperimentConfig:
    """Apply `key=value` overrides; bare keys resolve against the train section"""
    document = cfg.model_dump(mode='json')
    for override in overrides:
        if '=' not in override:
            raise InvalidConfig(f"override '{override}' is not of the form key=value")
        key, raw_value = override.split('=', 1)
        path = key.strip().split('.')
        if path[0] not in document:
            path = ['train'] + path
        node = document
        for part in path[:-1]:
            if not isinstance(node.get(part), dict):
                if node.get(part) is None and part in ('adaptation', 'target'):
                    node[part] = {}
                else:
                    raise InvalidConfig(f"override key '{key}' does not name a config section")
            node = node[part]
        node[path[-1]] = yaml.safe_load(raw_value)
    return parse_experiment_config(document)


# Global settings instance
_settings: Optional[Settings] = None


def get_settings() -> Settings:
    """Get the process-wide settings"""
    global _settings
    if _settings is None:
        _settings = Settings(
            run_root=Path(os.getenv('RHRSEG_RUN_ROOT', 'runs')),
            log_level=os.getenv('RHRSEG_LOG_LEVEL', 'INFO'),
            workers=int(os.getenv('RHRSEG_WORKERS', '0')),
        )
    return _settings
