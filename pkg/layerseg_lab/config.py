import json
import os
from pathlib import Path
from typing import Any, Dict, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .core.metrics import MetricsConfig
from .core.nets import NetConfig
from .core.phantom import VOLUME_DEFAULTS, PhantomConfig
from .core.preprocessing import PipelineConfig
from .core.run_storage import config_hash
from .core.topology import DefectConfig
from .core.training import TrainSchedule
from .engine.optim import OptimizerConfig
from .errors import ConfigError

CONFIG_DIR = Path(os.environ.get("LAYERSEG_HOME", Path.home() / ".config" / "layerseg"))
CONFIG_FILE = CONFIG_DIR / "config.yaml"
RUNS_DIR = CONFIG_DIR / "runs"


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(0, ge=0)
    deterministic: bool = False
    threads: int = Field(1, ge=1)
    train_count: int = Field(200, ge=0)
    val_count: int = Field(50, ge=0)
    test_count: int = Field(50, ge=0)
    volume_scans: int = Field(49, ge=1)
    bench_runs: int = Field(3, ge=1)
    gradcheck_instances: int = Field(100, ge=1)
    gradcheck_coords: int = Field(32, ge=1)


def _volume_phantom() -> PhantomConfig:
    return PhantomConfig(**VOLUME_DEFAULTS)


class Settings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    net: NetConfig = Field(default_factory=NetConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    schedule: TrainSchedule = Field(default_factory=TrainSchedule)
    defects: DefectConfig = Field(default_factory=DefectConfig)
    phantom: PhantomConfig = Field(default_factory=PhantomConfig)
    volume: PhantomConfig = Field(default_factory=_volume_phantom)
    pipeline: PipelineConfig = Field(default_factory=PipelineConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    run: RunConfig = Field(default_factory=RunConfig)

    @property
    def hash(self) -> str:
        return config_hash(self)


def _ensure_config_dir() -> Path:
    CONFIG_DIR.mkdir(parents=True, exist_ok=True)
    RUNS_DIR.mkdir(parents=True, exist_ok=True)
    return CONFIG_DIR


def get_default_config() -> dict:
    return Settings().model_dump(mode="json")


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def validate_config(data: Dict[str, Any]) -> Settings:
    unknown = sorted(set(data) - set(Settings.model_fields))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    try:
        return Settings.model_validate(_deep_merge(get_default_config(), data))
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def _read(path: Path) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f) if path.suffix == ".json" else yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a mapping of sections")
    return data


def load_config(path: Optional[Union[str, Path]] = None) -> Settings:
    """Defaults, overlaid by ``path`` or else by the per-user config file if present."""
    if path is None:
        path = CONFIG_FILE
        if not path.exists():
            return Settings()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return validate_config(_read(path))


def save_config(settings: Settings, path: Optional[Union[str, Path]] = None) -> Path:
    if path is None:
        _ensure_config_dir()
        path = CONFIG_FILE
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(settings.model_dump(mode="json"), f, sort_keys=False)
    return path
