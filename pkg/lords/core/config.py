"""
Configuration for lords.
Defaults live in LordsConfig; <state-dir>/config.json may override any of them.
"""

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional

from .errors import ConfigError
from .tensors import CodebookId

STATE_DIR_ENV = "LORDS_STATE_DIR"
DEFAULT_STATE_DIR = ".lords"
CONFIG_FILE = "config.json"


@dataclass(frozen=True)
class LordsConfig:
    """Effective defaults for every pipeline"""
    codebook: str = "nf4"
    block_size: int = 128
    steps: int = 500
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    clamp_eps: float = 1e-6
    rank_tol: float = 1e-6
    qat_steps: int = 500
    qat_lr: float = 0.05
    qat_scale_lr_ratio: float = 0.02
    peft_steps: int = 200
    peft_lr: float = 0.005
    keep_versions: int = 3
    use_cache: bool = True

    def __post_init__(self):
        CodebookId.from_label(self.codebook)
        if self.block_size < 1:
            raise ConfigError(f"block_size must be positive, got {self.block_size}")
        if min(self.steps, self.qat_steps, self.peft_steps) < 0:
            raise ConfigError("step counts must be non-negative")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 < self.rank_tol < 1.0:
            raise ConfigError(f"rank_tol must lie in (0, 1), got {self.rank_tol}")

    @property
    def codebook_id(self) -> CodebookId:
        return CodebookId.from_label(self.codebook)

    def with_overrides(self, **overrides) -> "LordsConfig":
        """Copy with the non-None overrides applied."""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def resolve_state_dir(state_dir: Optional[str] = None) -> Path:
    """Explicit argument, then LORDS_STATE_DIR, then ./.lords."""
    return Path(state_dir or os.environ.get(STATE_DIR_ENV) or DEFAULT_STATE_DIR)


class ConfigManager:
    """Loads and writes <state-dir>/config.json"""

    def __init__(self, state_dir: Path):
        self.state_dir = Path(state_dir)
        self.config_file = self.state_dir / CONFIG_FILE
        self.config = self._load_config()

    def _load_config(self) -> LordsConfig:
        """Load configuration; a missing file means defaults"""
        if not self.config_file.exists():
            return LordsConfig()

        try:
            with open(self.config_file, "r", encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read {self.config_file}: {e}") from e

        if not isinstance(data, dict):
            raise ConfigError(f"{self.config_file} must hold a JSON object")
        known = {f.name for f in fields(LordsConfig)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown keys in {self.config_file}: {', '.join(unknown)}")
        try:
            return LordsConfig(**data)
        except TypeError as e:
            raise ConfigError(f"invalid value in {self.config_file}: {e}") from e

    def save_default_config(self) -> Path:
        """Write the default configuration file"""
        self.state_dir.mkdir(parents=True, exist_ok=True)
        with open(self.config_file, "w", encoding="utf-8") as f:
            json.dump(LordsConfig().to_dict(), f, indent=2)
        self.config = LordsConfig()
        return self.config_file
