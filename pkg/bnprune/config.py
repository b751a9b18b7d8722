"""
Configuration - process settings from the environment, run settings from JSON
"""
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict
from typing import Any, Dict, List, Literal, Optional, Tuple
from pathlib import Path
import json

from bnprune.exceptions import ConfigError


class Settings(BaseSettings):
    """Process settings"""

    LOG_LEVEL: str = "INFO"
    DEBUG: bool = False

    # Where relative dataset paths are resolved
    DATA_DIR: str = "data"

    # Artifact names inside --out
    CHECKPOINT_FILENAME: str = "model.ckpt"
    HISTORY_FILENAME: str = "history.csv"
    REPORT_FILENAME: str = "prune_report.csv"
    METRICS_FILENAME: str = "metrics.csv"
    INSPECT_FILENAME: str = "inspect.txt"

    LOG_EVERY_STEPS: int = 100
    EVAL_BATCH_SIZE: int = 500

    model_config = SettingsConfigDict(env_file=".env", case_sensitive=True, extra="ignore")


settings = Settings()


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class IstaConfig(_Strict):
    """Hyper-parameters of SGD training with ISTA on batch-norm scales"""

    rho: float = Field(0.0, ge=0)
    # Two-phase penalty: rho_warmup for the first warmup_steps, then rho
    rho_warmup: Optional[float] = Field(None, ge=0)
    warmup_steps: int = Field(0, ge=0)
    alpha: float = Field(1.0, gt=0)
    mu0: float = Field(0.01, gt=0)
    lr_schedule: Literal["constant", "step"] = "constant"
    lr_decay_rate: float = Field(1.0, gt=0, le=1)
    lr_decay_steps: int = Field(1000, ge=1)
    batch_size: int = Field(64, ge=1)
    max_steps: int = Field(1000, ge=1)
    steps_per_epoch: Optional[int] = Field(None, ge=1)
    plateau_window: int = Field(5, ge=2)
    plateau_tolerance: float = Field(1e-3, gt=0)
    stop_on_plateau: bool = True
    momentum: float = Field(0.0, ge=0, lt=1)
    weight_decay: float = Field(0.0, ge=0)
    ema_decay: Optional[float] = Field(0.999, gt=0, lt=1)
    use_ista: bool = True
    # Abort when a batch loss exceeds this factor times max(ln(classes), first loss)
    divergence_factor: float = Field(10.0, gt=1)

    def rho_at(self, step: int) -> float:
        """Penalty in effect at a step"""
        if self.rho_warmup is not None and step < self.warmup_steps:
            return self.rho_warmup
        return self.rho

    def lr_at(self, step: int) -> float:
        """Learning rate at a step"""
        if self.lr_schedule == "step":
            return self.mu0 * self.lr_decay_rate ** (step // self.lr_decay_steps)
        return self.mu0

    @property
    def sparsifies(self) -> bool:
        return self.use_ista and (self.rho > 0 or bool(self.rho_warmup))


class FinetuneConfig(_Strict):
    """Plain SGD after pruning"""

    mu0: float = Field(0.01, gt=0)
    lr_schedule: Literal["constant", "step"] = "constant"
    lr_decay_rate: float = Field(1.0, gt=0, le=1)
    lr_decay_steps: int = Field(1000, ge=1)
    batch_size: int = Field(64, ge=1)
    max_steps: int = Field(1000, ge=1)
    steps_per_epoch: Optional[int] = Field(None, ge=1)
    momentum: float = Field(0.0, ge=0, lt=1)
    weight_decay: float = Field(0.0, ge=0)
    ema_decay: Optional[float] = Field(0.999, gt=0, lt=1)

    def to_ista(self) -> IstaConfig:
        return IstaConfig(rho=0.0, use_ista=False, stop_on_plateau=False, **self.model_dump())


class AugmentConfig(_Strict):
    """Training-time preprocessing; every step can be switched off"""

    pad: bool = False
    pad_size: int = Field(40, ge=1)
    crop: bool = False
    crop_size: int = Field(32, ge=1)
    flip: bool = False
    brightness: bool = False
    brightness_delta: float = Field(0.2, ge=0)
    contrast: bool = False
    contrast_range: Tuple[float, float] = (0.8, 1.2)
    standardize: bool = True

    @property
    def active(self) -> bool:
        return self.pad or self.crop or self.flip or self.brightness or self.contrast

    @model_validator(mode="after")
    def _check_ranges(self) -> "AugmentConfig":
        low, high = self.contrast_range
        if not 0 < low <= high:
            raise ValueError(f"contrast_range must satisfy 0 < low <= high, got {self.contrast_range}")
        return self


class SynthSpec(_Strict):
    """Gaussian-blob image classes with planted noise channels"""

    num_classes: int = Field(2, ge=2)
    samples_per_class: int = Field(100, ge=1)
    # Defaults match the mnist_small input
    height: int = Field(28, ge=1)
    width: int = Field(28, ge=1)
    informative_channels: int = Field(1, ge=1)
    noise_channels: int = Field(0, ge=0)
    separation: float = Field(2.0, gt=0)
    noise_std: float = Field(1.0, gt=0)
    seed: int = 0


class DatasetConfig(_Strict):
    kind: Literal["mnist", "cifar10", "synth"] = "synth"
    path: Optional[str] = None
    train_split: Literal["train", "test"] = "train"
    eval_split: Literal["train", "test"] = "test"
    standardize: Literal["dataset", "image", "none"] = "dataset"
    limit: Optional[int] = Field(None, ge=1)
    augment: AugmentConfig = AugmentConfig()
    synth: SynthSpec = SynthSpec()

    @model_validator(mode="after")
    def _check_path(self) -> "DatasetConfig":
        if self.kind != "synth" and not self.path:
            raise ValueError(f"dataset.path is required for kind '{self.kind}'")
        return self


class ModelConfig(_Strict):
    preset: Optional[Literal["convnet_table1", "resnet20", "mnist_small"]] = "mnist_small"
    # Checkpoint whose graph and parameters seed training
    graph: Optional[str] = None
    dtype: Literal["float32", "float64"] = "float32"


class EvalConfig(_Strict):
    use_ema: bool = True
    batch_size: Optional[int] = Field(None, ge=1)


class RunConfig(_Strict):
    """Everything a pipeline stage needs"""

    model: ModelConfig = ModelConfig()
    dataset: DatasetConfig = DatasetConfig()
    ista: IstaConfig = IstaConfig()
    finetune: FinetuneConfig = FinetuneConfig()
    eval: EvalConfig = EvalConfig()
    seed: int = 0
    out_dir: Optional[str] = None


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
    """Apply KEY=VALUE overrides with dotted keys"""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"Override '{item}' is not KEY=VALUE")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"Override '{key}' descends into non-section '{part}'")
            node = child
        node[parts[-1]] = _parse_value(raw)
    return data


def load_run_config(path: Optional[str] = None, overrides: Optional[List[str]] = None) -> RunConfig:
    """Read, override and validate a run configuration"""
    data: Dict[str, Any] = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ConfigError(f"Config file {path} must hold a JSON object")

    data = apply_overrides(data, overrides or [])

    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}")
