"""
Configuration management for the quantization toolkit.

``ToolkitSettings`` holds process-wide settings read from the environment.
The ``RunConfig`` models hold everything one command needs; a resolved
RunConfig is written next to the command's outputs as ``run_config.json``.
"""

import json
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Type, TypeVar, Union

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    ValidationInfo,
    field_validator,
    model_validator,
)
from pydantic_settings import BaseSettings, SettingsConfigDict

from src.core.formats import parse_format
from src.core.metrics import ErrorMetricKind, ErrorReduction
from src.selection.analysis import Study
from src.selection.selector import IsolationPolicy, SelectionConfig
from src.storage.bundles import Nonlinearity
from src.storage.synthetic import DistributionSpec
from src.utils.errors import InvalidParameterError
from src.utils.output import write_json
from src.utils.validators import (
    validate_bits,
    validate_candidates,
    validate_dims,
    validate_positive,
    validate_seed,
)

logger = logging.getLogger(__name__)

RUN_CONFIG_FILE = "run_config.json"

DEFAULT_CANDIDATES = {
    4: ["int4", "fp4_e2m1"],
    8: ["int8", "fp8_e4m3"],
}


class ToolkitSettings(BaseSettings):
    """Process-wide settings."""
    model_config = SettingsConfigDict(
        env_prefix="QTK_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    log_level: str = Field(
        default="INFO",
        description="Logging level"
    )
    debug: bool = Field(
        default=False,
        description="Debug mode"
    )
    workers: int = Field(
        default=1,
        ge=1,
        description="Threads for per-layer candidate evaluation"
    )
    scale_cache_size: int = Field(
        default=4096,
        ge=1,
        description="Maximum number of cached scale sets"
    )
    default_seed: int = Field(
        default=0,
        ge=0,
        description="Seed used by gen when none is given"
    )


def load_config() -> ToolkitSettings:
    """
    Load configuration from environment.

    Returns:
        ToolkitSettings instance
    """
    return ToolkitSettings()


class Mode(str, Enum):
    """What gets quantized."""
    W_ONLY = "w-only"
    WA = "wa"


class RunConfig(BaseModel):
    """Base of the per-command configurations."""
    model_config = ConfigDict(extra="forbid")

    def dump(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")

    def write(self, out_dir: Union[str, Path]) -> Path:
        return write_json(Path(out_dir) / RUN_CONFIG_FILE, self.dump())


class GenConfig(RunConfig):
    """Synthetic model plus calibration and evaluation inputs."""
    out: str
    dims: List[int] = Field(default_factory=lambda: [64, 128, 128, 64],
                            description="Layer widths, input width first")
    nonlinearity: Nonlinearity = Field(default=Nonlinearity.RELU,
                                       description="Applied after every layer but the last")
    weight_dist: str = "gaussian:0,0.05"
    input_dist: str = "student_t:4"
    batch_size: int = 32
    calib_batches: int = 4
    eval_batches: int = 4
    seed: int = 0

    @field_validator("dims", mode="before")
    @classmethod
    def _dims(cls, v):
        return validate_dims(v)

    @field_validator("weight_dist", "input_dist")
    @classmethod
    def _dist(cls, v: str) -> str:
        return str(DistributionSpec.parse(v))

    @field_validator("batch_size", "calib_batches", "eval_batches")
    @classmethod
    def _positive(cls, v: int, info: ValidationInfo) -> int:
        return validate_positive(v, info.field_name)

    @field_validator("seed")
    @classmethod
    def _seed(cls, v: int) -> int:
        return validate_seed(v)


def _resolve_candidates(candidates: Optional[List[str]], bits: int) -> List[str]:
    if candidates is None:
        return list(DEFAULT_CANDIDATES[bits])
    return [parse_format(c).name for c in validate_candidates(candidates)]


class CalibrateConfig(RunConfig):
    """Calibration activations from a model and its calibration inputs."""
    model: str
    inputs: str
    out: str
    bits: int = 4
    candidates: Optional[List[str]] = Field(default=None,
                                            description="Formats listed in the scales table")

    @model_validator(mode="after")
    def _resolve(self) -> "CalibrateConfig":
        validate_bits(self.bits)
        self.candidates = _resolve_candidates(self.candidates, self.bits)
        return self


class QuantRunConfig(RunConfig):
    """Options shared by ``analyze`` and ``select``."""
    model: str
    calib: Optional[str] = None
    out: str
    bits: int = 4
    mode: Mode = Mode.W_ONLY
    metric: Optional[ErrorMetricKind] = None
    reduction: ErrorReduction = ErrorReduction.MSE
    candidates: Optional[List[str]] = None
    tie_break: List[str] = Field(default_factory=lambda: ["int", "fp"])
    isolation: IsolationPolicy = IsolationPolicy.ISOLATED
    workers: int = Field(default=1, ge=1)

    @field_validator("candidates", "tie_break", mode="before")
    @classmethod
    def _split(cls, v):
        if isinstance(v, str):
            return [part.strip() for part in v.split(",") if part.strip()]
        return v

    @model_validator(mode="after")
    def _resolve(self) -> "QuantRunConfig":
        validate_bits(self.bits)
        self.candidates = _resolve_candidates(self.candidates, self.bits)
        if self.metric is None:
            self.metric = (ErrorMetricKind.TENSOR_MSE if self.mode is Mode.W_ONLY
                           else ErrorMetricKind.MODEL_OUTPUT_MSE)
        return self

    @property
    def is_w_only(self) -> bool:
        return self.mode is Mode.W_ONLY

    def selection_config(self) -> SelectionConfig:
        return SelectionConfig(
            is_w_only=self.is_w_only,
            format_candidates=list(self.candidates),
            bit_width=self.bits,
            error_metric=self.metric,
            reduction=self.reduction,
            tie_break=list(self.tie_break),
            isolation=self.isolation,
            workers=self.workers,
        )


class AnalyzeConfig(QuantRunConfig):
    study: Study = Study.LAYER


class SelectConfig(QuantRunConfig):
    pass


class EvalConfig(RunConfig):
    """Final-output comparison of quantized models against the reference."""
    model: str
    inputs: str
    out: str
    quantized: Optional[str] = Field(default=None,
                                     description="Quantized bundle; the reference itself when omitted")
    label: str = "mofq"
    baselines: Dict[str, str] = Field(default_factory=dict, description="Label -> bundle path")

    @field_validator("baselines", mode="before")
    @classmethod
    def _pairs(cls, v):
        if isinstance(v, (list, tuple)):
            pairs = {}
            for item in v:
                label, sep, path = str(item).partition("=")
                if not sep or not label or not path:
                    raise InvalidParameterError("baseline", f"Expected LABEL=PATH, got {item!r}")
                pairs[label] = path
            return pairs
        return v


C = TypeVar("C", bound=RunConfig)


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a ``--config`` JSON object."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise InvalidParameterError("config", f"Cannot read config file {path}: {e}")
    except json.JSONDecodeError as e:
        raise InvalidParameterError("config", f"Config file {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise InvalidParameterError("config", f"Config file {path} must hold a JSON object")
    return data


def build_run_config(cls: Type[C], overrides: Mapping[str, Any],
                     config_file: Optional[Union[str, Path]] = None,
                     defaults: Optional[Mapping[str, Any]] = None) -> C:
    """
    Resolve a RunConfig: defaults, then the config file, then explicit flags.

    Args:
        cls: RunConfig subclass
        overrides: Values given on the command line
        config_file: Optional JSON file
        defaults: Values from settings, used when neither source sets them

    Returns:
        Validated configuration

    Raises:
        InvalidParameterError: If the merged values do not validate
    """
    data: Dict[str, Any] = dict(defaults or {})
    if config_file is not None:
        data.update(read_config_file(config_file))
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        config = cls(**data)
    except ValidationError as e:
        raise InvalidParameterError("config", f"Invalid {cls.__name__}: {e}")
    logger.debug(f"Resolved {cls.__name__}: {config.dump()}")
    return config
