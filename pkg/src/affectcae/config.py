"""
Run Configuration
=================
Every knob of a pipeline run, validated with pydantic and stored as an INI
file (one section per stage, comma-separated lists).

Example ``config.ini``::

    [run]
    seed = 7
    conv_channels = 8,8,16

    [cae]
    encoder_size = 64
    freeze = 1

Every field has a default; unknown sections and keys are rejected.
"""

import logging
from configparser import ConfigParser
from configparser import Error as ConfigParserError
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .data import MISSING_STRATEGIES
from .errors import ConfigError
from .models import ENCODER_SIZES
from .postprocess import CENTER_MODES, MAX_SHIFT, MAX_WINDOW, SCALE_MODES, default_shifts, default_windows
from .svr import DEFAULT_C_GRID, DEFAULT_EPSILON_GRID, KERNELS

logger = logging.getLogger(__name__)

SWEEP_KINDS = ("freeze", "encoder-size", "delay")


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_default=True)


class RunSection(Section):
    seed: int = Field(default=0, ge=0)
    jobs: int = Field(default=1, ge=1)
    conv_channels: Tuple[int, int, int] = (64, 64, 128)
    input_size: int = Field(default=48, ge=4)
    missing_frames: str = "substitute"

    @field_validator("conv_channels", mode="before")
    @classmethod
    def split_lists(cls, value: Any) -> Any:
        return _split_list(value)

    @field_validator("conv_channels")
    @classmethod
    def check_positive_channels(cls, value: Tuple[int, int, int]) -> Tuple[int, int, int]:
        if any(c < 1 for c in value):
            raise ValueError("conv_channels must be positive")
        return value

    @field_validator("input_size")
    @classmethod
    def check_multiple_of_four(cls, value: int) -> int:
        if value % 4:
            raise ValueError("input_size must be a multiple of 4")
        return value

    @field_validator("missing_frames")
    @classmethod
    def check_known_strategy(cls, value: str) -> str:
        if value not in MISSING_STRATEGIES:
            raise ValueError(f"must be one of {MISSING_STRATEGIES}")
        return value


class PathsSection(Section):
    """Empty paths select synthetic data."""

    fer_csv: str = ""
    recola_root: str = ""


class TrainingSection(Section):
    learning_rate: float = Field(default=1e-5, gt=0.0)
    batch_size: int = Field(default=64, ge=1)
    epochs: int = Field(default=500, ge=1)
    dropout: float = Field(default=0.5, ge=0.0, lt=1.0)
    patience: int = Field(default=0, ge=0)


class PretrainSection(TrainingSection):
    pass


class CaeSection(TrainingSection):
    epochs: int = Field(default=100, ge=1)
    dropout: float = Field(default=0.25, ge=0.0, lt=1.0)
    encoder_size: int = Field(default=900, ge=1)
    freeze: int = Field(default=0, ge=0, le=3)
    transfer: bool = True
    decoder_pool_upsample: bool = True
    freeze_bn_stats: bool = True


class SvrSection(Section):
    kernel: str = "linear"
    gamma: float = Field(default=0.0, ge=0.0)  # 0 = 1 / n_features
    c_grid: List[float] = list(DEFAULT_C_GRID)
    epsilon_grid: List[float] = list(DEFAULT_EPSILON_GRID)
    tol: float = Field(default=1e-3, gt=0.0)
    max_iter: int = Field(default=100_000, ge=1)
    delay: int = Field(default=0, ge=0)

    @field_validator("c_grid", "epsilon_grid", mode="before")
    @classmethod
    def split_lists(cls, value: Any) -> Any:
        return _split_list(value)

    @field_validator("kernel")
    @classmethod
    def check_known_kernel(cls, value: str) -> str:
        if value not in KERNELS:
            raise ValueError(f"must be one of {KERNELS}")
        return value

    @field_validator("c_grid", "epsilon_grid")
    @classmethod
    def check_non_empty(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError("grid must not be empty")
        return value


class PostprocessSection(Section):
    center_mode: str = "bias"
    scale_mode: str = "std"
    windows: List[int] = list(default_windows())
    shifts: List[int] = list(default_shifts())

    @field_validator("windows", "shifts", mode="before")
    @classmethod
    def split_lists(cls, value: Any) -> Any:
        return _split_list(value)

    @field_validator("center_mode")
    @classmethod
    def check_known_center(cls, value: str) -> str:
        if value not in CENTER_MODES:
            raise ValueError(f"must be one of {CENTER_MODES}")
        return value

    @field_validator("scale_mode")
    @classmethod
    def check_known_scale(cls, value: str) -> str:
        if value not in SCALE_MODES:
            raise ValueError(f"must be one of {SCALE_MODES}")
        return value

    @field_validator("windows")
    @classmethod
    def check_odd_windows(cls, value: List[int]) -> List[int]:
        for w in value:
            if w < 1 or w % 2 == 0 or w > MAX_WINDOW:
                raise ValueError(f"median window {w} must be odd in 1..{MAX_WINDOW}")
        return value

    @field_validator("shifts")
    @classmethod
    def check_shift_range(cls, value: List[int]) -> List[int]:
        for k in value:
            if not 0 <= k <= MAX_SHIFT:
                raise ValueError(f"shift {k} outside 0..{MAX_SHIFT}")
        return value


class EvaluateSection(Section):
    dimensions: List[str] = ["valence", "arousal"]
    write_predictions: bool = True

    @field_validator("dimensions", mode="before")
    @classmethod
    def split_lists(cls, value: Any) -> Any:
        return _split_list(value)

    @field_validator("dimensions")
    @classmethod
    def check_known_dimensions(cls, value: List[str]) -> List[str]:
        for d in value:
            if d not in ("valence", "arousal"):
                raise ValueError(f"unknown dimension '{d}'")
        return value


class SynthSection(Section):
    subjects: int = Field(default=4, ge=1)
    frames: int = Field(default=500, ge=10)
    dev_subjects: int = Field(default=1, ge=1)
    missing_rate: float = Field(default=0.0, ge=0.0, lt=1.0)
    images_per_class: int = Field(default=10, ge=1)


class SweepSection(Section):
    kind: str = "encoder-size"
    freeze: List[int] = [0, 1, 2, 3]
    encoder_sizes: List[int] = list(ENCODER_SIZES)
    delays: List[int] = [0, 30, 40]

    @field_validator("freeze", "encoder_sizes", "delays", mode="before")
    @classmethod
    def split_lists(cls, value: Any) -> Any:
        return _split_list(value)

    @field_validator("kind")
    @classmethod
    def check_known_kind(cls, value: str) -> str:
        if value not in SWEEP_KINDS:
            raise ValueError(f"must be one of {SWEEP_KINDS}")
        return value

    @field_validator("freeze")
    @classmethod
    def check_freeze_range(cls, value: List[int]) -> List[int]:
        if any(not 0 <= n <= 3 for n in value):
            raise ValueError("freeze counts must be in 0..3")
        return value


class RunConfig(Section):
    """Fully resolved run configuration; one attribute per INI section."""

    run: RunSection = RunSection()
    paths: PathsSection = PathsSection()
    pretrain: PretrainSection = PretrainSection()
    cae: CaeSection = CaeSection()
    svr: SvrSection = SvrSection()
    postprocess: PostprocessSection = PostprocessSection()
    evaluate: EvaluateSection = EvaluateSection()
    synth: SynthSection = SynthSection()
    sweep: SweepSection = SweepSection()

    def with_overrides(self, **sections: Dict[str, Any]) -> "RunConfig":
        """Copy with selected fields replaced, re-validated: ``with_overrides(cae={"freeze": 2})``."""
        data = self.model_dump()
        for section, values in sections.items():
            if section not in data:
                raise ConfigError(f"unknown config section '{section}'")
            data[section].update(values)
        return _validate(data, source="overrides")


def _validate(data: Dict[str, Any], source: str) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        problems = []
        for error in e.errors():
            location = ".".join(str(part) for part in error["loc"])
            problems.append(f"{location}: {error['msg']}")
        raise ConfigError(f"{source}: " + "; ".join(problems))


def load_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Parse and validate an INI config; no path means all defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")

    parser = ConfigParser(interpolation=None)
    parser.optionxform = str  # type: ignore[assignment,method-assign]
    try:
        parser.read(path)
    except ConfigParserError as e:
        raise ConfigError(f"{path}: {e}")

    known = set(RunConfig.model_fields)
    data: Dict[str, Any] = {}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"{path}: unknown section [{section}]")
        data[section] = dict(parser[section])
    config = _validate(data, source=str(path))
    logger.debug(f"Loaded config {path}")
    return config


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(config: RunConfig, path: Union[str, Path]):
    """Write the fully resolved config in canonical section/field order."""
    parser = ConfigParser(interpolation=None)
    parser.optionxform = str  # type: ignore[assignment,method-assign]
    for section_name in RunConfig.model_fields:
        section = getattr(config, section_name)
        parser[section_name] = {name: _format(getattr(section, name)) for name in type(section).model_fields}
    with open(path, "w") as f:
        parser.write(f)
