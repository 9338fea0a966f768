import copy
import json
import logging
import os
import sys
from enum import Enum
from typing import Dict, Any, List, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticValidationError, field_validator, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError

logger = logging.getLogger(__name__)

# Modified Look-Locker 5(3)3 schedule at a 1000 ms RR interval, sorted by inversion time.
MOLLI_INVERSION_TIMES_MS = [100.0, 180.0, 260.0, 1100.0, 1180.0, 1260.0, 2100.0, 2180.0, 2260.0, 3100.0, 4100.0]

DEFAULT_CONFIG = {
    "rpca": {
        "rank": None,  # None resolves to half the sequence length
        "sparse_fraction": 0.10,
        "max_iterations": 100,
        "tolerance": 1e-7,
        "debug": False,
    },
    "registration": {
        "lambda_smooth": 0.05,
        "lambda_cyclic": 0.01,
        "rounds": 3,
        "steps_per_round": 300,
        "step_size": 0.25,
        "control_spacing": 4,
        "bins": 32,
        "similarity": "nmi",
        "ncc_window": 9,
        "use_rpca": True,
        "similarity_source": "low_rank",
        "max_backtracks": 4,
        "zero_sum_updates": True,
        "update_sigma": 1.0,
        "driver_sigma": 1.0,
        "round_tolerance": 5e-3,
        "seed": 0,
    },
    "phantom": {
        "height": 112,
        "width": 112,
        "n_frames": 11,
        "inversion_times": None,
        "contrast_mode": "pre_gd",
        "tissues": None,
        "amplitude": 4.0,
        "deformation_spacing": 16,
        "motion_radius": 0.3,
        "noise_sigma": 0.02,
        "magnitude": True,
        "edge_blur": 1.5,
        "seed": 0,
    },
    "t1fit": {
        "look_locker": False,
        "polarity_restore": True,
        "max_iterations": 200,
        "gradient_tolerance": 1e-10,
        "chunk_size": 20000,
    },
    "evaluation": {
        "top_k": 1,
        "bins": 32,
        "ncc_window": 9,
        "roi_labels": ["myocardium", "blood-pool"],
    },
    "thresholds": {
        "max_endpoint_error_ratio": 0.5,
        "min_sd_reduction": 0.3,
        "require_dpca_increase": True,
        "max_zero_motion_field": None,
        "max_sd_change": None,
    },
    "experiment": {
        "name": "phantom-experiment",
        "source": "phantom",  # or "files"
        "input": None,
        "mask": None,
        "truth_dir": None,
        "output_dir": None,
        "png": False,
        "compare_similarities": False,
        "compare_rpca": False,
    },
}


class Similarity(str, Enum):
    NMI = "nmi"
    NCC = "ncc"


class ContrastMode(str, Enum):
    PRE_GD = "pre_gd"
    POST_GD = "post_gd"


class _FrozenModel(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class RpcaConfig(_FrozenModel):
    """GoDec parameters. `rank=None` means half the sequence length."""

    rank: Optional[int] = Field(default=None, ge=1)
    sparse_fraction: float = Field(default=0.10, gt=0.0, le=1.0)
    max_iterations: int = Field(default=100, ge=1)
    tolerance: float = Field(default=1e-7, ge=0.0)
    debug: bool = False

    def resolved_rank(self, n_frames: int) -> int:
        return self.rank if self.rank is not None else max(1, n_frames // 2)


class RegistrationConfig(_FrozenModel):
    """
    Round-loop and optimizer settings.

    `update_sigma` smooths each step over the control grid (in control points),
    `driver_sigma` smooths the frames that drive the similarity (in pixels).
    A round whose loss drops by less than `round_tolerance` times the starting
    loss is discarded and ends the loop.
    """

    lambda_smooth: float = Field(default=0.05, ge=0.0)
    lambda_cyclic: float = Field(default=0.01, ge=0.0)
    rounds: int = Field(default=3, ge=1)
    steps_per_round: int = Field(default=300, ge=0)
    step_size: float = Field(default=0.25, gt=0.0)
    control_spacing: int = Field(default=4, ge=1)
    bins: int = Field(default=32, ge=2)
    similarity: Similarity = Similarity.NMI
    ncc_window: int = Field(default=9, ge=3)
    use_rpca: bool = True
    similarity_source: str = "low_rank"
    max_backtracks: int = Field(default=4, ge=0)
    zero_sum_updates: bool = True
    update_sigma: float = Field(default=1.0, ge=0.0)
    driver_sigma: float = Field(default=1.0, ge=0.0)
    round_tolerance: float = Field(default=5e-3, ge=0.0)
    rpca: RpcaConfig = RpcaConfig()
    seed: int = 0

    @field_validator("ncc_window")
    @classmethod
    def _odd_window(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("ncc_window must be odd")
        return value

    @field_validator("similarity_source")
    @classmethod
    def _known_source(cls, value: str) -> str:
        if value not in ("low_rank", "original"):
            raise ValueError("similarity_source must be 'low_rank' or 'original'")
        return value


class TissueSpec(_FrozenModel):
    """One tissue region; radii and center are in pixels (inner_radius only used by annuli)."""

    name: str
    shape: str = "disk"
    center: Tuple[float, float]
    outer_radius: float = Field(gt=0.0)
    inner_radius: float = Field(default=0.0, ge=0.0)
    t1_star: float = Field(gt=0.0)
    a: float
    b: float

    @model_validator(mode="after")
    def _check_shape(self):
        if self.shape not in ("disk", "annulus"):
            raise ValueError(f"unknown tissue shape '{self.shape}'")
        if self.shape == "annulus" and not self.inner_radius < self.outer_radius:
            raise ValueError("annulus needs inner_radius < outer_radius")
        return self


class PhantomConfig(_FrozenModel):
    height: int = Field(default=112, ge=8)
    width: int = Field(default=112, ge=8)
    n_frames: int = Field(default=11, ge=2)
    inversion_times: Optional[List[float]] = None
    contrast_mode: ContrastMode = ContrastMode.PRE_GD
    tissues: Optional[List[TissueSpec]] = None
    amplitude: float = Field(default=4.0, ge=0.0)
    deformation_spacing: int = Field(default=16, ge=2)
    motion_radius: float = Field(default=0.3, gt=0.0, le=0.5)
    noise_sigma: float = Field(default=0.02, ge=0.0)
    magnitude: bool = True
    edge_blur: float = Field(default=1.5, ge=0.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_times(self):
        if self.inversion_times is not None:
            if len(self.inversion_times) != self.n_frames:
                raise ValueError("inversion_times must have n_frames entries")
            if any(t <= 0 for t in self.inversion_times):
                raise ValueError("inversion_times must be strictly positive")
        return self

    def resolved_inversion_times(self) -> List[float]:
        if self.inversion_times is not None:
            return list(self.inversion_times)
        if self.n_frames == len(MOLLI_INVERSION_TIMES_MS):
            return list(MOLLI_INVERSION_TIMES_MS)
        step = (4100.0 - 100.0) / max(self.n_frames - 1, 1)
        return [100.0 + k * step for k in range(self.n_frames)]


class T1FitConfig(_FrozenModel):
    look_locker: bool = False
    polarity_restore: bool = True
    max_iterations: int = Field(default=200, ge=1)
    gradient_tolerance: float = Field(default=1e-10, gt=0.0)
    chunk_size: int = Field(default=20000, ge=1)


def build_model(model_cls, values: Dict[str, Any]):
    """Validates a config section, turning pydantic errors into ConfigError."""
    try:
        return model_cls(**values)
    except PydanticValidationError as e:
        raise ConfigError(f"Invalid {model_cls.__name__}: {e}") from e


class Config:
    """
    Manages the configuration for qmr-motion.
    It loads the default configuration and can override it with a user-provided
    JSON, YAML or TOML file or a dictionary.
    """
    def __init__(self,
                 custom_config_path: Optional[str] = None,
                 custom_config_dict: Optional[Dict[str, Any]] = None):
        self._config = self._load_default_config()
        self.source_path = custom_config_path

        if custom_config_dict: # Prioritize dict if provided
            self._config = self._merge_configs(self._config, copy.deepcopy(custom_config_dict))
        elif custom_config_path:
            self._config = self._merge_configs(self._config, self._load_custom_config(custom_config_path))

    def _load_default_config(self) -> Dict[str, Any]:
        return copy.deepcopy(DEFAULT_CONFIG)

    def _load_custom_config(self, path: str) -> Dict[str, Any]:
        """Loads a custom configuration file; the format follows the extension."""
        if not os.path.exists(path):
            raise ConfigError(f"Config file not found: {path}")
        extension = os.path.splitext(path)[1].lower()
        try:
            if extension == ".toml":
                with open(path, 'rb') as f:
                    loaded = tomllib.load(f)
            elif extension in (".yml", ".yaml"):
                with open(path, 'r', encoding='utf-8') as f:
                    loaded = yaml.safe_load(f) or {}
            else:
                with open(path, 'r', encoding='utf-8') as f:
                    loaded = json.load(f)
        except (json.JSONDecodeError, yaml.YAMLError, tomllib.TOMLDecodeError) as e:
            raise ConfigError(f"Could not parse config file {path}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"Config file {path} must contain a mapping at the top level")
        logger.debug("Loaded custom config from %s", path)
        return loaded

    def _merge_configs(self, base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
        """
        Merges the override config into the base config.
        Dictionaries are merged key by key; lists and scalars replace the base value.
        """
        merged = base.copy()
        for key, value in override.items():
            if key in merged and isinstance(merged[key], dict) and isinstance(value, dict):
                merged[key] = self._merge_configs(merged[key], value)
            else:
                merged[key] = value
        return merged

    def override(self, values: Dict[str, Any]) -> "Config":
        """Merges command-line style overrides on top of the current configuration."""
        self._config = self._merge_configs(self._config, copy.deepcopy(values))
        return self

    def get_config(self) -> Dict[str, Any]:
        """Returns the fully resolved configuration dictionary."""
        return self._config

    def section(self, name: str) -> Dict[str, Any]:
        return copy.deepcopy(self._config.get(name, {}))

    def rpca_config(self) -> RpcaConfig:
        return build_model(RpcaConfig, self.section("rpca"))

    def registration_config(self) -> RegistrationConfig:
        values = self.section("registration")
        values["rpca"] = self.rpca_config()
        return build_model(RegistrationConfig, values)

    def phantom_config(self) -> PhantomConfig:
        return build_model(PhantomConfig, self.section("phantom"))

    def t1fit_config(self) -> T1FitConfig:
        return build_model(T1FitConfig, self.section("t1fit"))

    @property
    def experiment_name(self) -> str:
        return self._config.get("experiment", {}).get("name", "phantom-experiment")
