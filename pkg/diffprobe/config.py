"""Configuration loading with environment variable substitution and schema validation."""

import math
import os
import re
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import yaml
from loguru import logger
from pydantic import BaseModel, ValidationError, field_validator, model_validator
from pydantic import ConfigDict as ModelConfig

# Type alias for configuration dictionaries
ConfigDict = Dict[str, Any]

RUN_DIR_ENV = "DIFFPROBE_RUN_DIR"
WORKERS_ENV = "DIFFPROBE_WORKERS"

DEFAULT_SWEEP_TIMESTEPS = (1, 10, 25, 50, 75, 100, 200, 400, 600)
REFERENCE_PROBE_EPOCHS = 10
REFERENCE_PROBE_BATCH_SIZE = 512


class ConfigError(Exception):
    """Raised when configuration loading or validation fails."""

    pass


def _substitute_env_vars(value: Any, variables: Dict[str, str]) -> Any:
    """
    Recursively substitute environment variables in configuration values.

    Substitutes ${VAR_NAME} placeholders with values from the variables dict.

    Args:
        value: Configuration value (string, dict, list, etc.)
        variables: Dictionary mapping variable names to their values

    Returns:
        Value with environment variables substituted

    Raises:
        ConfigError: If an environment variable placeholder is found but the
            variable is not set in the variables dict
    """
    if isinstance(value, str):
        pattern = r"\$\{([^}]+)\}"

        def replace_var(match: re.Match) -> str:
            var_name = match.group(1)
            if var_name in variables:
                return variables[var_name]
            raise ConfigError(
                f"Environment variable '{var_name}' not found in variables dict."
            )

        return re.sub(pattern, replace_var, value)
    elif isinstance(value, dict):
        return {k: _substitute_env_vars(v, variables) for k, v in value.items()}
    elif isinstance(value, list):
        return [_substitute_env_vars(item, variables) for item in value]
    else:
        return value


def _merge_config(base: ConfigDict, override: ConfigDict) -> ConfigDict:
    """
    Deep merge two configuration dictionaries. Merging nested dictionaries.

    Args:
        base: Base configuration dictionary
        override: Override configuration dictionary

    Returns:
        Merged configuration dictionary
    """
    result = base.copy()

    for key, value in override.items():
        if key in result and isinstance(result[key], dict) and isinstance(value, dict):
            result[key] = _merge_config(result[key], value)
        else:
            result[key] = value

    return result


def load_config_structure(config_path: Path) -> ConfigDict:
    """
    Load configuration structure from YAML file without variable substitution.

    Args:
        config_path: Path to config YAML file.

    Returns:
        Configuration dictionary (without substitution)

    Raises:
        ConfigError: If config file is missing or invalid
    """
    if not config_path.exists():
        raise ConfigError(f"Configuration file not found: {config_path}")

    try:
        with open(config_path, "r") as f:
            config = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"Failed to parse YAML configuration: {e}")
    except Exception as e:
        raise ConfigError(f"Failed to read configuration file: {e}")

    if not isinstance(config, dict):
        raise ConfigError("Configuration file must contain a YAML dictionary")

    return config


def resolve_config_variables(
    config: ConfigDict, secrets_path: Optional[Path] = None
) -> ConfigDict:
    """
    Resolve ${VAR_NAME} placeholders in a configuration dictionary.

    Values come from an optional flat secrets YAML file and from the process
    environment; environment variables take precedence.

    Raises:
        ConfigError: If a required variable is not found
    """
    secrets_yaml = {}
    if secrets_path is not None:
        try:
            secrets_yaml = load_config_structure(secrets_path)
            for key, value in secrets_yaml.items():
                if not isinstance(value, str):
                    raise ConfigError(f"Secrets value for {key} have to be a string")
        except ConfigError as e:
            if "have to be a string" in str(e):
                raise
            logger.warning(
                f"Failed to load secrets file {secrets_path}: {e}, using only environment variables"
            )
            secrets_yaml = {}

    variables = {**secrets_yaml, **dict(os.environ)}
    return _substitute_env_vars(config, variables)


def load_config(config_path: Path, secrets_path: Optional[Path] = None) -> ConfigDict:
    """
    Load configuration from YAML file with variable substitution.

    Combines load_config_structure and resolve_config_variables.
    """
    config = load_config_structure(config_path)
    return resolve_config_variables(config, secrets_path)


class _Section(BaseModel):
    model_config = ModelConfig(extra="forbid", frozen=True)


class ScheduleSection(_Section):
    kind: Literal["linear", "cosine"] = "cosine"
    T: int = 1000
    offset_s: float = 0.008

    @model_validator(mode="after")
    def _check_range(self) -> "ScheduleSection":
        if self.T < 2:
            raise ValueError(f"T must be >= 2, got {self.T}")
        if self.offset_s < 0:
            raise ValueError(f"offset_s must be >= 0, got {self.offset_s}")
        return self


class WeightingSection(_Section):
    kind: Literal["mse", "minsnr"] = "minsnr"
    gamma: float = 5.0

    @field_validator("gamma")
    @classmethod
    def _positive_gamma(cls, value: float) -> float:
        if value <= 0:
            raise ValueError(f"gamma must be positive, got {value}")
        return value


class SamplerSection(_Section):
    kind: Literal["uniform", "squared_cosine"] = "squared_cosine"
    # mid_emphasis: pmf ∝ sin²(π(t−½)/T); schedule: pmf ∝ the cosine schedule's f(t)
    variant: Literal["mid_emphasis", "schedule"] = "mid_emphasis"


class DenoiserConfig(_Section):
    """U-Net shape. Stage channels are listed from the highest resolution down."""

    image_size: int = 128
    in_channels: int = 1
    stage_channels: Tuple[int, ...] = (64, 128, 256, 512)
    encoder_blocks_per_stage: int = 2
    bottleneck_blocks: int = 2
    decoder_blocks_per_stage: int = 3
    attention_resolutions: Tuple[int, ...] = (16,)
    groups: int = 16
    time_embed_dim: int = 256
    heads: int = 1

    @model_validator(mode="after")
    def _check_topology(self) -> "DenoiserConfig":
        n_stages = len(self.stage_channels)
        if n_stages < 1:
            raise ValueError("stage_channels must not be empty")
        if self.image_size % (2 ** (n_stages - 1)) != 0:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by 2^{n_stages - 1}"
            )
        if self.decoder_blocks_per_stage != self.encoder_blocks_per_stage + 1:
            raise ValueError(
                "decoder_blocks_per_stage must equal encoder_blocks_per_stage + 1 "
                "so every encoder activation feeds exactly one decoder block"
            )
        resolutions = self.resolutions
        missing = set(self.attention_resolutions) - set(resolutions)
        if missing:
            raise ValueError(
                f"attention_resolutions {sorted(missing)} are not realized; "
                f"stage resolutions are {resolutions}"
            )
        if self.time_embed_dim % 2 != 0:
            raise ValueError("time_embed_dim must be even")
        for channels in self.stage_channels:
            if channels % self.groups != 0:
                raise ValueError(
                    f"groups={self.groups} does not divide stage width {channels}"
                )
            if channels % self.heads != 0:
                raise ValueError(f"heads={self.heads} does not divide width {channels}")
        return self

    @property
    def resolutions(self) -> List[int]:
        return [self.image_size // 2**i for i in range(len(self.stage_channels))]


def full_scale_denoiser_config() -> DenoiserConfig:
    return DenoiserConfig()


def desk_denoiser_config() -> DenoiserConfig:
    return DenoiserConfig(
        image_size=32,
        stage_channels=(32, 64, 96, 128),
        attention_resolutions=(4,),
        time_embed_dim=128,
    )


class TrainSection(_Section):
    epochs: int = 250
    batch_size: int = 256
    lr: float = 5e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-4
    warmup_frac: float = 0.05
    grad_clip: float = 1.0
    ema_decay: float = 0.999
    save_every: int = 10
    frechet_every: int = 0
    frechet_samples: int = 256
    frechet_ddim_steps: int = 50
    dtype: Literal["float32", "float64"] = "float32"


class ProbeSection(_Section):
    epochs: int = REFERENCE_PROBE_EPOCHS
    batch_size: int = REFERENCE_PROBE_BATCH_SIZE
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 5e-4
    normalize: bool = True


class SweepSection(_Section):
    timesteps: Tuple[int, ...] = DEFAULT_SWEEP_TIMESTEPS
    readouts: Union[Literal["all"], Tuple[int, ...]] = "all"
    batch_size: int = 64
    noise_policy: Literal["shared", "per_consumer"] = "shared"


class ClusterSection(_Section):
    k: Optional[int] = None
    restarts: int = 5
    max_iter: int = 300
    tol: float = 1e-4
    runs: int = 5
    silhouette_sample: int = 5000
    pca_components: int = 3
    pca_mask_quantile: float = 0.5
    pca_images: int = 8


class SyntheticSection(_Section):
    k: int = 8
    n_per_class: int = 200
    noise: float = 0.05
    max_rotation: float = math.pi
    jitter: float = 0.1


class DatasetSection(_Section):
    source: Literal["synthetic", "directory"] = "synthetic"
    path: Optional[str] = None
    label_map: Optional[str] = None
    image_size: int = 128
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1
    quota_per_class: Optional[int] = None
    augment_multiplier: int = 1
    min_class_count: int = 5
    max_per_class: Optional[int] = None
    synthetic: SyntheticSection = SyntheticSection()

    @model_validator(mode="after")
    def _check_source(self) -> "DatasetSection":
        total = self.train + self.val + self.test
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"Split ratios must sum to 1.0, got {total}")
        if self.source == "directory" and not self.path:
            raise ValueError("dataset.path is required when dataset.source=directory")
        return self


class OODSection(_Section):
    source_run: Optional[str] = None


class ExperimentConfig(_Section):
    mode: Literal["balanced", "long_tail", "ood"] = "balanced"
    seed: int = 0
    workers: int = 1
    output_dir: str = "runs/default"
    dataset: DatasetSection = DatasetSection()
    schedule: ScheduleSection = ScheduleSection()
    weighting: WeightingSection = WeightingSection()
    sampler: SamplerSection = SamplerSection()
    model: DenoiserConfig = DenoiserConfig()
    train: TrainSection = TrainSection()
    probe: ProbeSection = ProbeSection()
    sweep: SweepSection = SweepSection()
    cluster: ClusterSection = ClusterSection()
    ood: OODSection = OODSection()

    @model_validator(mode="after")
    def _check_mode(self) -> "ExperimentConfig":
        if self.mode == "ood" and not self.ood.source_run:
            raise ValueError("ood.source_run is required when mode=ood")
        if self.dataset.image_size != self.model.image_size:
            raise ValueError(
                f"dataset.image_size={self.dataset.image_size} does not match "
                f"model.image_size={self.model.image_size}"
            )
        return self

    def snapshot(self) -> str:
        """YAML text that reloads into an equal config."""
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)

    def section_dump(self, *names: str) -> ConfigDict:
        dump = self.model_dump(mode="json")
        return {name: dump[name] for name in names}


def _apply_env_overrides(config: ConfigDict) -> ConfigDict:
    overrides: ConfigDict = {}
    if run_dir := os.environ.get(RUN_DIR_ENV):
        overrides["output_dir"] = run_dir
    if workers := os.environ.get(WORKERS_ENV):
        try:
            overrides["workers"] = int(workers)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {workers!r}")
    return _merge_config(config, overrides)


def parse_experiment_config(config: ConfigDict) -> ExperimentConfig:
    """Validate a resolved configuration dictionary."""
    try:
        return ExperimentConfig.model_validate(config)
    except ValidationError as e:
        raise ConfigError(f"Invalid experiment configuration:\n{e}") from e


def load_experiment_config(
    config_path: Path, secrets_path: Optional[Path] = None
) -> ExperimentConfig:
    """Load, resolve, override from the environment and validate an experiment config."""
    config = load_config(config_path, secrets_path)
    config = _apply_env_overrides(config)
    return parse_experiment_config(config)
