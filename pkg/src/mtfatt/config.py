"""Configuration module for mtfatt."""

import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import yaml

from .errors import MtfattError

logger = logging.getLogger(__name__)

# Default configuration directory
DEFAULT_CONFIG_DIR = os.path.expanduser("~/.mtfatt")
DEFAULT_CONFIG_PATH = os.path.join(DEFAULT_CONFIG_DIR, "config.yaml")
BUNDLED_CONFIG_PATH = os.path.join(os.path.dirname(__file__), "default_config.yaml")

VARIANTS = ("noAtt", "FAtt", "TAtt", "TFAtt", "MTFAtt")
STEMS = ("vocals", "bass", "drums", "other")
DTYPES = ("float32", "float64")


class ConfigError(MtfattError):
    """Exception raised when a configuration is malformed or violates an invariant."""

    error_type = "config_error"


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    Defaults reproduce the full-scale network (8192-point STFT, 240 frames, K=4, widths 32/64/64).
    """

    sample_rate: int = 44100
    n_fft: int = 8192
    hop: int = 1024
    subbands: int = 4
    segment_frames: int = 240
    # EB1, EB2, EB3 output channels; the decoder mirrors them (DB1=EB3, DB2=EB2, DB3=EB1)
    encoder_channels: List[int] = field(default_factory=lambda: [32, 64, 64])
    variant: str = "MTFAtt"
    p_schedule: List[int] = field(default_factory=lambda: [1, 2, 4, 8])
    ra_blocks: int = 4
    mask_factor: float = 2.0
    bn_eps: float = 1e-5
    bn_momentum: float = 0.99
    elu_alpha: float = 1.0
    seed: int = 0
    dtype: str = "float32"

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        """The full-scale reference network."""
        return cls()

    @classmethod
    def desk_scale(cls, **overrides: Any) -> "ModelConfig":
        """A CPU-sized network: 512-point STFT at 8 kHz, 64 frames, base width 8."""
        values: Dict[str, Any] = dict(
            sample_rate=8000,
            n_fft=512,
            hop=64,
            subbands=4,
            segment_frames=64,
            encoder_channels=[8, 16, 16],
            bn_momentum=0.9,
        )
        values.update(overrides)
        return cls(**values)

    @classmethod
    def tiny(cls, **overrides: Any) -> "ModelConfig":
        """Smallest useful network, meant for finite-difference gradient harnesses."""
        values: Dict[str, Any] = dict(
            sample_rate=8000,
            n_fft=64,
            hop=8,
            subbands=2,
            segment_frames=16,
            encoder_channels=[4, 4, 4],
            p_schedule=[1, 2],
            ra_blocks=2,
            bn_momentum=0.9,
        )
        values.update(overrides)
        return cls(**values)

    @property
    def bins(self) -> int:
        """Retained STFT bins F (the Nyquist bin is dropped)."""
        return self.n_fft // 2

    @property
    def subband_bins(self) -> int:
        return self.bins // self.subbands

    @property
    def input_channels(self) -> int:
        return 4 * self.subbands

    @property
    def separator_channels(self) -> int:
        return self.encoder_channels[-1]

    @property
    def segment_samples(self) -> int:
        """Samples per segment; a centred STFT of this many samples yields segment_frames frames."""
        return (self.segment_frames - 1) * self.hop

    @property
    def bottleneck_shape(self) -> Tuple[int, int, int]:
        """(T', F', C) after the encoder strides (1,1), (2,2), (1,2)."""
        frames = math.ceil(self.segment_frames / 2)
        bins = math.ceil(math.ceil(self.subband_bins / 2) / 2)
        return frames, bins, self.separator_channels

    def validate(self) -> None:
        """Check the ModelConfig invariants, raising ConfigError on the first violation."""
        if self.variant not in VARIANTS:
            raise ConfigError(f"Unknown variant '{self.variant}'; valid variants: {', '.join(VARIANTS)}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"Unknown dtype '{self.dtype}'; valid dtypes: {', '.join(DTYPES)}")
        if self.n_fft <= 0 or self.n_fft % 2:
            raise ConfigError(f"n_fft must be a positive even number, got {self.n_fft}")
        if self.hop <= 0 or self.n_fft % self.hop:
            raise ConfigError(f"hop {self.hop} must divide n_fft {self.n_fft}")
        if self.subbands <= 0 or self.bins % self.subbands:
            raise ConfigError(f"K={self.subbands} must divide F={self.bins}")
        if self.segment_frames < 2:
            raise ConfigError(f"segment_frames must be at least 2, got {self.segment_frames}")
        if len(self.encoder_channels) != 3 or any(c <= 0 for c in self.encoder_channels):
            raise ConfigError(f"encoder_channels needs three positive widths, got {self.encoder_channels}")
        if self.separator_channels % 2:
            raise ConfigError(f"Separator width {self.separator_channels} must be even (attention halves it)")
        if self.ra_blocks <= 0:
            raise ConfigError(f"ra_blocks must be positive, got {self.ra_blocks}")
        if self.mask_factor <= 0:
            raise ConfigError(f"mask_factor must be positive, got {self.mask_factor}")
        if not 0.0 < self.bn_momentum < 1.0 or self.bn_eps <= 0:
            raise ConfigError("bn_momentum must lie in (0, 1) and bn_eps must be positive")
        if self.variant == "MTFAtt":
            frames, bins, _ = self.bottleneck_shape
            if not self.p_schedule:
                raise ConfigError("MTFAtt needs a non-empty p_schedule")
            for p in self.p_schedule:
                if p <= 0 or frames % p or bins % p:
                    raise ConfigError(f"P={p} must divide T'={frames} and F'={bins}")

    def architecture_dict(self) -> Dict[str, Any]:
        """Fields that determine the parameter layout (seed and dtype excluded)."""
        values = dataclasses.asdict(self)
        values.pop("seed")
        values.pop("dtype")
        return values

    def digest(self) -> bytes:
        """SHA-256 of the canonical architecture description, stored in checkpoints."""
        canonical = json.dumps(self.architecture_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).digest()


@dataclass
class TrainingConfig:
    """Optimizer, schedule and augmentation settings."""

    epochs: int = 300
    batch_size: int = 4
    learning_rate: float = 1e-3
    lr_decay: float = 0.8
    lr_patience: int = 10
    alpha: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    swap_prob: float = 0.5
    remix_prob: float = 1.0
    max_batches_per_epoch: Optional[int] = None
    seed: int = 0


@dataclass
class SyntheticConfig:
    """Band-disjoint synthetic stand-in for MUSDB18."""

    n_train: int = 8
    n_val: int = 2
    n_test: int = 2
    duration: float = 20.0
    seed: int = 1234
    # Hz ranges per stem; the defaults suit an 8 kHz sample rate
    bands: Dict[str, List[float]] = field(
        default_factory=lambda: {
            "bass": [40.0, 300.0],
            "drums": [400.0, 900.0],
            "vocals": [1000.0, 2000.0],
            "other": [2200.0, 3600.0],
        }
    )


@dataclass
class DataConfig:
    """Dataset location and segmenting."""

    dataset_root: Optional[str] = None
    split_manifest: Optional[str] = None
    shift_frames: int = 86
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)


@dataclass
class PathsConfig:
    """Output locations."""

    checkpoint_dir: str = "checkpoints"
    output_dir: str = "output"


@dataclass
class RunConfig:
    """Main configuration class."""

    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    threads: Optional[int] = None

    @classmethod
    def from_dict(cls, config_dict: Dict[str, Any]) -> "RunConfig":
        """Create a RunConfig from a dictionary, rejecting unknown keys."""
        _reject_unknown(cls, config_dict, "")
        data_dict = dict(config_dict.get("data") or {})
        synthetic = _build(SyntheticConfig, data_dict.pop("synthetic", None) or {}, "data.synthetic")
        data = _build(DataConfig, data_dict, "data")
        data.synthetic = synthetic
        return cls(
            model=_build(ModelConfig, config_dict.get("model") or {}, "model"),
            training=_build(TrainingConfig, config_dict.get("training") or {}, "training"),
            data=data,
            paths=_build(PathsConfig, config_dict.get("paths") or {}, "paths"),
            threads=config_dict.get("threads"),
        )

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def _reject_unknown(cls: type, values: Dict[str, Any], section: str) -> None:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        where = f" in section '{section}'" if section else ""
        raise ConfigError(f"Unknown configuration key(s){where}: {', '.join(unknown)}")


def _build(cls: type, values: Dict[str, Any], section: str) -> Any:
    if not isinstance(values, dict):
        raise ConfigError(f"Section '{section}' must be a mapping, got {type(values).__name__}")
    _reject_unknown(cls, values, section)
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"Invalid section '{section}': {e}")


def load_config(config_path: Optional[str] = None) -> RunConfig:
    """Load configuration from a YAML file.

    Args:
        config_path: Path to the configuration file. If None, ``MTFATT_CONFIG`` or the
            default path is used, falling back to the bundled default configuration.

    Returns:
        A RunConfig object with the loaded configuration.

    Raises:
        ConfigError: If an explicitly requested file is missing or malformed.
    """
    explicit = config_path is not None
    if config_path is None:
        config_path = os.environ.get("MTFATT_CONFIG", DEFAULT_CONFIG_PATH)

    config_dict: Dict[str, Any] = {}
    if os.path.exists(config_path):
        config_dict = _read_yaml(config_path)
        logger.info(f"Loaded configuration from {config_path}")
    elif explicit:
        raise ConfigError(f"Configuration file not found: {config_path}")
    else:
        logger.info(f"Configuration file {config_path} not found. Using default configuration.")
        if os.path.exists(BUNDLED_CONFIG_PATH):
            config_dict = _read_yaml(BUNDLED_CONFIG_PATH)
            logger.info(f"Loaded default configuration from {BUNDLED_CONFIG_PATH}")

    # Environment overrides
    env_threads = os.environ.get("MTFATT_THREADS")
    if env_threads and config_dict.get("threads") is None:
        try:
            config_dict["threads"] = int(env_threads)
            logger.info(f"Using threads={env_threads} from environment variable")
        except ValueError:
            logger.warning(f"Invalid value for MTFATT_THREADS: {env_threads}")

    config = RunConfig.from_dict(config_dict)
    config.model.validate()
    return config


def _read_yaml(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r") as f:
            loaded = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"Error parsing configuration {path}: {e}")
    if not isinstance(loaded, dict):
        raise ConfigError(f"Configuration {path} must contain a mapping at top level")
    return loaded


def save_config(config: RunConfig, path: str) -> None:
    """Write the effective configuration as YAML (used for provenance in output directories)."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=False)


def resolve_threads(config: RunConfig) -> int:
    """Worker count: config value, then MTFATT_THREADS, then machine parallelism."""
    if config.threads:
        return max(1, int(config.threads))
    env_threads = os.environ.get("MTFATT_THREADS")
    if env_threads:
        try:
            return max(1, int(env_threads))
        except ValueError:
            logger.warning(f"Invalid value for MTFATT_THREADS: {env_threads}")
    return os.cpu_count() or 1
