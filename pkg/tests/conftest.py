"""Pytest configuration and fixtures for mtfatt tests."""

import dataclasses
import os
from typing import Any, Callable, Dict

import numpy as np
import pytest
import yaml

from mtfatt.config import ModelConfig, SyntheticConfig
from mtfatt.dataio import StemSet, synth_song
from mtfatt.model import SeparationModel, build
from mtfatt.selftest import band_limited_noise


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config() -> ModelConfig:
    """Smallest model config, 64-bit for finite-difference checks."""
    return ModelConfig.tiny(dtype="float64")


@pytest.fixture
def tiny_model(tiny_config) -> SeparationModel:
    return build(tiny_config)


@pytest.fixture
def tiny_model32() -> SeparationModel:
    """Tiny model in float32, the dtype checkpoints store."""
    return build(ModelConfig.tiny())


@pytest.fixture
def tiny_mix(tiny_config, rng) -> np.ndarray:
    return rng.standard_normal((tiny_config.segment_samples, 2)) * 0.1


@pytest.fixture
def synthetic_config() -> SyntheticConfig:
    """A few short synthetic songs at 8 kHz."""
    return SyntheticConfig(n_train=2, n_val=1, n_test=1, duration=0.5, seed=7)


@pytest.fixture
def synthetic_song(synthetic_config) -> StemSet:
    return synth_song("song", np.random.default_rng(3), synthetic_config, 8000)


@pytest.fixture
def noise():
    """Band-limited stereo noise factory: ``noise(rng, n)``."""
    return band_limited_noise


def _tiny_run_dict(tmp_path: str, **training: Any) -> Dict[str, Any]:
    return {
        "model": dataclasses.asdict(ModelConfig.tiny()),
        "training": {"epochs": 1, "batch_size": 4, "max_batches_per_epoch": 2, "seed": 0, **training},
        "data": {"shift_frames": 16, "synthetic": {"n_train": 2, "n_val": 1, "n_test": 1, "duration": 0.5, "seed": 7}},
        "paths": {"checkpoint_dir": os.path.join(tmp_path, "checkpoints"), "output_dir": os.path.join(tmp_path, "output")},
        "threads": 1,
    }


@pytest.fixture
def tiny_run_dict(tmp_path) -> Callable[..., Dict[str, Any]]:
    """Factory of RunConfig mappings: tiny model, short synthetic songs, paths under ``tmp_path``."""
    return lambda **training: _tiny_run_dict(str(tmp_path), **training)


@pytest.fixture
def tiny_config_file(tmp_path, tiny_run_dict) -> str:
    """YAML configuration file for CLI runs of the tiny model on synthetic data."""
    path = os.path.join(tmp_path, "tiny.yaml")
    with open(path, "w") as f:
        yaml.safe_dump(tiny_run_dict(), f)
    return path
