"""End-to-end separation model: STFT, encoder, separator, decoder, masking, iSTFT."""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import tensor as tn
from .attention import build_separator, separator_params, set_scale_multiplier
from .config import ModelConfig
from .errors import MtfattError
from .layers import Decoder, Encoder, ParameterStore, decoder, decoder_params, encoder, encoder_params
from .signal import ComplexSpectrogram, SubbandFeature, apply_cirm, istft, pack_subbands, stft, unpack_mask
from .tensor import Tensor

logger = logging.getLogger(__name__)


class ModelError(MtfattError):
    """Exception raised when a model is given input it cannot process."""

    error_type = "model_error"


@dataclass
class ForwardOutput:
    """Everything one forward pass produces, for losses and diagnostics."""

    estimate: Tensor
    mask: ComplexSpectrogram
    estimate_spec: ComplexSpectrogram
    mixture_spec: ComplexSpectrogram
    bottleneck: Tensor


class SeparationModel:
    """A dedicated single-stem separator built from a :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, stem: Optional[str] = None):
        self.config = config
        self.stem = stem
        self.store = ParameterStore.for_config(config)
        self.encoder = Encoder(self.store, config)
        self.separator = build_separator(self.store, config)
        self.decoder = Decoder(self.store, config)
        logger.debug(f"Built {config.variant} model with {self.store.count()} parameters in {len(self.store)} tensors")

    @property
    def training(self) -> bool:
        return self.store.training

    def train(self) -> "SeparationModel":
        self.store.training = True
        return self

    def eval(self) -> "SeparationModel":
        self.store.training = False
        return self

    def parameters(self) -> List[Tensor]:
        return list(self.store)

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return self.store.named_parameters()

    def set_attention_scale(self, multiplier: float) -> int:
        return set_scale_multiplier(self.separator, multiplier)

    def features(self, mix: np.ndarray) -> Tuple[ComplexSpectrogram, SubbandFeature]:
        cfg = self.config
        mix = np.asarray(mix)
        if mix.ndim not in (2, 3) or mix.shape[-1] != 2:
            raise ModelError(f"Expected (N, 2) or (B, N, 2) stereo samples, got shape {mix.shape}")
        if mix.shape[-2] != cfg.segment_samples:
            raise ModelError(f"Mixture has {mix.shape[-2]} samples, model segment length is {cfg.segment_samples}")
        spec = stft(mix, cfg.n_fft, cfg.hop, cfg.sample_rate, dtype=cfg.dtype)
        return spec, pack_subbands(spec, cfg.subbands)

    def forward_full(self, mix: np.ndarray) -> ForwardOutput:
        spec, packed = self.features(mix)
        encoded = encoder(packed, self.encoder)
        separated = self.separator(encoded.bottleneck)
        mask = unpack_mask(decoder(separated, encoded.skips, self.decoder, packed))
        estimate_spec = apply_cirm(spec, mask)
        estimate = istft(estimate_spec, self.config.segment_samples)
        return ForwardOutput(estimate, mask, estimate_spec, spec, encoded.bottleneck)

    def forward(self, mix: np.ndarray) -> Tuple[Tensor, ComplexSpectrogram]:
        """Waveform estimate and complex mask for one segment (or a batch of segments)."""
        out = self.forward_full(mix)
        return out.estimate, out.mask

    __call__ = forward

    def separate(self, mix: np.ndarray) -> np.ndarray:
        """Unrecorded forward pass returning the estimate as a numpy array."""
        with tn.no_tape():
            estimate, _ = self.forward(mix)
        return estimate.data


def build(config: ModelConfig, stem: Optional[str] = None) -> SeparationModel:
    """Validate ``config`` and initialize a model deterministically from ``config.seed``."""
    config.validate()
    return SeparationModel(config, stem)


def parameter_count(config: ModelConfig) -> int:
    """Number of trainable scalars of the model ``build(config)`` would create."""
    return encoder_params(config) + separator_params(config) + decoder_params(config)


def crossfade_window(length: int) -> np.ndarray:
    """Strictly positive triangular window of ``length`` samples."""
    return np.bartlett(length + 2)[1:-1]


def segment_starts(n_samples: int, length: int) -> List[int]:
    """Starts of 50%-overlapping segments; the last one is aligned to the end of the signal."""
    step = max(length // 2, 1)
    starts = list(range(0, n_samples - length + 1, step))
    if starts[-1] + length < n_samples:
        starts.append(n_samples - length)
    return starts


def separate_long(model: SeparationModel, audio: np.ndarray, batch_size: int = 4) -> np.ndarray:
    """Separate a whole song by crossfaded overlap-add of 50%-overlapping segments.

    Audio shorter than one segment is zero-padded to one segment and the result is cropped.
    """
    audio = np.asarray(audio)
    if audio.ndim != 2 or audio.shape[1] != 2:
        raise ModelError(f"Expected (N, 2) stereo samples, got shape {audio.shape}")
    length = model.config.segment_samples
    n_samples = audio.shape[0]
    if n_samples < length:
        logger.warning(f"Input of {n_samples} samples is shorter than one segment ({length}); zero-padding")
        padded = np.zeros((length, 2), dtype=audio.dtype)
        padded[:n_samples] = audio
        return model.separate(padded)[:n_samples]

    starts = segment_starts(n_samples, length)
    if len(starts) == 1:
        return model.separate(audio)

    window = crossfade_window(length)[:, None]
    output = np.zeros((n_samples, 2))
    weight = np.zeros((n_samples, 1))
    for i in range(0, len(starts), batch_size):
        chunk = starts[i : i + batch_size]
        batch = np.stack([audio[s : s + length] for s in chunk])
        estimates = model.separate(batch)
        for s, est in zip(chunk, estimates):
            output[s : s + length] += est * window
            weight[s : s + length] += window
    logger.debug(f"Separated {n_samples} samples in {len(starts)} segments")
    return (output / weight).astype(np.float32)
