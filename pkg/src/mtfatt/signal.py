"""STFT front-end, subband packing and complex-mask application.

Spectrograms are channels-last: real and imaginary planes of shape ``(..., T, F, channels)``
with ``F = n_fft // 2`` (the Nyquist bin is dropped on analysis and taken as zero on
synthesis). Analysis frames are centred: the signal is reflect-padded by ``n_fft // 2`` on
both sides, so ``N`` samples give ``1 + N // hop`` frames.
"""

import functools
import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.signal import get_window

from . import tensor as tn
from .errors import MtfattError
from .tensor import DimensionError, Tensor

logger = logging.getLogger(__name__)

# Interleaved channel order of one subband: real-left, imag-left, real-right, imag-right
PLANES_PER_BAND = 4
MIN_WINDOW_SUM = 1e-8


class SignalConfigurationError(MtfattError):
    """Exception raised when STFT parameters cannot analyse or resynthesize a signal."""

    error_type = "signal_configuration_error"


@dataclass
class ComplexSpectrogram:
    """Complex STFT of multichannel audio as separate real and imaginary planes."""

    real: Tensor
    imag: Tensor
    sample_rate: int
    hop: int
    n_fft: int

    def __post_init__(self) -> None:
        if self.real.shape != self.imag.shape:
            raise DimensionError(f"Real and imaginary planes differ in shape: {self.real.shape} vs {self.imag.shape}")
        if self.real.ndim < 3:
            raise DimensionError(f"Spectrogram planes must be (..., T, F, channels), got {self.real.shape}")

    @property
    def frames(self) -> int:
        return self.real.shape[-3]

    @property
    def bins(self) -> int:
        return self.real.shape[-2]

    @property
    def channels(self) -> int:
        return self.real.shape[-1]

    @property
    def shape(self):
        return self.real.shape

    def to_complex(self) -> np.ndarray:
        return self.real.data.astype(np.float64) + 1j * self.imag.data.astype(np.float64)

    @classmethod
    def from_complex(cls, values: np.ndarray, sample_rate: int, hop: int, n_fft: int, dtype: Union[str, type] = "float32") -> "ComplexSpectrogram":
        return cls(Tensor(values.real, dtype=dtype), Tensor(values.imag, dtype=dtype), sample_rate, hop, n_fft)

    def like(self, real: Tensor, imag: Tensor) -> "ComplexSpectrogram":
        """A spectrogram with this one's STFT metadata and new planes."""
        return ComplexSpectrogram(real, imag, self.sample_rate, self.hop, self.n_fft)


@dataclass
class SubbandFeature:
    """Real feature map ``(..., T, F/K, 4K)``; channel ``band * 4 + plane``."""

    features: Tensor
    subbands: int
    sample_rate: int
    hop: int
    n_fft: int

    @property
    def shape(self):
        return self.features.shape


@functools.lru_cache(maxsize=16)
def hann_window(n_fft: int) -> np.ndarray:
    """Periodic Hann window, used for both analysis and synthesis."""
    window = get_window("hann", n_fft, fftbins=True)
    window.setflags(write=False)
    return window


def frame_count(n_samples: int, hop: int) -> int:
    """Frames produced by :func:`stft` for ``n_samples`` samples."""
    return 1 + n_samples // hop


def samples_for_frames(frames: int, hop: int) -> int:
    """Signal length whose centred STFT has exactly ``frames`` frames and ends on a frame centre."""
    return (frames - 1) * hop


def _check_params(n_fft: int, hop: int) -> None:
    if n_fft <= 0 or n_fft % 2:
        raise SignalConfigurationError(f"n_fft must be a positive even number, got {n_fft}")
    if hop <= 0 or n_fft % hop:
        raise SignalConfigurationError(f"hop {hop} must divide n_fft {n_fft}")


def stft(audio: np.ndarray, n_fft: int, hop: int, sample_rate: int = 44100, dtype: Union[str, type] = "float32") -> ComplexSpectrogram:
    """Short-time Fourier transform of ``(..., N, channels)`` audio.

    Args:
        audio: Sample array, time on the second-to-last axis
        n_fft: Frame length and DFT size
        hop: Frame advance in samples; must divide n_fft
        sample_rate: Recorded on the result for downstream metadata
        dtype: Floating dtype of the returned planes

    Returns:
        ComplexSpectrogram with planes of shape (..., 1 + N // hop, n_fft // 2, channels)
    """
    _check_params(n_fft, hop)
    audio = np.asarray(audio, dtype=np.float64)
    if audio.ndim < 2:
        raise DimensionError(f"stft expects (..., N, channels) audio, got shape {audio.shape}")
    n_samples = audio.shape[-2]
    if n_samples < n_fft:
        raise SignalConfigurationError(f"Audio of {n_samples} samples is shorter than one {n_fft}-sample frame")

    half = n_fft // 2
    signal = np.moveaxis(audio, -2, -1)
    pad = [(0, 0)] * (signal.ndim - 1) + [(half, half)]
    padded = np.pad(signal, pad, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft, axis=-1)[..., ::hop, :]
    spectrum = np.fft.rfft(frames * hann_window(n_fft), axis=-1)[..., :half]
    # (..., channels, T, F) -> (..., T, F, channels)
    spectrum = np.moveaxis(spectrum, -3, -1)
    return ComplexSpectrogram.from_complex(spectrum, sample_rate, hop, n_fft, dtype=dtype)


def istft(spec: ComplexSpectrogram, n_samples: int) -> Tensor:
    """Inverse STFT by weighted overlap-add, recorded on the active tape.

    Frames are inverse transformed, multiplied by the synthesis window, overlap-added and
    divided by the summed squared window, then the centring pad is cropped away.

    Returns:
        Tensor of shape (..., n_samples, channels)
    """
    _check_params(spec.n_fft, spec.hop)
    n_fft, hop, half = spec.n_fft, spec.hop, spec.n_fft // 2
    if spec.bins != half:
        raise DimensionError(f"Spectrogram has {spec.bins} bins, expected {half} for n_fft={n_fft}")
    lead = spec.real.ndim - 3
    perm = tuple(range(lead)) + (lead + 2, lead, lead + 1)
    real = tn.transpose(spec.real, perm)
    imag = tn.transpose(spec.imag, perm)

    window = hann_window(n_fft)
    frames = tn.irfft_planes(real, imag, n_fft) * Tensor(window, dtype=spec.real.dtype)
    signal = tn.overlap_add(frames, hop)

    total = signal.shape[-1]
    if n_samples <= 0 or half + n_samples > total:
        raise SignalConfigurationError(f"Cannot resynthesize {n_samples} samples from {spec.frames} frames of hop {hop}")
    window_sum = np.zeros(total)
    for t in range(spec.frames):
        window_sum[t * hop : t * hop + n_fft] += window**2
    window_sum = window_sum[half : half + n_samples]
    if window_sum.min() < MIN_WINDOW_SUM:
        raise SignalConfigurationError(f"Window sum falls to {window_sum.min():.3g} (< {MIN_WINDOW_SUM}); hop {hop} too large for n_fft {n_fft}")

    cropped = tn.tslice(signal, -1, half, n_samples) * Tensor(1.0 / window_sum, dtype=spec.real.dtype)
    back = tuple(range(lead)) + (lead + 1, lead)
    return tn.transpose(cropped, back)


def pack_subbands(spec: ComplexSpectrogram, subbands: int) -> SubbandFeature:
    """Slice the frequency axis into ``subbands`` contiguous bands stacked as channels."""
    if spec.channels != 2:
        raise DimensionError(f"Subband packing expects stereo planes, got {spec.channels} channels")
    if subbands <= 0 or spec.bins % subbands:
        raise DimensionError(f"K={subbands} does not divide F={spec.bins}")
    lead = spec.real.shape[:-3]
    frames, band_bins = spec.frames, spec.bins // subbands
    planes = tn.concat(
        [
            tn.tslice(spec.real, -1, 0, 1),
            tn.tslice(spec.imag, -1, 0, 1),
            tn.tslice(spec.real, -1, 1, 1),
            tn.tslice(spec.imag, -1, 1, 1),
        ],
        axis=-1,
    )
    banded = tn.reshape(planes, lead + (frames, subbands, band_bins, PLANES_PER_BAND))
    n = len(lead)
    perm = tuple(range(n)) + (n, n + 2, n + 1, n + 3)
    features = tn.reshape(tn.transpose(banded, perm), lead + (frames, band_bins, PLANES_PER_BAND * subbands))
    return SubbandFeature(features, subbands, spec.sample_rate, spec.hop, spec.n_fft)


def unpack_mask(mask: SubbandFeature) -> ComplexSpectrogram:
    """Inverse of :func:`pack_subbands`: a stereo complex mask ``(..., T, F, 2)``."""
    x = mask.features
    k = mask.subbands
    if x.ndim < 3 or x.shape[-1] != PLANES_PER_BAND * k:
        raise DimensionError(f"Mask of shape {x.shape} does not have {PLANES_PER_BAND * k} channels for K={k}")
    if mask.n_fft // 2 != x.shape[-2] * k:
        raise DimensionError(f"Mask of shape {x.shape} with K={k} does not cover {mask.n_fft // 2} bins")
    lead = x.shape[:-3]
    frames, band_bins = x.shape[-3], x.shape[-2]
    n = len(lead)
    split = tn.reshape(x, lead + (frames, band_bins, k, PLANES_PER_BAND))
    perm = tuple(range(n)) + (n, n + 2, n + 1, n + 3)
    planes = tn.reshape(tn.transpose(split, perm), lead + (frames, k * band_bins, PLANES_PER_BAND))
    real = tn.concat([tn.tslice(planes, -1, 0, 1), tn.tslice(planes, -1, 2, 1)], axis=-1)
    imag = tn.concat([tn.tslice(planes, -1, 1, 1), tn.tslice(planes, -1, 3, 1)], axis=-1)
    return ComplexSpectrogram(real, imag, mask.sample_rate, mask.hop, mask.n_fft)


def apply_cirm(mix: ComplexSpectrogram, mask: ComplexSpectrogram) -> ComplexSpectrogram:
    """Elementwise complex product ``mask * mix`` per stereo channel."""
    if mix.shape != mask.shape:
        raise DimensionError(f"Mask shape {mask.shape} does not match mixture shape {mix.shape}")
    real = tn.sub(tn.mul(mask.real, mix.real), tn.mul(mask.imag, mix.imag))
    imag = tn.add(tn.mul(mask.real, mix.imag), tn.mul(mask.imag, mix.real))
    return mix.like(real, imag)


def oracle_cirm(mix: ComplexSpectrogram, target: ComplexSpectrogram, clip: Optional[float] = 2.0, eps: float = 1e-8) -> ComplexSpectrogram:
    """Regularized ideal ratio ``S conj(Y) / (|Y|^2 + eps)``, each component clipped to ``[-clip, clip]``."""
    if mix.shape != target.shape:
        raise DimensionError(f"Target shape {target.shape} does not match mixture shape {mix.shape}")
    y = mix.to_complex()
    s = target.to_complex()
    ratio = s * np.conj(y) / (np.abs(y) ** 2 + eps)
    real, imag = ratio.real, ratio.imag
    if clip is not None:
        if clip <= 0:
            raise ValueError(f"clip must be positive, got {clip}")
        real = np.clip(real, -clip, clip)
        imag = np.clip(imag, -clip, clip)
    dtype = mix.real.dtype
    return mix.like(Tensor(real, dtype=dtype), Tensor(imag, dtype=dtype))
