"""Temporal/frequency self-attention, residual attention blocks and the separators.

Feature maps are ``(..., T', F', C)``. Temporal attention treats frames as the sequence and
folds frequency into the embedding; frequency attention does the converse. Neither uses a
positional encoding, so both are permutation-equivariant along the attended axis.
"""

import enum
import logging
import math
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

from . import tensor as tn
from .config import ModelConfig
from .layers import ConvBlock, ParameterStore, conv_block_params
from .tensor import DimensionError, Tensor

logger = logging.getLogger(__name__)


class AttentionAxis(enum.Enum):
    TEMPORAL = "temporal"
    FREQUENCY = "frequency"


@dataclass(frozen=True)
class RaBlockSpec:
    """Channels, segment count and enabled attention paths of one residual attention block."""

    channels: int
    segments: int = 1
    temporal: bool = True
    frequency: bool = True

    @property
    def paths(self) -> int:
        return int(self.temporal) + int(self.frequency)

    def check(self, frames: int, bins: int) -> None:
        """Raise DimensionError unless P divides F' (temporal path) and T' (frequency path)."""
        p = self.segments
        if p <= 0:
            raise DimensionError(f"Segment count must be positive, got {p}")
        if self.temporal and bins % p:
            raise DimensionError(f"P={p} does not divide F'={bins} for segment-wise temporal attention")
        if self.frequency and frames % p:
            raise DimensionError(f"P={p} does not divide T'={frames} for segment-wise frequency attention")


class SelfAttention:
    """Scaled dot-product self-attention along time or frequency, with a residual connection.

    Query, key and value come from 1x1 conv blocks halving the channels; the attended
    features are restored to ``C`` channels by a 1x1 conv block and added to the input.
    ``scale_multiplier`` scales the softmax temperature and exists for fault injection.
    """

    def __init__(self, store: ParameterStore, name: str, channels: int, axis: AttentionAxis):
        if channels % 2:
            raise DimensionError(f"Self-attention needs an even channel count, got {channels}")
        half = channels // 2
        self.axis = axis
        self.channels = channels
        self.query = ConvBlock(store, f"{name}.query", channels, half, (1, 1))
        self.key = ConvBlock(store, f"{name}.key", channels, half, (1, 1))
        self.value = ConvBlock(store, f"{name}.value", channels, half, (1, 1))
        self.output = ConvBlock(store, f"{name}.output", half, channels, (1, 1))
        self.scale_multiplier = 1.0

    def _to_sequence(self, x: Tensor) -> Tensor:
        # (..., T, F, h) -> (..., L, D) with L the attended axis
        lead = x.shape[:-3]
        n = len(lead)
        if self.axis is AttentionAxis.FREQUENCY:
            x = tn.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
        return tn.reshape(x, lead + (x.shape[-3], x.shape[-2] * x.shape[-1]))

    def _from_sequence(self, seq: Tensor, like: Tuple[int, ...]) -> Tensor:
        lead, (frames, bins, half) = like[:-3], like[-3:]
        n = len(lead)
        if self.axis is AttentionAxis.FREQUENCY:
            x = tn.reshape(seq, lead + (bins, frames, half))
            return tn.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
        return tn.reshape(seq, lead + (frames, bins, half))

    def scale(self, shape: Tuple[int, ...]) -> float:
        """Softmax divisor ``sqrt(C/2 * F')`` (temporal) or ``sqrt(C/2 * T')`` (frequency)."""
        frames, bins, channels = shape[-3:]
        other = bins if self.axis is AttentionAxis.TEMPORAL else frames
        return math.sqrt(channels // 2 * other) * self.scale_multiplier

    def projections(self, x: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        return self.query(x), self.key(x), self.value(x)

    def weights(self, x: Tensor) -> Tensor:
        """The row-stochastic attention matrix ``(..., L, L)`` for input ``x``."""
        q, k, _ = self.projections(x)
        return self._weights(self._to_sequence(q), self._to_sequence(k), x.shape)

    def _weights(self, q: Tensor, k: Tensor, shape: Tuple[int, ...]) -> Tensor:
        n = q.ndim
        scores = tn.matmul(q, tn.transpose(k, tuple(range(n - 2)) + (n - 1, n - 2)))
        return tn.softmax_rows(scores, self.scale(shape))

    def attend(self, x: Tensor) -> Tensor:
        """Attention output before the residual addition."""
        if x.ndim < 3 or x.shape[-1] != self.channels:
            raise DimensionError(f"Self-attention expects (..., T', F', {self.channels}) input, got {x.shape}")
        q, k, v = self.projections(x)
        weights = self._weights(self._to_sequence(q), self._to_sequence(k), x.shape)
        attended = tn.matmul(weights, self._to_sequence(v))
        return self.output(self._from_sequence(attended, v.shape))

    def __call__(self, x: Tensor) -> Tensor:
        return tn.add(self.attend(x), x)


def segmented_attention(attention: SelfAttention, x: Tensor, segments: int) -> Tensor:
    """Apply ``attention`` independently to ``segments`` contiguous slices and concatenate.

    Temporal attention is sliced along frequency, frequency attention along time. One
    segment is the plain attention.
    """
    if segments == 1:
        return attention(x)
    axis = -2 if attention.axis is AttentionAxis.TEMPORAL else -3
    size = x.shape[axis]
    if segments <= 0 or size % segments:
        raise DimensionError(f"P={segments} does not divide axis of size {size}")
    width = size // segments
    parts = [attention(tn.tslice(x, axis, i * width, width)) for i in range(segments)]
    return tn.concat(parts, axis=axis)


def segmented_tsa(attention: SelfAttention, x: Tensor, segments: int) -> Tensor:
    if attention.axis is not AttentionAxis.TEMPORAL:
        raise ValueError("segmented_tsa needs a temporal attention module")
    return segmented_attention(attention, x, segments)


def segmented_fsa(attention: SelfAttention, x: Tensor, segments: int) -> Tensor:
    if attention.axis is not AttentionAxis.FREQUENCY:
        raise ValueError("segmented_fsa needs a frequency attention module")
    return segmented_attention(attention, x, segments)


class RaBlock:
    """Two residual conv blocks, optional temporal/frequency attention, 1x1 fusion."""

    def __init__(self, store: ParameterStore, name: str, spec: RaBlockSpec):
        c = spec.channels
        self.spec = spec
        self.residual = [
            (ConvBlock(store, f"{name}.res{i}.conv0", c, c), ConvBlock(store, f"{name}.res{i}.conv1", c, c))
            for i in range(2)
        ]
        self.temporal: Optional[SelfAttention] = SelfAttention(store, f"{name}.tsa", c, AttentionAxis.TEMPORAL) if spec.temporal else None
        self.frequency: Optional[SelfAttention] = SelfAttention(store, f"{name}.fsa", c, AttentionAxis.FREQUENCY) if spec.frequency else None
        self.fuse = ConvBlock(store, f"{name}.fuse", (spec.paths + 1) * c, c, (1, 1))

    def attention_layers(self) -> Iterator[SelfAttention]:
        for layer in (self.temporal, self.frequency):
            if layer is not None:
                yield layer

    def residual_features(self, x: Tensor) -> Tensor:
        for first, second in self.residual:
            x = tn.add(second(first(x)), x)
        return x

    def __call__(self, x: Tensor) -> Tensor:
        self.spec.check(x.shape[-3], x.shape[-2])
        res = self.residual_features(x)
        features: List[Tensor] = []
        if self.temporal is not None:
            features.append(segmented_tsa(self.temporal, res, self.spec.segments))
        if self.frequency is not None:
            features.append(segmented_fsa(self.frequency, res, self.spec.segments))
        features.append(res)
        return self.fuse(features[0] if len(features) == 1 else tn.concat(features, axis=-1))


class SingleScaleSeparator:
    """A chain of RA blocks with P=1; with both paths disabled this is the no-attention stack."""

    def __init__(self, store: ParameterStore, config: ModelConfig, temporal: bool = True, frequency: bool = True, name: str = "separator"):
        c = config.separator_channels
        self.blocks = [RaBlock(store, f"{name}.ra{i}", RaBlockSpec(c, 1, temporal, frequency)) for i in range(config.ra_blocks)]

    def attention_layers(self) -> Iterator[SelfAttention]:
        for block in self.blocks:
            yield from block.attention_layers()

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class MultiScaleSeparator:
    """Two parallel RA chains, P ascending in one and descending in the other, fused by a 1x1 block."""

    def __init__(self, store: ParameterStore, config: ModelConfig, temporal: bool = True, frequency: bool = True, name: str = "separator"):
        c = config.separator_channels
        schedule = list(config.p_schedule)
        self.ascending = [RaBlock(store, f"{name}.up{i}", RaBlockSpec(c, p, temporal, frequency)) for i, p in enumerate(schedule)]
        self.descending = [RaBlock(store, f"{name}.down{i}", RaBlockSpec(c, p, temporal, frequency)) for i, p in enumerate(reversed(schedule))]
        self.fuse = ConvBlock(store, f"{name}.fuse", 2 * c, c, (1, 1))

    def attention_layers(self) -> Iterator[SelfAttention]:
        for block in self.ascending + self.descending:
            yield from block.attention_layers()

    def __call__(self, x: Tensor) -> Tensor:
        a = x
        for block in self.ascending:
            a = block(a)
        b = x
        for block in self.descending:
            b = block(b)
        return self.fuse(tn.concat([a, b], axis=-1))


VARIANT_PATHS = {
    "noAtt": (False, False),
    "TAtt": (True, False),
    "FAtt": (False, True),
    "TFAtt": (True, True),
    "MTFAtt": (True, True),
}


def build_separator(store: ParameterStore, config: ModelConfig):
    """The separator of ``config.variant``."""
    temporal, frequency = VARIANT_PATHS[config.variant]
    if config.variant == "MTFAtt":
        return MultiScaleSeparator(store, config, temporal, frequency)
    return SingleScaleSeparator(store, config, temporal, frequency)


def set_scale_multiplier(separator, value: float) -> int:
    """Set the softmax temperature multiplier on every attention layer; returns how many were changed."""
    count = 0
    for layer in separator.attention_layers():
        layer.scale_multiplier = value
        count += 1
    if value != 1.0:
        logger.warning(f"Attention softmax scale multiplied by {value} on {count} layers")
    return count


def attention_params(channels: int) -> int:
    half = channels // 2
    return 3 * conv_block_params(channels, half, 1) + conv_block_params(half, channels, 1)


def ra_block_params(channels: int, paths: int) -> int:
    residual = 4 * conv_block_params(channels, channels, 3)
    return residual + paths * attention_params(channels) + conv_block_params((paths + 1) * channels, channels, 1)


def separator_params(config: ModelConfig) -> int:
    c = config.separator_channels
    temporal, frequency = VARIANT_PATHS[config.variant]
    paths = int(temporal) + int(frequency)
    if config.variant == "MTFAtt":
        return 2 * len(config.p_schedule) * ra_block_params(c, paths) + conv_block_params(2 * c, c, 1)
    return config.ra_blocks * ra_block_params(c, paths)
