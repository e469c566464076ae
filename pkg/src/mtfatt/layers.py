"""Parameterized building blocks and the three-stage encoder/decoder.

Layers are small callables that register their parameters in a shared
:class:`ParameterStore` at construction and compose tensor operations when called. The
layer plan of the encoder and decoder is data (:func:`layer_plan`), so the wiring code reads
channel counts, kernels and strides from :class:`LayerSpec` rows rather than constants.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np

from . import tensor as tn
from .config import ModelConfig
from .signal import SubbandFeature
from .tensor import DTYPES, BatchNormState, DimensionError, Tensor

logger = logging.getLogger(__name__)

LAYER_KINDS = ("conv2d_block", "densenet", "gated", "conv2d_transpose", "dense_out")
DENSENET_DEPTH = 4


@dataclass(frozen=True)
class LayerSpec:
    """One row of the encoder/decoder layer plan."""

    kind: str
    channels: int
    kernel: Tuple[int, int] = (3, 3)
    stride: Tuple[int, int] = (1, 1)

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"Unknown layer kind '{self.kind}'; expected one of {', '.join(LAYER_KINDS)}")
        if self.channels <= 0:
            raise ValueError(f"Layer channels must be positive, got {self.channels}")


def layer_plan(config: ModelConfig) -> List[Tuple[str, LayerSpec]]:
    """The ordered (stage, LayerSpec) plan of the encoder and decoder for ``config``."""
    w1, w2, w3 = config.encoder_channels
    out = config.input_channels
    return [
        ("EB1", LayerSpec("densenet", w1)),
        ("EB1", LayerSpec("conv2d_block", w1, (3, 3), (1, 1))),
        ("EB2", LayerSpec("densenet", w2)),
        ("EB2", LayerSpec("conv2d_block", w2, (3, 3), (2, 2))),
        ("EB3", LayerSpec("densenet", w3)),
        ("EB3", LayerSpec("conv2d_block", w3, (3, 3), (1, 2))),
        ("DB1", LayerSpec("conv2d_transpose", w3, (3, 3), (1, 2))),
        ("DB1", LayerSpec("gated", w3, (1, 1), (1, 1))),
        ("DB1", LayerSpec("densenet", w3)),
        ("DB2", LayerSpec("conv2d_transpose", w2, (3, 3), (2, 2))),
        ("DB2", LayerSpec("gated", w2, (1, 1), (1, 1))),
        ("DB2", LayerSpec("densenet", w2)),
        ("DB3", LayerSpec("conv2d_transpose", w1, (3, 3), (1, 1))),
        ("DB3", LayerSpec("gated", w1, (1, 1), (1, 1))),
        ("DB3", LayerSpec("densenet", w1)),
        ("head", LayerSpec("conv2d_block", out, (1, 1), (1, 1))),
        ("head", LayerSpec("dense_out", out, (1, 1), (1, 1))),
    ]


def stage_specs(config: ModelConfig, stage: str) -> List[LayerSpec]:
    return [spec for name, spec in layer_plan(config) if name == stage]


Shape = Tuple[int, int, int]


def shape_ledger(config: ModelConfig) -> List[Tuple[str, LayerSpec, Shape, Shape]]:
    """Walk the layer plan without computing anything: (stage, spec, input shape, output shape).

    Strided rows produce ``ceil(in / stride)``; transposed rows restore the matching
    encoder-side shape recorded on the way down.
    """
    shape: Shape = (config.segment_frames, config.subband_bins, config.input_channels)
    encoder_inputs: List[Shape] = []
    ledger = []
    for stage, spec in layer_plan(config):
        frames, bins, _ = shape
        if stage.startswith("EB") and spec.kind == "densenet":
            encoder_inputs.append(shape)
        if spec.kind == "conv2d_block":
            out = (-(-frames // spec.stride[0]), -(-bins // spec.stride[1]), spec.channels)
        elif spec.kind == "conv2d_transpose":
            target = encoder_inputs.pop()
            out = (target[0], target[1], spec.channels)
        else:
            out = (frames, bins, spec.channels)
        ledger.append((stage, spec, shape, out))
        shape = out
    return ledger


class ParameterStore:
    """Named parameters plus batch-normalization running state for one model.

    Parameters are created in construction order from a generator seeded once, so two stores
    built with the same seed and the same layer sequence hold identical values.
    """

    def __init__(self, seed: int = 0, dtype: str = "float32", bn_momentum: float = 0.99, bn_eps: float = 1e-5, elu_alpha: float = 1.0):
        self.params: Dict[str, Tensor] = {}
        self.bn_states: Dict[str, BatchNormState] = {}
        self.rng = np.random.default_rng(seed)
        self.dtype = DTYPES[dtype]
        self.bn_momentum = bn_momentum
        self.bn_eps = bn_eps
        self.elu_alpha = elu_alpha
        self.training = True

    @classmethod
    def for_config(cls, config: ModelConfig) -> "ParameterStore":
        return cls(seed=config.seed, dtype=config.dtype, bn_momentum=config.bn_momentum, bn_eps=config.bn_eps, elu_alpha=config.elu_alpha)

    def _register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params or name in self.bn_states:
            raise ValueError(f"Duplicate parameter name '{name}'")
        param = Tensor(data.astype(self.dtype), requires_grad=True, name=name)
        self.params[name] = param
        return param

    def he_uniform(self, name: str, shape: Tuple[int, ...], fan_in: int) -> Tensor:
        """Uniform initialization in ``±sqrt(6 / fan_in)``."""
        bound = np.sqrt(6.0 / fan_in)
        return self._register(name, self.rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape: Tuple[int, ...]) -> Tensor:
        return self._register(name, np.zeros(shape))

    def ones(self, name: str, shape: Tuple[int, ...]) -> Tensor:
        return self._register(name, np.ones(shape))

    def batchnorm_state(self, name: str, channels: int) -> BatchNormState:
        if name in self.bn_states:
            raise ValueError(f"Duplicate batch-norm state '{name}'")
        state = BatchNormState.create(channels, self.bn_momentum, self.bn_eps, self.dtype)
        self.bn_states[name] = state
        return state

    def __len__(self) -> int:
        return len(self.params)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return list(self.params.items())

    def count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Every persisted array by name: parameters, then running statistics."""
        arrays = {name: p.data for name, p in self.params.items()}
        for name, state in self.bn_states.items():
            arrays[f"{name}.running_mean"] = state.mean
            arrays[f"{name}.running_var"] = state.var
        return arrays

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        """Replace parameter values and running statistics; names and shapes must match exactly."""
        expected = self.state_arrays()
        missing = sorted(set(expected) - set(arrays))
        unexpected = sorted(set(arrays) - set(expected))
        if missing or unexpected:
            raise KeyError(f"State mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, value in arrays.items():
            if value.shape != expected[name].shape:
                raise DimensionError(f"'{name}' has shape {value.shape}, expected {expected[name].shape}")
        for name, p in self.params.items():
            p.data = np.array(arrays[name], dtype=self.dtype)
        for name, state in self.bn_states.items():
            state.mean = np.array(arrays[f"{name}.running_mean"], dtype=self.dtype)
            state.var = np.array(arrays[f"{name}.running_var"], dtype=self.dtype)


class ConvBlock:
    """Conv2D (no bias), batch normalization, then ELU (or sigmoid for gates)."""

    def __init__(self, store: ParameterStore, name: str, in_channels: int, out_channels: int, kernel: Tuple[int, int] = (3, 3), stride: Tuple[int, int] = (1, 1), activation: str = "elu"):
        if activation not in ("elu", "sigmoid"):
            raise ValueError(f"Unsupported activation '{activation}'")
        kh, kw = kernel
        self.store = store
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = tuple(stride)
        self.activation = activation
        self.weight = store.he_uniform(f"{name}.weight", (kh, kw, in_channels, out_channels), fan_in=kh * kw * in_channels)
        self.gamma = store.ones(f"{name}.bn.gamma", (out_channels,))
        self.beta = store.zeros(f"{name}.bn.beta", (out_channels,))
        self.state = store.batchnorm_state(f"{name}.bn", out_channels)

    @classmethod
    def from_spec(cls, store: ParameterStore, name: str, in_channels: int, spec: LayerSpec, activation: str = "elu") -> "ConvBlock":
        if spec.kind not in ("conv2d_block", "gated"):
            raise ValueError(f"ConvBlock cannot realize a '{spec.kind}' row")
        return cls(store, name, in_channels, spec.channels, spec.kernel, spec.stride, activation)

    def __call__(self, x: Tensor) -> Tensor:
        y = tn.conv2d(x, self.weight, None, self.stride)
        y = tn.batchnorm(y, self.gamma, self.beta, self.state, self.store.training)
        if self.activation == "sigmoid":
            return tn.sigmoid(y)
        return tn.elu(y, self.store.elu_alpha)


class DenseNetBlock:
    """Four conv blocks; block ``i`` sees the channel concatenation of the input and blocks ``< i``."""

    def __init__(self, store: ParameterStore, name: str, in_channels: int, spec: LayerSpec):
        if spec.kind != "densenet":
            raise ValueError(f"DenseNetBlock cannot realize a '{spec.kind}' row")
        growth = spec.channels
        self.out_channels = growth
        self.blocks = [
            ConvBlock(store, f"{name}.block{i}", in_channels + i * growth, growth, spec.kernel, spec.stride)
            for i in range(DENSENET_DEPTH)
        ]

    @property
    def input_widths(self) -> List[int]:
        return [b.in_channels for b in self.blocks]

    def __call__(self, x: Tensor) -> Tensor:
        features = [x]
        out = x
        for block in self.blocks:
            out = block(features[0] if len(features) == 1 else tn.concat(features, axis=-1))
            features.append(out)
        return out


class GatedBlock:
    """Upsample the decoder feature, gate the encoder skip with it, and fuse both.

    ``u = ConvT(decoder_in)`` sized to the skip; ``g = sigmoid-block(ELU-block(u))`` with the
    skip's channel count; output is the 1x1 fusion block over ``concat(u, skip * g)``.
    """

    def __init__(self, store: ParameterStore, name: str, in_channels: int, skip_channels: int, upsample: LayerSpec, fuse: LayerSpec):
        if upsample.kind != "conv2d_transpose" or fuse.kind != "gated":
            raise ValueError(f"GatedBlock needs conv2d_transpose and gated rows, got {upsample.kind} and {fuse.kind}")
        channels = upsample.channels
        kh, kw = upsample.kernel
        self.stride = upsample.stride
        self.out_channels = fuse.channels
        self.skip_channels = skip_channels
        self.weight = store.he_uniform(f"{name}.upsample.weight", (kh, kw, channels, in_channels), fan_in=kh * kw * in_channels)
        self.bias = store.zeros(f"{name}.upsample.bias", (channels,))
        self.gate_hidden = ConvBlock(store, f"{name}.gate_hidden", channels, skip_channels, (3, 3))
        self.gate = ConvBlock(store, f"{name}.gate", skip_channels, skip_channels, (1, 1), activation="sigmoid")
        self.fuse = ConvBlock.from_spec(store, f"{name}.fuse", channels + skip_channels, fuse)

    def upsample(self, x: Tensor, target: Tuple[int, int]) -> Tensor:
        return tn.conv2d_transpose(x, self.weight, self.bias, self.stride, target)

    def __call__(self, decoder_in: Tensor, skip: Tensor) -> Tensor:
        if skip.shape[-1] != self.skip_channels:
            raise DimensionError(f"Skip has {skip.shape[-1]} channels, gated block expects {self.skip_channels}")
        u = self.upsample(decoder_in, skip.shape[-3:-1])
        if u.shape[:-1] != skip.shape[:-1]:
            raise DimensionError(f"Upsampled feature {u.shape} does not match skip {skip.shape}")
        g = self.gate(self.gate_hidden(u))
        return self.fuse(tn.concat([u, tn.mul(skip, g)], axis=-1))


@dataclass
class EncoderOutput:
    """Bottleneck plus the skips consumed by DB1, DB2 and DB3, in that order."""

    bottleneck: Tensor
    skips: List[Tensor]


class Encoder:
    """Three encoder blocks, each a DenseNet block followed by a (possibly strided) conv block."""

    def __init__(self, store: ParameterStore, config: ModelConfig, name: str = "encoder"):
        specs = stage_specs(config, "EB1") + stage_specs(config, "EB2") + stage_specs(config, "EB3")
        self.in_channels = config.input_channels
        self.stages: List[Tuple[DenseNetBlock, ConvBlock]] = []
        channels = self.in_channels
        for i in range(3):
            dense_spec, conv_spec = specs[2 * i], specs[2 * i + 1]
            dense = DenseNetBlock(store, f"{name}.eb{i + 1}.densenet", channels, dense_spec)
            conv = ConvBlock.from_spec(store, f"{name}.eb{i + 1}.conv", dense.out_channels, conv_spec)
            self.stages.append((dense, conv))
            channels = conv.out_channels
        self.out_channels = channels

    def __call__(self, x: Tensor) -> EncoderOutput:
        if x.shape[-1] != self.in_channels:
            raise DimensionError(f"Encoder expects {self.in_channels} input channels, got shape {x.shape}")
        stage_inputs = []
        for dense, conv in self.stages:
            stage_inputs.append(x)
            x = conv(dense(x))
            logger.debug(f"Encoder stage output {x.shape}")
        # DB1 pairs with the EB3 input, DB2 with the EB2 input, DB3 with the EB1 input
        return EncoderOutput(bottleneck=x, skips=stage_inputs[::-1])


class Decoder:
    """Three gated decoder blocks, then the conv block and per-position tanh head."""

    def __init__(self, store: ParameterStore, config: ModelConfig, name: str = "decoder"):
        w1, w2, _ = config.encoder_channels
        skip_channels = [w2, w1, config.input_channels]
        self.mask_factor = config.mask_factor
        self.blocks: List[Tuple[GatedBlock, DenseNetBlock]] = []
        channels = config.separator_channels
        for i, stage in enumerate(("DB1", "DB2", "DB3")):
            upsample, fuse, dense_spec = stage_specs(config, stage)
            gated = GatedBlock(store, f"{name}.db{i + 1}.gated", channels, skip_channels[i], upsample, fuse)
            dense = DenseNetBlock(store, f"{name}.db{i + 1}.densenet", gated.out_channels, dense_spec)
            self.blocks.append((gated, dense))
            channels = dense.out_channels
        head_conv, head_dense = stage_specs(config, "head")
        self.head = ConvBlock.from_spec(store, f"{name}.head.conv", channels, head_conv)
        width = head_dense.channels
        self.dense_weight = store.he_uniform(f"{name}.head.dense.weight", (head_conv.channels, width), fan_in=head_conv.channels)
        self.dense_bias = store.zeros(f"{name}.head.dense.bias", (width,))

    def __call__(self, bottleneck: Tensor, skips: Sequence[Tensor]) -> Tensor:
        if len(skips) != len(self.blocks):
            raise DimensionError(f"Decoder needs {len(self.blocks)} skips, got {len(skips)}")
        x = bottleneck
        for (gated, dense), skip in zip(self.blocks, skips):
            x = dense(gated(x, skip))
            logger.debug(f"Decoder stage output {x.shape}")
        h = self.head(x)
        y = tn.tanh(tn.add(tn.matmul(h, self.dense_weight), self.dense_bias))
        return tn.mul(y, self.mask_factor)


def encoder(x: SubbandFeature, module: Encoder) -> EncoderOutput:
    return module(x.features)


def decoder(bottleneck: Tensor, skips: Sequence[Tensor], module: Decoder, like: SubbandFeature) -> SubbandFeature:
    """Run the decoder and label the mask with the STFT metadata of the encoder input ``like``."""
    mask = module(bottleneck, skips)
    return SubbandFeature(mask, like.subbands, like.sample_rate, like.hop, like.n_fft)


# Analytic parameter counts of the blocks above.


def conv_block_params(cin: int, cout: int, k: int) -> int:
    return k * k * cin * cout + 2 * cout


def densenet_params(cin: int, growth: int) -> int:
    return sum(conv_block_params(cin + i * growth, growth, 3) for i in range(DENSENET_DEPTH))


def gated_params(cin: int, channels: int, skip_channels: int) -> int:
    upsample = 9 * cin * channels + channels
    gate = conv_block_params(channels, skip_channels, 3) + conv_block_params(skip_channels, skip_channels, 1)
    return upsample + gate + conv_block_params(channels + skip_channels, channels, 1)


def encoder_params(config: ModelConfig) -> int:
    total, cin = 0, config.input_channels
    for width in config.encoder_channels:
        total += densenet_params(cin, width) + conv_block_params(width, width, 3)
        cin = width
    return total


def decoder_params(config: ModelConfig) -> int:
    w1, w2, w3 = config.encoder_channels
    total, cin = 0, w3
    for width, skip in ((w3, w2), (w2, w1), (w1, config.input_channels)):
        total += gated_params(cin, width, skip) + densenet_params(width, width)
        cin = width
    out = config.input_channels
    return total + conv_block_params(cin, out, 1) + out * out + out
