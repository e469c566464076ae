"""Fast invariant suite run by ``mtfatt selftest``.

Each group returns a :class:`GroupResult`; a group fails on the first violated check.
"""

import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import tensor as tn
from .attention import AttentionAxis, SelfAttention, segmented_attention
from .config import ModelConfig
from .errors import MtfattError
from .layers import ConvBlock, ParameterStore, shape_ledger
from .model import build
from .signal import istft, pack_subbands, stft, unpack_mask
from .tensor import Tensor

logger = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-3
ORACLE_TOLERANCE = 1e-5
ROUNDTRIP_TOLERANCE = 1e-4
ROUNDTRIP_SIGNALS = 100
FAULTS = ("softmax-scale",)


class SelftestFailure(MtfattError):
    """A violated invariant."""

    error_type = "selftest_failure"


@dataclass
class GroupResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def to_line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _expect(condition: bool, message: str) -> None:
    if not condition:
        raise SelftestFailure(message)


def _random(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype="float64")


def _smooth_loss(out: Tensor, weights: np.ndarray) -> Tensor:
    return tn.tsum(tn.mul(out, Tensor(weights, dtype="float64")))


def check_gradients(rng: np.random.Generator, end_to_end_samples: int = 50) -> str:
    """Finite-difference checks for every differentiable operation and the desk-scale model."""
    cases: Dict[str, Callable[[], float]] = {}

    a, b = _random(rng, 4, 5), _random(rng, 5, 3)
    r = rng.standard_normal((4, 3))
    cases["matmul"] = lambda: tn.gradient_check(lambda: _smooth_loss(tn.matmul(a, b), r), [a, b])

    s = _random(rng, 3, 4)
    rs = rng.standard_normal((3, 4))
    cases["softmax"] = lambda: tn.gradient_check(lambda: _smooth_loss(tn.softmax_rows(s, 1.7), rs), [s])

    x, w, bias = _random(rng, 5, 6, 2), _random(rng, 3, 3, 2, 3), _random(rng, 3)
    rc = rng.standard_normal((3, 3, 3))
    cases["conv2d"] = lambda: tn.gradient_check(lambda: _smooth_loss(tn.conv2d(x, w, bias, (2, 2)), rc), [x, w, bias])

    xt, wt = _random(rng, 3, 3, 2), _random(rng, 3, 3, 4, 2)
    rt = rng.standard_normal((5, 6, 4))
    cases["conv2d_transpose"] = lambda: tn.gradient_check(lambda: _smooth_loss(tn.conv2d_transpose(xt, wt, None, (2, 2), (5, 6)), rt), [xt, wt])

    xb, gamma, beta = _random(rng, 2, 3, 4, 3), _random(rng, 3), _random(rng, 3)
    rb = rng.standard_normal((2, 3, 4, 3))
    state = tn.BatchNormState.create(3, dtype=np.float64)
    cases["batchnorm"] = lambda: tn.gradient_check(lambda: _smooth_loss(tn.batchnorm(xb, gamma, beta, state, True), rb), [xb, gamma, beta])

    xe = _random(rng, 4, 5)
    re = rng.standard_normal((4, 5))
    for name, op in (("elu", tn.elu), ("tanh", tn.tanh), ("sigmoid", tn.sigmoid)):
        cases[name] = lambda op=op: tn.gradient_check(lambda: _smooth_loss(op(xe), re), [xe])

    pr, pi = _random(rng, 3, 8), _random(rng, 3, 8)
    ri = rng.standard_normal((3, 16))
    cases["irfft_planes"] = lambda: tn.gradient_check(lambda: _smooth_loss(tn.irfft_planes(pr, pi, 16), ri), [pr, pi])

    frames = _random(rng, 2, 4, 8)
    ro = rng.standard_normal((2, 20))
    cases["overlap_add"] = lambda: tn.gradient_check(lambda: _smooth_loss(tn.overlap_add(frames, 4), ro), [frames])

    store = ParameterStore(seed=int(rng.integers(1 << 31)), dtype="float64")
    block = ConvBlock(store, "block", 2, 3)
    xc = _random(rng, 2, 4, 5, 2)
    rcb = rng.standard_normal((2, 4, 5, 3))
    cases["conv_block"] = lambda: tn.gradient_check(lambda: _smooth_loss(block(xc), rcb), [xc] + list(store))

    model = build(ModelConfig.desk_scale(dtype="float64", seed=int(rng.integers(1 << 31))))
    mix = rng.standard_normal((model.config.segment_samples, 2)) * 0.1
    rm = rng.standard_normal((model.config.segment_samples, 2))
    cases["end_to_end"] = lambda: tn.gradient_check(lambda: _smooth_loss(model.forward(mix)[0], rm), model.parameters(), samples=end_to_end_samples, rng=rng, floor=1e-6)

    worst = 0.0
    for name, run in cases.items():
        error = run()
        _expect(error < GRADIENT_TOLERANCE, f"{name} gradient relative error {error:.2e} >= {GRADIENT_TOLERANCE}")
        worst = max(worst, error)
    return f"{len(cases)} checks, worst relative error {worst:.1e}"


def check_shape_ledger(rng: np.random.Generator) -> str:
    """Full-scale plan shapes, and a desk-scale forward pass agreeing with the plan."""
    full = shape_ledger(ModelConfig.full_scale())
    outputs = {(stage, spec.kind): out for stage, spec, _, out in full}
    expected = {
        ("EB1", "conv2d_block"): (240, 1024, 32),
        ("EB2", "conv2d_block"): (120, 512, 64),
        ("EB3", "conv2d_block"): (120, 256, 64),
        ("DB1", "conv2d_transpose"): (120, 512, 64),
        ("DB2", "conv2d_transpose"): (240, 1024, 64),
        ("DB3", "conv2d_transpose"): (240, 1024, 32),
        ("head", "dense_out"): (240, 1024, 16),
    }
    for key, shape in expected.items():
        _expect(outputs[key] == shape, f"full-scale {key[0]} {key[1]} produces {outputs[key]}, expected {shape}")
    _expect(ModelConfig.full_scale().bottleneck_shape == (120, 256, 64), "full-scale bottleneck is not 120x256x64")

    config = ModelConfig.desk_scale()
    model = build(config)
    mix = rng.standard_normal((config.segment_samples, 2)) * 0.1
    with tn.no_tape():
        out = model.forward_full(mix)
    _expect(out.bottleneck.shape == (32, 16, 16), f"desk-scale bottleneck is {out.bottleneck.shape}, expected (32, 16, 16)")
    planned = {(stage, spec.kind): shape for stage, spec, _, shape in shape_ledger(config)}
    _expect(out.bottleneck.shape == planned[("EB3", "conv2d_block")], f"desk-scale bottleneck disagrees with the plan: {planned[('EB3', 'conv2d_block')]}")
    _expect(out.mask.shape == (config.segment_frames, config.bins, 2), f"desk-scale mask has shape {out.mask.shape}")
    _expect(out.estimate.shape == mix.shape, f"estimate shape {out.estimate.shape} differs from input {mix.shape}")
    return f"{len(full)} plan rows; bottleneck 120x256x64 (full), 32x16x16 (desk)"


def naive_attention(layer: SelfAttention, x: np.ndarray) -> np.ndarray:
    """Reference self-attention with explicit loops over the attended axis."""
    inp = Tensor(x, dtype="float64")
    q, k, v = (t.data for t in layer.projections(inp))
    frames, bins, half = q.shape
    if layer.axis is AttentionAxis.TEMPORAL:
        seq = [lambda a, i=i: a[i].reshape(-1) for i in range(frames)]
        length, scale = frames, math.sqrt(half * bins)
    else:
        seq = [lambda a, i=i: a[:, i].reshape(-1) for i in range(bins)]
        length, scale = bins, math.sqrt(half * frames)
    attended = np.zeros_like(v)
    for i in range(length):
        scores = np.array([np.dot(seq[i](q), seq[j](k)) / scale for j in range(length)])
        weights = np.exp(scores - scores.max())
        weights /= weights.sum()
        row = sum(weights[j] * seq[j](v) for j in range(length))
        if layer.axis is AttentionAxis.TEMPORAL:
            attended[i] = row.reshape(bins, half)
        else:
            attended[:, i] = row.reshape(frames, half)
    return layer.output(Tensor(attended, dtype="float64")).data + x


def check_attention(rng: np.random.Generator, scale_multiplier: float = 1.0, trials: int = 20) -> str:
    """Naive-loop oracles for both axes, then the segment identities."""
    store = ParameterStore(seed=int(rng.integers(1 << 31)), dtype="float64")
    layers = [SelfAttention(store, f"{axis.value}", 8, axis) for axis in AttentionAxis]
    for layer in layers:
        layer.scale_multiplier = scale_multiplier
    worst = 0.0
    with tn.no_tape():
        for _ in range(trials):
            x = rng.standard_normal((6, 4, 8))
            for layer in layers:
                got = layer(Tensor(x, dtype="float64")).data
                error = float(np.max(np.abs(got - naive_attention(layer, x))))
                _expect(error < ORACLE_TOLERANCE, f"{layer.axis.value} attention deviates from the loop reference by {error:.2e}")
                worst = max(worst, error)
                weights = layer.weights(Tensor(x, dtype="float64")).data
                _expect(bool(np.allclose(weights.sum(axis=-1), 1.0, atol=1e-6)), f"{layer.axis.value} attention rows do not sum to 1")

        x = Tensor(rng.standard_normal((8, 8, 8)), dtype="float64")
        for layer in layers:
            _expect(np.array_equal(segmented_attention(layer, x, 1).data, layer(x).data), f"{layer.axis.value} P=1 differs from plain attention")
            axis = -2 if layer.axis is AttentionAxis.TEMPORAL else -3
            manual = tn.concat([layer(tn.tslice(x, axis, 0, 4)), layer(tn.tslice(x, axis, 4, 4))], axis=axis)
            _expect(np.array_equal(segmented_attention(layer, x, 2).data, manual.data), f"{layer.axis.value} P=2 differs from slice-attend-concat")
    return f"{trials} random inputs per axis, worst deviation {worst:.1e}; segment identities hold"


def band_limited_noise(rng: np.random.Generator, n: int, channels: int = 2, fraction: float = 0.5) -> np.ndarray:
    """White noise with every DFT bin above ``fraction`` of Nyquist removed."""
    noise = rng.standard_normal((n, channels))
    spectrum = np.fft.rfft(noise, axis=0)
    spectrum[int(fraction * spectrum.shape[0]) :] = 0.0
    return np.fft.irfft(spectrum, n=n, axis=0)


def check_stft(rng: np.random.Generator, signals: int = ROUNDTRIP_SIGNALS) -> str:
    """Interior round-trip error of istft(stft(x)) and exact subband pack/unpack."""
    n_fft, hop, n = 256, 32, 4096
    worst = 0.0
    with tn.no_tape():
        for _ in range(signals):
            x = band_limited_noise(rng, n)
            spec = stft(x, n_fft, hop, dtype="float64")
            y = istft(spec, n).data
            interior = slice(n_fft, n - n_fft)
            error = float(np.linalg.norm(y[interior] - x[interior]) / np.linalg.norm(x[interior]))
            _expect(error < ROUNDTRIP_TOLERANCE, f"STFT round trip relative error {error:.2e}")
            worst = max(worst, error)
            unpacked = unpack_mask(pack_subbands(spec, 4))
            _expect(
                np.array_equal(unpacked.real.data, spec.real.data) and np.array_equal(unpacked.imag.data, spec.imag.data),
                "subband unpack(pack(x)) is not the identity",
            )
    return f"{signals} signals, worst interior relative error {worst:.1e}; pack/unpack exact"


GROUPS = ("gradients", "shape-ledger", "attention-oracles", "stft-roundtrip")


def run_selftest(groups: Optional[Sequence[str]] = None, inject_fault: Optional[str] = None, seed: int = 0) -> List[GroupResult]:
    """Run the requested groups (all by default) and collect their results."""
    if inject_fault is not None and inject_fault not in FAULTS:
        raise ValueError(f"Unknown fault '{inject_fault}'; available: {', '.join(FAULTS)}")
    multiplier = 2.0 if inject_fault == "softmax-scale" else 1.0
    rng = np.random.default_rng(seed)
    checks: Dict[str, Callable[[], str]] = {
        "gradients": lambda: check_gradients(rng),
        "shape-ledger": lambda: check_shape_ledger(rng),
        "attention-oracles": lambda: check_attention(rng, multiplier),
        "stft-roundtrip": lambda: check_stft(rng),
    }
    results = []
    for name in groups or GROUPS:
        if name not in checks:
            raise ValueError(f"Unknown selftest group '{name}'; available: {', '.join(GROUPS)}")
        started = time.monotonic()
        try:
            detail, passed = checks[name](), True
        except SelftestFailure as e:
            detail, passed = e.message, False
        result = GroupResult(name, passed, detail, time.monotonic() - started)
        (logger.info if passed else logger.error)(result.to_line())
        results.append(result)
    return results
