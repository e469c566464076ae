"""Joint time/frequency loss, Adam with plateau decay, augmentation and the training loop."""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as tn
from .config import TrainingConfig
from .dataio import SegmentDataset, save_checkpoint
from .errors import MtfattError
from .model import SeparationModel
from .signal import ComplexSpectrogram, stft
from .tensor import DimensionError, Tape, Tensor

logger = logging.getLogger(__name__)


class TrainingError(MtfattError):
    """Exception raised when training cannot proceed (empty dataset, non-finite loss or gradient)."""

    error_type = "training_error"


@dataclass
class LossBreakdown:
    """Loss components; ``total`` is exactly ``l_time + alpha * l_freq``."""

    l_time: float
    l_freq: float
    alpha: float = 0.1

    @property
    def total(self) -> float:
        return self.l_time + self.alpha * self.l_freq


def loss_time(target: np.ndarray, estimate: Tensor) -> Tensor:
    """Mean absolute error over every sample and channel."""
    target = tn.as_tensor(target, like=estimate)
    if target.shape != estimate.shape:
        raise DimensionError(f"Time loss operands differ in shape: {target.shape} vs {estimate.shape}")
    return tn.mean(tn.tabs(tn.sub(estimate, target)))


def loss_freq(target: ComplexSpectrogram, estimate: ComplexSpectrogram) -> Tensor:
    """Mean absolute real-part error plus mean absolute imaginary-part error."""
    if target.shape != estimate.shape:
        raise DimensionError(f"Spectral loss operands differ in shape: {target.shape} vs {estimate.shape}")
    real = tn.mean(tn.tabs(tn.sub(estimate.real, target.real)))
    imag = tn.mean(tn.tabs(tn.sub(estimate.imag, target.imag)))
    return tn.add(real, imag)


def joint_loss(
    target: np.ndarray, estimate: Tensor, target_spec: ComplexSpectrogram, estimate_spec: ComplexSpectrogram, alpha: float = 0.1
) -> Tuple[Tensor, LossBreakdown]:
    """``l_time + alpha * l_freq`` as a differentiable scalar, with its breakdown."""
    l_time = loss_time(target, estimate)
    l_freq = loss_freq(target_spec, estimate_spec)
    total = tn.add(l_time, tn.mul(l_freq, alpha))
    return total, LossBreakdown(float(l_time.data), float(l_freq.data), alpha)


@dataclass
class OptimizerState:
    """Adam moments plus plateau-decay bookkeeping."""

    first: Dict[str, np.ndarray]
    second: Dict[str, np.ndarray]
    lr: float = 1e-3
    step: int = 0
    plateau: int = 0
    best: float = math.inf
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.8
    patience: int = 10

    @classmethod
    def create(cls, params: Sequence[Tensor], config: Optional[TrainingConfig] = None) -> "OptimizerState":
        config = config or TrainingConfig()
        first = {_key(i, p): np.zeros_like(p.data) for i, p in enumerate(params)}
        second = {_key(i, p): np.zeros_like(p.data) for i, p in enumerate(params)}
        return cls(
            first,
            second,
            lr=config.learning_rate,
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.adam_eps,
            decay=config.lr_decay,
            patience=config.lr_patience,
        )


def _key(index: int, param: Tensor) -> str:
    return param.name if param.name is not None else f"param{index}"


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: OptimizerState, lr: Optional[float] = None) -> None:
    """One bias-corrected Adam update; a missing gradient counts as zero.

    Raises:
        TrainingError: If any gradient is non-finite; no parameter or moment is modified.
    """
    lr = state.lr if lr is None else lr
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    resolved = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros_like(p.data) if g is None else np.asarray(g)
        if g.shape != p.shape:
            raise DimensionError(f"Gradient shape {g.shape} does not match parameter {_key(i, p)} of shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"Non-finite gradient for parameter {_key(i, p)}; step aborted")
        resolved.append(g)

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**state.step
    correction2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, resolved)):
        key = _key(i, p)
        m = b1 * state.first[key] + (1.0 - b1) * g
        v = b2 * state.second[key] + (1.0 - b2) * g * g
        state.first[key] = m.astype(p.dtype)
        state.second[key] = v.astype(p.dtype)
        if lr == 0.0:
            continue
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)


def lr_schedule(state: OptimizerState, val_loss: float) -> float:
    """Multiply the learning rate by ``decay`` after ``patience`` epochs without improvement."""
    if val_loss < state.best:
        state.best = val_loss
        state.plateau = 0
    else:
        state.plateau += 1
        if state.plateau >= state.patience:
            state.lr *= state.decay
            state.plateau = 0
            logger.info(f"Validation loss plateaued for {state.patience} epochs; learning rate now {state.lr:.6g}")
    return state.lr


@dataclass
class StemBatch:
    """Per-stem stereo segments ``(B, N, 2)`` and their mixture."""

    stems: Dict[str, np.ndarray]
    mixture: np.ndarray

    @classmethod
    def from_stems(cls, stems: Dict[str, np.ndarray]) -> "StemBatch":
        return cls(stems, sum_stems(stems))

    @property
    def size(self) -> int:
        return self.mixture.shape[0]


def sum_stems(stems: Dict[str, np.ndarray]) -> np.ndarray:
    """Left-to-right sum in stem order."""
    arrays = list(stems.values())
    total = arrays[0].copy()
    for a in arrays[1:]:
        total = total + a
    return total


def swap_channels(audio: np.ndarray) -> np.ndarray:
    return audio[..., ::-1].copy()


def augment(batch: StemBatch, rng: np.random.Generator, swap_prob: float = 0.5, remix_prob: float = 1.0) -> StemBatch:
    """Channel swapping and in-batch remixing; the mixture is re-summed from the new stems."""
    if swap_prob <= 0.0 and remix_prob <= 0.0:
        return batch
    size = batch.size
    stems = {name: audio.copy() for name, audio in batch.stems.items()}
    if remix_prob > 0.0:
        original = {name: audio.copy() for name, audio in stems.items()}
        for b in range(size):
            if rng.random() < remix_prob:
                for name in stems:
                    stems[name][b] = original[name][rng.integers(size)]
    if swap_prob > 0.0:
        for name in stems:
            for b in range(size):
                if rng.random() < swap_prob:
                    stems[name][b] = swap_channels(stems[name][b])
    return StemBatch.from_stems(stems)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    l_time: float
    l_freq: float
    seconds: float = 0.0

    def to_line(self) -> str:
        return (
            f"epoch={self.epoch} lr={self.lr:.8g} train_loss={self.train_loss:.8g} val_loss={self.val_loss:.8g} "
            f"l_time={self.l_time:.8g} l_freq={self.l_freq:.8g}"
        )


@dataclass
class TrainingReport:
    """Per-epoch loss curves and learning-rate trace of one training run."""

    stem: str
    variant: str
    epochs: List[EpochRecord] = field(default_factory=list)
    initial_val_loss: Optional[float] = None
    best_val_loss: Optional[float] = None
    checkpoint: Optional[str] = None

    @property
    def lr_trace(self) -> List[float]:
        return [e.lr for e in self.epochs]

    @property
    def train_curve(self) -> List[float]:
        return [e.train_loss for e in self.epochs]

    @property
    def val_curve(self) -> List[float]:
        return [e.val_loss for e in self.epochs]

    def to_lines(self) -> List[str]:
        lines = [f"stem={self.stem} variant={self.variant} epochs={len(self.epochs)}"]
        if self.initial_val_loss is not None:
            lines.append(f"initial_val_loss={self.initial_val_loss:.8g}")
        lines.extend(e.to_line() for e in self.epochs)
        if self.best_val_loss is not None:
            lines.append(f"best_val_loss={self.best_val_loss:.8g}")
        return lines

    def write(self, path: str) -> None:
        with open(path, "w") as f:
            f.write("\n".join(self.to_lines()) + "\n")


def train_step(model: SeparationModel, batch: StemBatch, target_stem: str, state: OptimizerState, alpha: float = 0.1) -> LossBreakdown:
    """Forward, joint loss, backward and one Adam update on ``batch``."""
    cfg = model.config
    target = batch.stems[target_stem]
    model.store.zero_grad()
    with Tape() as tape:
        out = model.forward_full(batch.mixture)
        target_spec = stft(target, cfg.n_fft, cfg.hop, cfg.sample_rate, dtype=cfg.dtype)
        total, breakdown = joint_loss(target, out.estimate, target_spec, out.estimate_spec, alpha)
    try:
        if not math.isfinite(breakdown.total):
            raise TrainingError(f"Non-finite training loss at optimizer step {state.step + 1}")
        tape.backward(total)
        params = model.parameters()
        adam_step(params, [p.grad for p in params], state)
    finally:
        tape.reset()
    return breakdown


def batch_loss(model: SeparationModel, batch: StemBatch, target_stem: str, alpha: float = 0.1) -> LossBreakdown:
    """Joint loss without recording or updating anything."""
    cfg = model.config
    target = batch.stems[target_stem]
    with tn.no_tape():
        out = model.forward_full(batch.mixture)
        target_spec = stft(target, cfg.n_fft, cfg.hop, cfg.sample_rate, dtype=cfg.dtype)
        _, breakdown = joint_loss(target, out.estimate, target_spec, out.estimate_spec, alpha)
    return breakdown


def validation_loss(model: SeparationModel, dataset: SegmentDataset, batch_size: int, alpha: float = 0.1) -> LossBreakdown:
    """Segment-weighted mean loss over the validation segments, in inference mode."""
    was_training = model.training
    model.eval()
    try:
        l_time = l_freq = 0.0
        count = 0
        for start in range(0, len(dataset.val), batch_size):
            indices = range(start, min(start + batch_size, len(dataset.val)))
            batch = StemBatch.from_stems(dataset.stems("val", indices))
            part = batch_loss(model, batch, dataset.target, alpha)
            l_time += part.l_time * batch.size
            l_freq += part.l_freq * batch.size
            count += batch.size
    finally:
        model.store.training = was_training
    return LossBreakdown(l_time / count, l_freq / count, alpha)


def _make_batch(dataset: SegmentDataset, indices: Sequence[int], seed: int, config: TrainingConfig) -> StemBatch:
    batch = StemBatch.from_stems(dataset.stems("train", indices))
    return augment(batch, np.random.default_rng(seed), config.swap_prob, config.remix_prob)


def train(
    model: SeparationModel,
    dataset: SegmentDataset,
    epochs: int,
    config: TrainingConfig,
    checkpoint_path: Optional[str] = None,
) -> TrainingReport:
    """Train ``model`` on ``dataset`` for ``epochs`` epochs.

    The initial parameters are checkpointed first, then the checkpoint is overwritten
    whenever the validation loss improves. Batches are assembled and augmented one step
    ahead on a worker thread; every random draw is made on this thread in a fixed order.

    Raises:
        TrainingError: If the training split is empty or the loss becomes non-finite.
    """
    if not dataset.train:
        raise TrainingError("Training dataset is empty")
    if not dataset.val:
        logger.warning("No validation segments; the learning-rate schedule will follow the training loss")

    report = TrainingReport(stem=dataset.target, variant=model.config.variant, checkpoint=checkpoint_path)
    state = OptimizerState.create(model.parameters(), config)
    rng = np.random.default_rng(config.seed)
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path)
    if epochs <= 0:
        return report

    if dataset.val:
        initial = validation_loss(model, dataset, config.batch_size, config.alpha)
        report.initial_val_loss = initial.total
        logger.info(f"Initial validation loss {initial.total:.6f}")
    best = math.inf

    with ThreadPoolExecutor(max_workers=1, thread_name_prefix="mtfatt-batch") as pool:
        for epoch in range(1, epochs + 1):
            started = time.monotonic()
            order = rng.permutation(len(dataset.train))
            batches = [order[i : i + config.batch_size] for i in range(0, len(order), config.batch_size)]
            if config.max_batches_per_epoch:
                batches = batches[: config.max_batches_per_epoch]
            seeds = rng.integers(0, 2**32, size=len(batches))

            model.train()
            l_time = l_freq = 0.0
            pending = pool.submit(_make_batch, dataset, batches[0], int(seeds[0]), config)
            for i in range(len(batches)):
                batch = pending.result()
                if i + 1 < len(batches):
                    pending = pool.submit(_make_batch, dataset, batches[i + 1], int(seeds[i + 1]), config)
                part = train_step(model, batch, dataset.target, state, config.alpha)
                logger.debug(f"Epoch {epoch} batch {i + 1}/{len(batches)} loss {part.total:.6f}")
                l_time += part.l_time
                l_freq += part.l_freq
            train_loss = LossBreakdown(l_time / len(batches), l_freq / len(batches), config.alpha)

            val = validation_loss(model, dataset, config.batch_size, config.alpha) if dataset.val else train_loss
            if not math.isfinite(val.total):
                raise TrainingError(f"Non-finite validation loss in epoch {epoch}")
            lr = state.lr
            lr_schedule(state, val.total)
            record = EpochRecord(epoch, lr, train_loss.total, val.total, val.l_time, val.l_freq, time.monotonic() - started)
            report.epochs.append(record)
            logger.info(
                f"Epoch {epoch}/{epochs}: train {train_loss.total:.6f} val {val.total:.6f} "
                f"(time {val.l_time:.6f}, freq {val.l_freq:.6f}) lr {lr:.6g} [{record.seconds:.1f}s]"
            )
            if val.total < best:
                best = val.total
                report.best_val_loss = best
                if checkpoint_path:
                    save_checkpoint(model, checkpoint_path)
                    logger.info(f"Saved checkpoint {checkpoint_path} (val {best:.6f})")
    return report
