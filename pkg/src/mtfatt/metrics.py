"""Plain energy-ratio SDR and the per-stem evaluation report."""

import asyncio
import logging
import math
import statistics
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as tn
from .config import STEMS, ModelConfig
from .dataio import StemSet
from .errors import MtfattError
from .model import SeparationModel, separate_long
from .signal import apply_cirm, istft, oracle_cirm, stft
from .tensor import DimensionError

logger = logging.getLogger(__name__)

SDR_CAP = 100.0
METRIC_LABEL = "plain SDR"

Estimator = Union[SeparationModel, Callable[[np.ndarray], np.ndarray]]


class UndefinedMetricError(MtfattError):
    """Exception raised when SDR is undefined (silent reference)."""

    error_type = "undefined_metric_error"


class MissingModelError(MtfattError):
    """Exception raised when evaluation is asked for a stem without a model."""

    error_type = "missing_model_error"


def sdr(reference: np.ndarray, estimate: np.ndarray) -> float:
    """``10 log10(sum(s^2) / sum((s - s_hat)^2))`` over all channels, capped at 100 dB."""
    reference = np.asarray(reference, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    if reference.shape != estimate.shape:
        raise DimensionError(f"Reference shape {reference.shape} does not match estimate shape {estimate.shape}")
    signal = float(np.sum(reference**2))
    if signal == 0.0:
        raise UndefinedMetricError("SDR is undefined for a silent reference")
    noise = float(np.sum((reference - estimate) ** 2))
    if noise == 0.0:
        return SDR_CAP
    return min(10.0 * math.log10(signal / noise), SDR_CAP)


@dataclass
class SdrReport:
    """Per-stem, per-song SDR with median (headline) and mean aggregates."""

    values: Dict[str, Dict[str, float]] = field(default_factory=dict)
    variant: str = ""
    metric: str = METRIC_LABEL

    @property
    def stems(self) -> List[str]:
        return list(self.values)

    def add(self, stem: str, song: str, value: float) -> None:
        self.values.setdefault(stem, {})[song] = value

    def median(self, stem: str) -> float:
        scores = list(self.values.get(stem, {}).values())
        return statistics.median(scores) if scores else math.nan

    def mean(self, stem: str) -> float:
        scores = list(self.values.get(stem, {}).values())
        return statistics.fmean(scores) if scores else math.nan

    def summary(self) -> List[Tuple[str, float, float, int]]:
        """(stem, median, mean, songs) per stem, then the "All" row averaging the stems.

        Stems without a single scored song show NaN and are left out of "All".
        """
        rows = [(stem, self.median(stem), self.mean(stem), len(self.values[stem])) for stem in self.stems]
        scored = [r for r in rows if r[3]]
        if scored:
            rows.append(
                (
                    "All",
                    statistics.fmean(r[1] for r in scored),
                    statistics.fmean(r[2] for r in scored),
                    max(r[3] for r in scored),
                )
            )
        return rows

    def to_table(self) -> str:
        title = f"{self.metric} (dB)" + (f", variant {self.variant}" if self.variant else "")
        lines = [title, f"{'Stem':<8} {'Median':>8} {'Mean':>8} {'Songs':>6}"]
        for stem, median, mean, count in self.summary():
            lines.append(f"{stem:<8} {median:>8.2f} {mean:>8.2f} {count:>6d}")
        return "\n".join(lines)

    def to_records(self) -> List[str]:
        records = []
        for stem in self.stems:
            for song, value in self.values[stem].items():
                records.append(f"metric={self.metric.replace(' ', '_')} stem={stem} song={song} sdr={value:.6f}")
        for stem, median, mean, count in self.summary():
            records.append(f"metric={self.metric.replace(' ', '_')} stem={stem} median={median:.6f} mean={mean:.6f} songs={count}")
        return records

    def write(self, table_path: str, records_path: str) -> None:
        with open(table_path, "w") as f:
            f.write(self.to_table() + "\n")
        with open(records_path, "w") as f:
            f.write("\n".join(self.to_records()) + "\n")


def _estimate(estimator: Estimator, mixture: np.ndarray) -> np.ndarray:
    if isinstance(estimator, SeparationModel):
        return separate_long(estimator, mixture)
    return np.asarray(estimator(mixture))


def _evaluate_song(models: Mapping[str, Estimator], song: StemSet) -> Dict[str, Optional[float]]:
    scores: Dict[str, Optional[float]] = {}
    for stem, estimator in models.items():
        try:
            scores[stem] = sdr(song.stems[stem], _estimate(estimator, song.mixture))
        except UndefinedMetricError:
            logger.warning(f"Skipping {stem} of {song.name}: silent reference")
            scores[stem] = None
    return scores


async def evaluate_async(
    models: Mapping[str, Estimator], songs: Sequence[StemSet], threads: int = 1, stems: Optional[Sequence[str]] = None, variant: str = ""
) -> SdrReport:
    """Evaluate songs concurrently on worker threads, at most ``threads`` at a time."""
    stems = list(stems) if stems is not None else list(models)
    missing = [s for s in stems if s not in models]
    if missing:
        raise MissingModelError(f"No model for stem(s): {', '.join(missing)}")
    selected = {s: models[s] for s in stems}
    semaphore = asyncio.Semaphore(max(1, threads))

    async def run(song: StemSet) -> Dict[str, Optional[float]]:
        async with semaphore:
            logger.info(f"Evaluating {song.name}")
            return await asyncio.to_thread(_evaluate_song, selected, song)

    results = await asyncio.gather(*(run(song) for song in songs))
    report = SdrReport(variant=variant)
    for stem in [s for s in STEMS if s in selected] + [s for s in selected if s not in STEMS]:
        report.values[stem] = {}
    for song, scores in zip(songs, results):
        for stem, value in scores.items():
            if value is not None:
                report.add(stem, song.name, value)
    return report


def evaluate(
    models: Mapping[str, Estimator], songs: Sequence[StemSet], threads: int = 1, stems: Optional[Sequence[str]] = None, variant: str = ""
) -> SdrReport:
    """Synchronous wrapper around :func:`evaluate_async`."""
    return asyncio.run(evaluate_async(models, songs, threads, stems, variant))


def oracle_mask_sdr(song: StemSet, stem: str, config: ModelConfig, clip: Optional[float] = 2.0, eps: float = 1e-8) -> float:
    """SDR of the stem recovered by its clipped oracle ratio mask over the whole song."""
    mix = stft(song.mixture, config.n_fft, config.hop, config.sample_rate, dtype="float64")
    target = stft(song.stems[stem], config.n_fft, config.hop, config.sample_rate, dtype="float64")
    mask = oracle_cirm(mix, target, clip, eps)
    with tn.no_tape():
        estimate = istft(apply_cirm(mix, mask), song.length)
    return sdr(song.stems[stem], estimate.data)
