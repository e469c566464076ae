"""Audio files, dataset layout, segmenting, synthetic songs and checkpoint persistence."""

import hashlib
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import soundfile as sf

from .config import STEMS, DataConfig, ModelConfig, SyntheticConfig
from .errors import MtfattError
from .model import SeparationModel, build

logger = logging.getLogger(__name__)

SUPPORTED_SUBTYPES = ("PCM_16", "FLOAT")
CONSISTENCY_TOLERANCE = 1e-3
SPLITS = ("train", "val", "test")

CHECKPOINT_MAGIC = b"MTFA"
CHECKPOINT_VERSION = 1
DIGEST_BYTES = 32


class WavFormatError(MtfattError):
    """Exception raised for unreadable or unsupported WAV files."""

    error_type = "wav_format_error"


class DatasetError(MtfattError):
    """Exception raised for a missing or inconsistent dataset."""

    error_type = "dataset_error"


class CheckpointFormatError(MtfattError):
    """Exception raised when a file is not an mtfatt checkpoint or its entries do not fit the model."""

    error_type = "checkpoint_format_error"


class CheckpointVersionError(CheckpointFormatError):
    """Exception raised for a checkpoint written by an unsupported format version."""

    error_type = "checkpoint_version_error"


class CheckpointDigestError(CheckpointFormatError):
    """Exception raised when a checkpoint was saved under a different architecture."""

    error_type = "checkpoint_digest_error"


class CheckpointTruncatedError(CheckpointFormatError):
    """Exception raised when a checkpoint ends before its declared contents."""

    error_type = "checkpoint_truncated_error"


# WAV files


def read_wav(path: str) -> Tuple[np.ndarray, int]:
    """Read a PCM16 or float32 WAV file as ``(N, 2)`` float32 samples in [-1, 1].

    Mono files are duplicated to both channels.
    """
    try:
        info = sf.info(path)
    except RuntimeError as e:
        raise WavFormatError(f"Malformed RIFF/WAVE header in {path}: {e}")
    if info.format != "WAV":
        raise WavFormatError(f"{path} is {info.format}, not RIFF/WAVE")
    if info.subtype not in SUPPORTED_SUBTYPES:
        raise WavFormatError(f"Unsupported codec in 'fmt ' chunk of {path}: {info.subtype} (expected PCM 16-bit or 32-bit float)")
    if info.channels not in (1, 2):
        raise WavFormatError(f"'fmt ' chunk of {path} declares {info.channels} channels; only mono and stereo are supported")
    try:
        audio, sample_rate = sf.read(path, dtype="float32", always_2d=True)
    except RuntimeError as e:
        raise WavFormatError(f"Could not read 'data' chunk of {path}: {e}")
    if audio.shape[1] == 1:
        audio = np.repeat(audio, 2, axis=1)
    return audio, sample_rate


def write_wav(path: str, audio: np.ndarray, sample_rate: int, subtype: str = "FLOAT") -> None:
    """Write ``(N, channels)`` samples as a WAV file (float32 by default, or PCM_16)."""
    if subtype not in SUPPORTED_SUBTYPES:
        raise WavFormatError(f"Unsupported output subtype {subtype}; choose one of {', '.join(SUPPORTED_SUBTYPES)}")
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    sf.write(path, np.asarray(audio, dtype=np.float32), sample_rate, subtype=subtype, format="WAV")


# Songs and datasets


@dataclass
class StemSet:
    """A mixture with its named stems, all ``(N, 2)`` at one sample rate."""

    name: str
    mixture: np.ndarray
    stems: Dict[str, np.ndarray]
    sample_rate: int

    @property
    def length(self) -> int:
        return self.mixture.shape[0]

    def inconsistency(self) -> float:
        """Relative error between the mixture and the sum of the stems."""
        total = np.zeros_like(self.mixture, dtype=np.float64)
        for audio in self.stems.values():
            total += audio
        norm = np.linalg.norm(self.mixture)
        if norm == 0.0:
            return float(np.linalg.norm(total))
        return float(np.linalg.norm(self.mixture - total) / norm)

    def check_consistency(self, tolerance: float = CONSISTENCY_TOLERANCE) -> bool:
        error = self.inconsistency()
        if error > tolerance:
            logger.warning(f"Song {self.name}: mixture differs from the sum of stems by {error:.2e} (relative)")
            return False
        return True


def load_song_dir(path: str, sample_rate: Optional[int] = None) -> StemSet:
    """Load ``mixture.wav`` and one WAV per stem from a song directory."""
    if not os.path.isdir(path):
        raise DatasetError(f"Song directory not found: {path}")
    mixture, rate = _read_song_file(path, "mixture")
    stems = {}
    for stem in STEMS:
        audio, stem_rate = _read_song_file(path, stem)
        if stem_rate != rate or audio.shape != mixture.shape:
            raise DatasetError(f"{stem}.wav in {path} does not match mixture.wav ({audio.shape} @ {stem_rate} vs {mixture.shape} @ {rate})")
        stems[stem] = audio
    if sample_rate is not None and rate != sample_rate:
        raise DatasetError(f"{path} is sampled at {rate} Hz but the model expects {sample_rate} Hz (no resampling)")
    song = StemSet(os.path.basename(os.path.normpath(path)), mixture, stems, rate)
    song.check_consistency()
    return song


def _read_song_file(directory: str, name: str) -> Tuple[np.ndarray, int]:
    path = os.path.join(directory, f"{name}.wav")
    if not os.path.exists(path):
        raise DatasetError(f"Missing {name}.wav in {directory}")
    return read_wav(path)


def read_split_manifest(path: str, root: Optional[str] = None) -> Dict[str, List[str]]:
    """Parse ``<split>\\t<song-dir>`` lines; relative dirs resolve against ``root`` or the manifest's directory."""
    if not os.path.exists(path):
        raise DatasetError(f"Split manifest not found: {path}")
    base = root or os.path.dirname(os.path.abspath(path))
    splits: Dict[str, List[str]] = {name: [] for name in SPLITS}
    with open(path, "r") as f:
        for number, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or parts[0] not in splits:
                raise DatasetError(f"{path}:{number}: expected '<train|val|test>\\t<song-dir>', got {line!r}")
            split, directory = parts
            splits[split].append(directory if os.path.isabs(directory) else os.path.join(base, directory))
    return splits


def song_dirs(config: DataConfig, split: str) -> List[str]:
    """Song directories of ``split`` from the manifest, or ``<dataset_root>/<split>/*`` without one."""
    if split not in SPLITS:
        raise DatasetError(f"Unknown split '{split}'; expected one of {', '.join(SPLITS)}")
    if config.split_manifest:
        return read_split_manifest(config.split_manifest, config.dataset_root)[split]
    if not config.dataset_root:
        raise DatasetError("No dataset_root configured (set data.dataset_root or use a synthetic-<stem> target)")
    split_dir = os.path.join(config.dataset_root, split)
    if not os.path.isdir(split_dir):
        raise DatasetError(f"Dataset split directory not found: {split_dir}")
    return sorted(os.path.join(split_dir, d) for d in os.listdir(split_dir) if os.path.isdir(os.path.join(split_dir, d)))


def load_split(config: DataConfig, split: str, sample_rate: Optional[int] = None) -> List[StemSet]:
    songs = [load_song_dir(d, sample_rate) for d in song_dirs(config, split)]
    logger.info(f"Loaded {len(songs)} songs for split '{split}'")
    return songs


# Segmenting


@dataclass(frozen=True)
class SegmentIndex:
    song: str
    start: int
    length: int


def segment(song: StemSet, segment_frames: int, shift_frames: int, hop: int) -> List[SegmentIndex]:
    """Hop-aligned segment positions: starts ``s`` (in frames) with ``s + segment_frames`` within the song's frames.

    A song shorter than one segment yields a single zero-padded segment, with a warning.
    """
    if shift_frames <= 0:
        raise ValueError(f"shift_frames must be positive, got {shift_frames}")
    length = (segment_frames - 1) * hop
    song_frames = 1 + song.length // hop
    if song.length < length:
        logger.warning(f"Song {song.name} has {song.length} samples, shorter than one {length}-sample segment; padding")
        return [SegmentIndex(song.name, 0, length)]
    return [SegmentIndex(song.name, s * hop, length) for s in range(0, song_frames - segment_frames + 1, shift_frames)]


def extract_segment(audio: np.ndarray, start: int, length: int) -> np.ndarray:
    """``audio[start:start + length]``, zero-padded at the end when the song runs out."""
    out = np.zeros((length,) + audio.shape[1:], dtype=audio.dtype)
    piece = audio[start : start + length]
    out[: piece.shape[0]] = piece
    return out


@dataclass
class SegmentDataset:
    """Training and validation segments of a set of songs, for one target stem."""

    target: str
    train: List[Tuple[StemSet, SegmentIndex]] = field(default_factory=list)
    val: List[Tuple[StemSet, SegmentIndex]] = field(default_factory=list)

    @classmethod
    def build(cls, target: str, train_songs: Sequence[StemSet], val_songs: Sequence[StemSet], model: ModelConfig, shift_frames: int) -> "SegmentDataset":
        if target not in STEMS:
            raise DatasetError(f"Unknown stem '{target}'; expected one of {', '.join(STEMS)}")

        def index(songs: Sequence[StemSet]) -> List[Tuple[StemSet, SegmentIndex]]:
            return [(song, seg) for song in songs for seg in segment(song, model.segment_frames, shift_frames, model.hop)]

        dataset = cls(target, index(train_songs), index(val_songs))
        logger.info(f"Dataset for {target}: {len(dataset.train)} training and {len(dataset.val)} validation segments")
        return dataset

    def stems(self, split: str, indices: Iterable[int]) -> Dict[str, np.ndarray]:
        """Stacked ``(B, L, 2)`` float32 segments per stem for the given positions of ``split``."""
        items = self.train if split == "train" else self.val
        chosen = [items[i] for i in indices]
        return {
            stem: np.stack([extract_segment(song.stems[stem], seg.start, seg.length) for song, seg in chosen]).astype(np.float32)
            for stem in STEMS
        }


# Synthetic songs


def _check_bands(bands: Dict[str, Sequence[float]], sample_rate: int) -> None:
    missing = [s for s in STEMS if s not in bands]
    if missing:
        raise DatasetError(f"Band plan has no entry for {', '.join(missing)}")
    for stem, band in bands.items():
        if len(band) != 2 or not 0.0 <= band[0] < band[1] <= sample_rate / 2:
            raise DatasetError(f"Invalid band {band} for {stem}: need 0 <= low < high <= {sample_rate / 2}")


def band_limit(signal: np.ndarray, sample_rate: int, low: float, high: float) -> np.ndarray:
    """Zero every DFT bin of ``signal`` (along axis 0) outside ``[low, high]`` Hz."""
    spectrum = np.fft.rfft(signal, axis=0)
    freqs = np.fft.rfftfreq(signal.shape[0], 1.0 / sample_rate)
    spectrum[(freqs < low) | (freqs > high)] = 0.0
    return np.fft.irfft(spectrum, n=signal.shape[0], axis=0)


def _notes(rng: np.random.Generator, n: int, sample_rate: int, shortest: float, longest: float) -> List[Tuple[int, int]]:
    spans, start = [], 0
    while start < n:
        stop = min(n, start + int(rng.uniform(shortest, longest) * sample_rate))
        spans.append((start, stop))
        start = stop
    return spans


def _fade(length: int, sample_rate: int) -> np.ndarray:
    ramp = min(length // 2, int(0.01 * sample_rate))
    envelope = np.ones(length)
    if ramp > 0:
        envelope[:ramp] = np.linspace(0.0, 1.0, ramp)
        envelope[-ramp:] = np.linspace(1.0, 0.0, ramp)
    return envelope


def _vocals(rng: np.random.Generator, n: int, sample_rate: int, low: float, high: float) -> np.ndarray:
    # Tone complexes with 5 Hz vibrato; partials stay inside the band
    out = np.zeros(n)
    t = np.arange(n) / sample_rate
    for start, stop in _notes(rng, n, sample_rate, 0.3, 0.8):
        f0 = rng.uniform(low * 1.02, low + (high - low) / 2)
        vibrato = 1.0 + 0.01 * np.sin(2 * np.pi * 5.0 * t[start:stop])
        phase = 2 * np.pi * np.cumsum(f0 * vibrato) / sample_rate
        note = np.zeros(stop - start)
        k = 1
        while k * f0 * 1.02 < high:
            note += np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k
            k += 1
        out[start:stop] = note * _fade(stop - start, sample_rate)
    return out


def _drums(rng: np.random.Generator, n: int, sample_rate: int) -> np.ndarray:
    out = np.zeros(n)
    period = int(rng.uniform(0.25, 0.5) * sample_rate)
    length = int(0.15 * sample_rate)
    decay = np.exp(-np.arange(length) / (0.03 * sample_rate))
    for start in range(int(rng.integers(0, period)), n, period):
        stop = min(n, start + length)
        out[start:stop] += rng.standard_normal(stop - start) * decay[: stop - start] * rng.uniform(0.6, 1.0)
    return out


def _bass(rng: np.random.Generator, n: int, sample_rate: int, low: float, high: float) -> np.ndarray:
    out = np.zeros(n)
    for start, stop in _notes(rng, n, sample_rate, 0.5, 1.0):
        f = rng.uniform(low * 1.05, high / 2)
        t = np.arange(stop - start) / sample_rate
        note = np.sin(2 * np.pi * f * t) + 0.5 * np.sin(4 * np.pi * f * t)
        out[start:stop] = note * _fade(stop - start, sample_rate)
    return out


def _other(rng: np.random.Generator, n: int, sample_rate: int) -> np.ndarray:
    t = np.arange(n) / sample_rate
    swell = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(0.1, 0.5) * t + rng.uniform(0, 2 * np.pi))
    return rng.standard_normal(n) * swell


def synth_song(name: str, rng: np.random.Generator, config: SyntheticConfig, sample_rate: int, level: float = 0.1) -> StemSet:
    n = int(round(config.duration * sample_rate))
    sources = {
        "vocals": lambda lo, hi: _vocals(rng, n, sample_rate, lo, hi),
        "drums": lambda lo, hi: _drums(rng, n, sample_rate),
        "bass": lambda lo, hi: _bass(rng, n, sample_rate, lo, hi),
        "other": lambda lo, hi: _other(rng, n, sample_rate),
    }
    stems = {}
    for stem in STEMS:
        low, high = config.bands[stem]
        mono = band_limit(sources[stem](low, high), sample_rate, low, high)
        rms = np.sqrt(np.mean(mono**2))
        mono = mono * (level / rms) if rms > 0 else mono
        angle = rng.uniform(np.pi / 8, 3 * np.pi / 8)
        stems[stem] = np.stack([np.cos(angle) * mono, np.sin(angle) * mono], axis=1).astype(np.float32)
    mixture = stems[STEMS[0]].copy()
    for stem in STEMS[1:]:
        mixture = mixture + stems[stem]
    return StemSet(name, mixture, stems, sample_rate)


def synth_dataset(config: SyntheticConfig, n_songs: int, sample_rate: int, seed: Optional[int] = None, prefix: str = "synth") -> List[StemSet]:
    """Deterministic band-limited songs; stems are generated in a fixed order and the mixture is their exact sum."""
    _check_bands(config.bands, sample_rate)
    rng = np.random.default_rng(config.seed if seed is None else seed)
    return [synth_song(f"{prefix}-{i:03d}", rng, config, sample_rate) for i in range(n_songs)]


def synthetic_splits(config: SyntheticConfig, sample_rate: int) -> Dict[str, List[StemSet]]:
    """Train/val/test songs drawn from independent seeds derived from ``config.seed``."""
    counts = {"train": config.n_train, "val": config.n_val, "test": config.n_test}
    return {split: synth_dataset(config, counts[split], sample_rate, seed=config.seed + 1000 * i, prefix=f"synth-{split}") for i, split in enumerate(SPLITS)}


# Checkpoints


def checkpoint_bytes(model: SeparationModel) -> bytes:
    arrays = model.store.state_arrays()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), model.config.digest(), struct.pack("<I", len(arrays))]
    for name, value in arrays.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: SeparationModel, path: str) -> None:
    """Persist all parameters and running statistics, replacing ``path`` atomically."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    payload = checkpoint_bytes(model)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(payload)
    os.replace(tmp_path, path)
    logger.debug(f"Wrote checkpoint {path} ({len(payload)} bytes, sha256 {hashlib.sha256(payload).hexdigest()[:12]})")


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.data):
            raise CheckpointTruncatedError(f"{self.path} ends inside {what} (offset {self.offset}, need {count} bytes, file has {len(self.data)})")
        chunk = self.data[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def read_checkpoint(path: str) -> Tuple[int, bytes, Dict[str, np.ndarray]]:
    """Parse a checkpoint into (version, digest, arrays) without building a model."""
    with open(path, "rb") as f:
        reader = _Reader(f.read(), path)
    if reader.data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path} is not an mtfatt checkpoint (bad magic bytes {reader.data[:4]!r})")
    reader.take(4, "magic")
    version = reader.u32("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path} has checkpoint format version {version}; this build reads version {CHECKPOINT_VERSION}")
    digest = reader.take(DIGEST_BYTES, "config digest")
    count = reader.u32("entry count")
    arrays: Dict[str, np.ndarray] = {}
    for i in range(count):
        name = reader.take(reader.u32(f"entry {i} name length"), f"entry {i} name").decode("utf-8")
        rank = reader.u32(f"'{name}' rank")
        dims = tuple(reader.u32(f"'{name}' dims") for _ in range(rank))
        size = int(np.prod(dims, dtype=np.int64))
        arrays[name] = np.frombuffer(reader.take(4 * size, f"'{name}' data"), dtype="<f4").reshape(dims).copy()
    if reader.offset != len(reader.data):
        raise CheckpointFormatError(f"{path} has {len(reader.data) - reader.offset} trailing bytes after {count} entries")
    return version, digest, arrays


def load_checkpoint(path: str, config: ModelConfig, stem: Optional[str] = None) -> SeparationModel:
    """Rebuild a model for ``config`` and load a checkpoint into it, in inference mode."""
    if not os.path.exists(path):
        raise CheckpointFormatError(f"Checkpoint not found: {path}")
    _, digest, arrays = read_checkpoint(path)
    if digest != config.digest():
        raise CheckpointDigestError(f"{path} was saved for a different architecture (digest {digest.hex()[:12]} vs {config.digest().hex()[:12]})")
    model = build(config, stem)
    try:
        model.store.load_arrays(arrays)
    except (KeyError, MtfattError) as e:
        raise CheckpointFormatError(f"{path} does not fit the configured model: {e}")
    logger.info(f"Loaded checkpoint {path} ({len(arrays)} arrays)")
    return model.eval()
