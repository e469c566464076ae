"""Command-line entry point: ``mtfatt {train|separate|evaluate|selftest}``.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage, configuration or
dataset problem.
"""

import argparse
import logging
import os
import traceback
from typing import Dict, List, Optional, Sequence, Tuple

from . import __version__
from .config import STEMS, VARIANTS, ConfigError, RunConfig, load_config, resolve_threads, save_config
from .dataio import DatasetError, SegmentDataset, StemSet, load_checkpoint, load_split, read_wav, synthetic_splits, write_wav
from .errors import MtfattError
from .metrics import MissingModelError, evaluate
from .model import build, separate_long
from .selftest import FAULTS, GROUPS, run_selftest
from .training import train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
CHECKPOINT_SUFFIX = ".mtfa"
EFFECTIVE_CONFIG = "effective_config.yaml"
SYNTHETIC = "synthetic"


def configure_logging(debug: bool = False) -> None:
    """Set up root logging; ``MTFATT_DEBUG`` in {true, 1, yes} also enables debug output."""
    debug = debug or os.environ.get("MTFATT_DEBUG", "").lower() in ["true", "1", "yes"]
    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
    if debug:
        logging.getLogger().setLevel(logging.DEBUG)
        logger.debug("Debug mode enabled")


def parse_target(value: Optional[str]) -> Tuple[Optional[List[str]], bool]:
    """Map ``--stem`` to (stems, synthetic).

    ``vocals`` selects one stem of the configured dataset and ``synthetic-vocals`` one stem of
    the synthetic dataset. ``synthetic`` or no value gives ``None``: every stem available.
    """
    if value is None:
        return None, False
    synthetic = value == SYNTHETIC or value.startswith(f"{SYNTHETIC}-")
    name = value[len(SYNTHETIC) + 1 :] if value.startswith(f"{SYNTHETIC}-") else value
    if name == SYNTHETIC:
        return None, True
    if name not in STEMS:
        raise ConfigError(f"Unknown stem '{value}'; expected one of {', '.join(STEMS)}, optionally prefixed with '{SYNTHETIC}-', or '{SYNTHETIC}'")
    return [name], synthetic


def checkpoint_arg(value: str) -> Tuple[str, str]:
    stem, sep, path = value.partition("=")
    if not sep or stem not in STEMS or not path:
        raise argparse.ArgumentTypeError(f"expected STEM=PATH with STEM one of {', '.join(STEMS)}, got '{value}'")
    return stem, path


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file (default: MTFATT_CONFIG, ~/.mtfatt/config.yaml, bundled defaults)")
    common.add_argument("--stem", help=f"Target stem: {', '.join(STEMS)}, synthetic-<stem>, or {SYNTHETIC}")
    common.add_argument("--variant", choices=VARIANTS, help="Separator variant")
    common.add_argument("--epochs", type=int, help="Training epochs")
    common.add_argument("--seed", type=int, help="Seed for initialization and data order")
    common.add_argument("--threads", type=int, help="Worker threads (fallback: MTFATT_THREADS, then CPU count)")
    common.add_argument("--out", help="Output directory")
    common.add_argument("--debug", action="store_true", help="Enable debug logging")

    models = argparse.ArgumentParser(add_help=False)
    models.add_argument("--checkpoint", action="append", type=checkpoint_arg, default=[], metavar="STEM=PATH", help="Checkpoint of one stem model")
    models.add_argument("--checkpoint-dir", help="Directory of <stem>.mtfa checkpoints (default: paths.checkpoint_dir)")

    parser = argparse.ArgumentParser(prog="mtfatt", description="Music source separation with multi-scale time-frequency attention")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("train", parents=[common], help="Train a dedicated model per stem")

    separate = commands.add_parser("separate", parents=[common, models], help="Separate a WAV file into stems")
    separate.add_argument("--input", required=True, help="Stereo mixture WAV")

    evaluate_cmd = commands.add_parser("evaluate", parents=[common, models], help="Report per-stem SDR on a dataset split")
    evaluate_cmd.add_argument("--split", default="test", choices=("train", "val", "test"), help="Dataset split (default: test)")

    selftest = commands.add_parser("selftest", parents=[common], help="Run the invariant suite")
    selftest.add_argument("--inject-fault", choices=FAULTS, help="Corrupt a computation to confirm the suite catches it")
    selftest.add_argument("--group", action="append", choices=GROUPS, help="Run only this group (repeatable)")
    return parser


def apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Command-line flags take precedence over configuration file values."""
    if args.variant is not None:
        config.model.variant = args.variant
    if args.epochs is not None:
        config.training.epochs = args.epochs
    if args.seed is not None:
        config.model.seed = args.seed
        config.training.seed = args.seed
    if args.threads is not None:
        config.threads = args.threads
    if args.out is not None:
        config.paths.output_dir = args.out
    if getattr(args, "checkpoint_dir", None):
        config.paths.checkpoint_dir = args.checkpoint_dir
    config.model.validate()
    return config


def prepare_output(config: RunConfig) -> str:
    """Create the output directory and echo the effective configuration into it."""
    out = config.paths.output_dir
    os.makedirs(out, exist_ok=True)
    save_config(config, os.path.join(out, EFFECTIVE_CONFIG))
    return out


def checkpoint_path(config: RunConfig, stem: str) -> str:
    return os.path.join(config.paths.checkpoint_dir, f"{stem}{CHECKPOINT_SUFFIX}")


def resolve_checkpoints(config: RunConfig, explicit: Sequence[Tuple[str, str]], stems: Optional[Sequence[str]] = None) -> Dict[str, str]:
    """Explicit ``STEM=PATH`` pairs, else ``<checkpoint_dir>/<stem>.mtfa`` for every stem that has one.

    Raises:
        MissingModelError: If a requested stem has no checkpoint, or nothing is found at all.
    """
    found = dict(explicit)
    if found and stems:
        found = {s: p for s, p in found.items() if s in stems}
    elif not found:
        for stem in stems or STEMS:
            if os.path.exists(checkpoint_path(config, stem)):
                found[stem] = checkpoint_path(config, stem)
    missing = [s for s in stems or [] if s not in found]
    if missing:
        raise MissingModelError(f"No checkpoint for stem(s) {', '.join(missing)} (looked in {config.paths.checkpoint_dir})")
    if not found:
        raise MissingModelError(f"No checkpoints given and none found in {config.paths.checkpoint_dir}")
    return found


def load_songs(config: RunConfig, split: str, synthetic: bool) -> List[StemSet]:
    if synthetic:
        return synthetic_splits(config.data.synthetic, config.model.sample_rate)[split]
    return load_split(config.data, split, config.model.sample_rate)


def cmd_train(config: RunConfig, stems: Sequence[str], synthetic: bool) -> int:
    """Train one dedicated model per stem; writes ``<stem>.mtfa`` and a per-stem epoch report."""
    out = prepare_output(config)
    train_songs = load_songs(config, "train", synthetic)
    val_songs = load_songs(config, "val", synthetic)
    for stem in stems:
        dataset = SegmentDataset.build(stem, train_songs, val_songs, config.model, config.data.shift_frames)
        model = build(config.model, stem)
        path = checkpoint_path(config, stem)
        logger.info(f"Training {config.model.variant} model for {stem} ({len(dataset.train)} segments, {config.training.epochs} epochs)")
        report = train(model, dataset, config.training.epochs, config.training, path)
        report_path = os.path.join(out, f"train_{stem}.txt")
        report.write(report_path)
        logger.info(f"Wrote checkpoint {path} and report {report_path}")
    return EXIT_OK


def cmd_separate(config: RunConfig, input_path: str, checkpoints: Dict[str, str]) -> int:
    """Write one WAV per stem model, with the input's length and sample rate."""
    audio, sample_rate = read_wav(input_path)
    if sample_rate != config.model.sample_rate:
        raise ConfigError(f"{input_path} is sampled at {sample_rate} Hz but model.sample_rate is {config.model.sample_rate} Hz (no resampling)")
    out = prepare_output(config)
    for stem, path in checkpoints.items():
        model = load_checkpoint(path, config.model, stem)
        estimate = separate_long(model, audio)
        target = os.path.join(out, f"{stem}.wav")
        write_wav(target, estimate, sample_rate)
        logger.info(f"Wrote {target}")
    return EXIT_OK


def cmd_evaluate(config: RunConfig, split: str, stems: Sequence[str], synthetic: bool, checkpoints: Dict[str, str]) -> int:
    """SDR of every requested stem on ``split``; writes the table and line records."""
    models = {stem: load_checkpoint(path, config.model, stem) for stem, path in checkpoints.items()}
    songs = load_songs(config, split, synthetic)
    report = evaluate(models, songs, threads=resolve_threads(config), stems=stems, variant=config.model.variant)
    out = prepare_output(config)
    base = os.path.join(out, f"sdr_{config.model.variant}_{split}")
    report.write(f"{base}.txt", f"{base}.records")
    print(report.to_table())
    logger.info(f"Wrote {base}.txt and {base}.records")
    return EXIT_OK


def cmd_selftest(inject_fault: Optional[str] = None, groups: Optional[Sequence[str]] = None, seed: int = 0) -> int:
    """Run the invariant groups and print one PASS/FAIL line per group."""
    results = run_selftest(groups, inject_fault, seed)
    for result in results:
        print(result.to_line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


def dispatch(args: argparse.Namespace, config: RunConfig) -> int:
    if args.command == "selftest":
        return cmd_selftest(args.inject_fault, args.group, args.seed or 0)
    stems, synthetic = parse_target(args.stem)
    if args.command == "train":
        if args.stem is None:
            raise ConfigError(f"train needs --stem ({', '.join(STEMS)}, synthetic-<stem> or {SYNTHETIC})")
        return cmd_train(config, stems or list(STEMS), synthetic)
    checkpoints = resolve_checkpoints(config, args.checkpoint, stems)
    if args.command == "separate":
        return cmd_separate(config, args.input, checkpoints)
    return cmd_evaluate(config, args.split, stems or [s for s in STEMS if s in checkpoints], synthetic, checkpoints)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv``, run the command and return its exit status."""
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.debug)
    try:
        config = apply_overrides(load_config(args.config), args)
        return dispatch(args, config)
    except (ConfigError, DatasetError, MissingModelError) as e:
        logger.error(f"{e.error_type}: {e.message}")
        return EXIT_USAGE
    except MtfattError as e:
        logger.error(f"{e.error_type}: {e.message}")
        logger.error(traceback.format_exc())
        return EXIT_FAILURE
    except Exception as e:
        logger.error(f"Unexpected error: {e}")
        logger.error(traceback.format_exc())
        return EXIT_FAILURE
