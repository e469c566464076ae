"""mtfatt: music source separation with multi-scale time-frequency attention.

A complex-ratio-mask separator (subband encoder, residual attention separator, gated
decoder) on a small reverse-mode autodiff engine, with training, evaluation and an
invariant self-test behind the ``mtfatt`` command.
"""

import sys
from typing import Optional, Sequence

# Package version
__version__ = "0.1.0"

from . import cli, config, model  # noqa: E402
from .config import ModelConfig, RunConfig, load_config  # noqa: E402
from .model import SeparationModel, build, separate_long  # noqa: E402


def main(argv: Optional[Sequence[str]] = None) -> None:
    """Main entry point for the package."""
    sys.exit(cli.main(argv))


__all__ = ["ModelConfig", "RunConfig", "SeparationModel", "build", "cli", "config", "load_config", "main", "model", "separate_long", "__version__"]
