"""
Argument and loading helpers shared by the command groups.
"""

import argparse
import logging
import sys
from typing import Any, Dict, Optional, TextIO, Tuple

from src.config import Mode
from src.core.metrics import ErrorMetricKind, ErrorReduction
from src.selection.selector import IsolationPolicy
from src.simulation.graph import ModelGraph
from src.storage.bundles import CalibBundle, ModelBundle, load_typed
from src.utils.errors import InvalidParameterError

logger = logging.getLogger(__name__)


def _choices(enum_cls) -> list:
    return [member.value for member in enum_cls]


def add_config_option(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, metavar="JSON",
                        help="JSON file with option values; explicit flags win")


def add_quant_options(parser: argparse.ArgumentParser) -> None:
    """Options shared by analyze and select (defaults are resolved by the RunConfig)."""
    parser.add_argument("--model", default=None, help="Model bundle directory")
    parser.add_argument("--calib", default=None, help="Calibration bundle directory")
    parser.add_argument("--out", default=None, help="Output directory")
    parser.add_argument("--bits", type=int, choices=[4, 8], default=None, help="Bit-width (default: 4)")
    parser.add_argument("--mode", choices=_choices(Mode), default=None, help="w-only (default) or wa")
    parser.add_argument("--metric", choices=_choices(ErrorMetricKind), default=None,
                        help="Selection error (default: tensor for w-only, model for wa)")
    parser.add_argument("--reduction", choices=_choices(ErrorReduction), default=None,
                        help="Reduce errors as mse (default) or nsr")
    parser.add_argument("--candidates", default=None,
                        help="Comma-separated formats (default: int4,fp4_e2m1 or int8,fp8_e4m3)")
    parser.add_argument("--tie-break", dest="tie_break", default=None,
                        help="Comma-separated precedence on equal errors (default: int,fp)")
    parser.add_argument("--isolation", choices=_choices(IsolationPolicy), default=None,
                        help="Evaluate each layer with the others unquantized (default) or sequentially")
    parser.add_argument("--workers", type=int, default=None, help="Evaluation threads")
    add_config_option(parser)


QUANT_FIELDS = ("model", "calib", "out", "bits", "mode", "metric", "reduction",
                "candidates", "tie_break", "isolation", "workers")


def collect(args: argparse.Namespace, fields) -> Dict[str, Any]:
    """Explicitly given option values by RunConfig field name."""
    return {name: getattr(args, name, None) for name in fields}


def load_model(path: str) -> Tuple[ModelBundle, ModelGraph]:
    """Load and validate a model bundle and build its graph."""
    bundle = load_typed(path, ModelBundle)
    return bundle, ModelGraph.from_bundle(bundle)


def load_calib(path: Optional[str], model: ModelBundle, required: bool, why: str = "") -> Optional[CalibBundle]:
    """
    Load a calibration bundle and check it covers the model.

    Args:
        path: Bundle directory or ``None``
        model: Model the batches feed
        required: Whether a missing path is an error
        why: What needs it, for the error message

    Returns:
        Validated bundle, or ``None`` when not given and not required
    """
    if path is None:
        if required:
            raise InvalidParameterError("calib", f"--calib is required {why}".rstrip())
        return None
    return load_typed(path, CalibBundle).validate_against(model)


def emit(text: str, stream: Optional[TextIO] = None) -> None:
    """Write a table to stdout (or ``stream``)."""
    (stream or sys.stdout).write(text)
