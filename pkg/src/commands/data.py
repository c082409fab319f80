"""
Data commands: synthetic model generation and calibration.
"""

import argparse
import logging
from pathlib import Path
from typing import Dict, List, Optional, TextIO

from src.commands.common import add_config_option, collect, emit, load_model
from src.config import CalibrateConfig, GenConfig, ToolkitSettings, build_run_config
from src.core.formats import parse_format
from src.core.quant import calibrate as calibrate_scales
from src.selection.selector import activation_scheme
from src.simulation.graph import calibration_activations
from src.storage.bundles import (
    CalibBundle,
    InputsBundle,
    LayerSpec,
    ModelBundle,
    Nonlinearity,
    load_typed,
    save_bundle,
)
from src.storage.synthetic import DistributionSpec, derive_seed, gen_synthetic
from src.utils.output import rows_to_records, write_csv, write_json

logger = logging.getLogger(__name__)

SCALES_HEADER = ("layer", "format", "scale")

GEN_FIELDS = ("out", "dims", "nonlinearity", "weight_dist", "input_dist", "batch_size",
              "calib_batches", "eval_batches", "seed")
CALIBRATE_FIELDS = ("model", "inputs", "out", "bits", "candidates")


class DataCommands:
    """Generate synthetic bundles and calibration activations."""

    def __init__(self, settings: ToolkitSettings, stdout: Optional[TextIO] = None):
        """
        Initialize data commands.

        Args:
            settings: Toolkit settings
            stdout: Stream summaries are printed to
        """
        self.settings = settings
        self.stdout = stdout
        logger.info("Initialized data commands")

    def register(self, subparsers) -> None:
        gen = subparsers.add_parser("gen", help="Generate a synthetic model with calibration and eval inputs")
        gen.add_argument("--out", default=None, help="Output directory")
        gen.add_argument("--dims", default=None, help="Layer widths, input first (default: 64,128,128,64)")
        gen.add_argument("--nonlinearity", choices=[n.value for n in Nonlinearity], default=None,
                         help="Between layers (default: relu)")
        gen.add_argument("--weight-dist", dest="weight_dist", default=None,
                         help="Weight distribution (default: gaussian:0,0.05)")
        gen.add_argument("--input-dist", dest="input_dist", default=None,
                         help="Input distribution (default: student_t:4)")
        gen.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        gen.add_argument("--calib-batches", dest="calib_batches", type=int, default=None)
        gen.add_argument("--eval-batches", dest="eval_batches", type=int, default=None)
        gen.add_argument("--seed", type=int, default=None, help="Unsigned 64-bit seed")
        add_config_option(gen)
        gen.set_defaults(handler=self.handle_gen)

        cal = subparsers.add_parser("calibrate", help="Record every layer's input activations")
        cal.add_argument("--model", default=None, help="Model bundle directory")
        cal.add_argument("--inputs", default=None, help="Calibration inputs bundle directory")
        cal.add_argument("--out", default=None, help="Calibration bundle directory to write")
        cal.add_argument("--bits", type=int, choices=[4, 8], default=None,
                         help="Bit-width of the formats in the scales table")
        cal.add_argument("--candidates", default=None, help="Formats in the scales table")
        add_config_option(cal)
        cal.set_defaults(handler=self.handle_calibrate)

    # gen

    def handle_gen(self, args: argparse.Namespace) -> None:
        config = build_run_config(GenConfig, collect(args, GEN_FIELDS), args.config,
                                  defaults={"seed": self.settings.default_seed})
        paths = self.gen(config)
        emit("".join(f"{role}: {path}\n" for role, path in paths.items()), self.stdout)

    def gen(self, config: GenConfig) -> Dict[str, Path]:
        """
        Write ``model``, ``calib_inputs`` and ``eval_inputs`` bundles under ``config.out``.

        Every tensor draws from its own stream, ``derive_seed(seed, tensor name)``.
        """
        out = Path(config.out)
        weight_spec = DistributionSpec.parse(config.weight_dist)
        input_spec = DistributionSpec.parse(config.input_dist)
        dims = config.dims
        count = len(dims) - 1

        layers, tensors = [], {}
        for k in range(count):
            name = f"fc{k}"
            weight = f"{name}.weight"
            tensors[weight] = gen_synthetic(weight_spec, (dims[k + 1], dims[k]),
                                            derive_seed(config.seed, weight))
            nonlinearity = config.nonlinearity if k < count - 1 else Nonlinearity.NONE
            layers.append(LayerSpec(name=name, weight=weight, nonlinearity=nonlinearity))

        def inputs(prefix: str, n: int) -> InputsBundle:
            return InputsBundle(batches=[
                gen_synthetic(input_spec, (config.batch_size, dims[0]), derive_seed(config.seed, f"{prefix}{i}"))
                for i in range(n)
            ])

        paths = {
            "model": save_bundle(ModelBundle(layers=layers, tensors=tensors), out / "model"),
            "calib_inputs": save_bundle(inputs("calib_input", config.calib_batches), out / "calib_inputs"),
            "eval_inputs": save_bundle(inputs("eval_input", config.eval_batches), out / "eval_inputs"),
        }
        paths["run_config"] = config.write(out)
        logger.info(f"Generated {count}-layer model with dims {dims} (seed={config.seed}) in {out}")
        return paths

    # calibrate

    def handle_calibrate(self, args: argparse.Namespace) -> None:
        config = build_run_config(CalibrateConfig, collect(args, CALIBRATE_FIELDS), args.config)
        rows = self.calibrate(config)
        emit(f"calibrated {len({row[0] for row in rows})} layers into {config.out}\n", self.stdout)

    def calibrate(self, config: CalibrateConfig) -> List[tuple]:
        """
        Run the reference model on the calibration inputs and store each layer's inputs.

        Also writes ``scales.csv``/``scales.json``: the per-tensor activation
        scale of every layer under every listed format.

        Returns:
            Scale table rows
        """
        model_bundle, graph = load_model(config.model)
        inputs = load_typed(config.inputs, InputsBundle)
        activations = calibration_activations(graph, inputs.batches)
        calib = CalibBundle(batches=activations).validate_against(model_bundle)
        out = save_bundle(calib, config.out)

        rows = []
        for layer in graph.layer_names:
            for fmt in (parse_format(name) for name in config.candidates):
                scales = calibrate_scales(activations[layer], activation_scheme(fmt))
                rows.append((layer, fmt.name, float(scales.scales[0])))
        write_csv(out / "scales.csv", SCALES_HEADER, rows)
        write_json(out / "scales.json", rows_to_records(SCALES_HEADER, rows))
        config.write(out)
        logger.info(f"Calibrated {len(graph.layers)} layers on {len(inputs.batches)} batches")
        return rows
