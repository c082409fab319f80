"""
Quantization commands: analysis, format selection and evaluation.
"""

import argparse
import logging
from pathlib import Path
from typing import Dict, List, Optional, TextIO, Tuple

from src.commands.common import (
    QUANT_FIELDS,
    add_config_option,
    add_quant_options,
    collect,
    emit,
    load_calib,
    load_model,
)
from src.config import AnalyzeConfig, EvalConfig, SelectConfig, ToolkitSettings, build_run_config
from src.core.metrics import ErrorReduction
from src.selection.analysis import ANALYSIS_HEADER, Study, StudyRow, run_study
from src.selection.report import CSV_HEADER, SelectionReport
from src.selection.selector import build_quantized_bundle, mofq_select
from src.simulation.graph import LayerQuantConfig, ModelGraph, compare_models, graph_from_quantized
from src.storage.bundles import InputsBundle, ModelBundle, QuantizedBundle, load_bundle, load_typed, save_bundle
from src.utils.cache import ScaleCache
from src.utils.errors import BundleError, SelectionError
from src.utils.output import render_csv, rows_to_records, write_csv, write_json

logger = logging.getLogger(__name__)

EVAL_HEADER = ("label", "mse", "nsr", "fp_fraction")

EvalRow = Tuple[str, float, float, Optional[float]]


class QuantizeCommands:
    """Analyze, select and evaluate quantized models."""

    def __init__(self, settings: ToolkitSettings, cache: ScaleCache, stdout: Optional[TextIO] = None):
        """
        Initialize quantization commands.

        Args:
            settings: Toolkit settings
            cache: Scale cache shared by every selection in the process
            stdout: Stream tables are printed to
        """
        self.settings = settings
        self.cache = cache
        self.stdout = stdout
        logger.info("Initialized quantization commands")

    def register(self, subparsers) -> None:
        analyze = subparsers.add_parser("analyze", help="Per-layer, per-format quantization errors")
        add_quant_options(analyze)
        analyze.add_argument("--study", choices=[s.value for s in Study], default=None,
                             help="weight, activation (held-out batches) or layer (default)")
        analyze.set_defaults(handler=self.handle_analyze)

        select = subparsers.add_parser("select", help="Choose a format per layer and quantize the model")
        add_quant_options(select)
        select.set_defaults(handler=self.handle_select)

        evaluate = subparsers.add_parser("eval", help="Final-output error of quantized models")
        evaluate.add_argument("--model", default=None, help="Reference model bundle")
        evaluate.add_argument("--quantized", default=None,
                              help="Quantized bundle (a model bundle counts as unquantized)")
        evaluate.add_argument("--label", default=None, help="Row label of --quantized (default: mofq)")
        evaluate.add_argument("--baseline", dest="baselines", action="append", default=None,
                              metavar="LABEL=PATH", help="Extra bundle to evaluate; repeatable")
        evaluate.add_argument("--inputs", default=None, help="Evaluation inputs bundle")
        evaluate.add_argument("--out", default=None, help="Output directory")
        add_config_option(evaluate)
        evaluate.set_defaults(handler=self.handle_eval)

    def _defaults(self) -> Dict[str, int]:
        return {"workers": self.settings.workers}

    # analyze

    def handle_analyze(self, args: argparse.Namespace) -> None:
        config = build_run_config(AnalyzeConfig, collect(args, QUANT_FIELDS + ("study",)), args.config,
                                  defaults=self._defaults())
        rows = self.analyze(config)
        emit(render_csv(ANALYSIS_HEADER, rows), self.stdout)

    def analyze(self, config: AnalyzeConfig) -> List[StudyRow]:
        """
        Run one study and write ``analysis.csv``/``analysis.json`` to ``config.out``.

        Returns:
            Study rows in model layer order
        """
        model_bundle, graph = load_model(config.model)
        selection = config.selection_config()
        needs_calib = config.study is Study.ACTIVATION or (
            config.study is Study.LAYER and selection.needs_calibration
        )
        calib = load_calib(config.calib, model_bundle, needs_calib, f"for the {config.study.value} study")
        rows = run_study(config.study, graph, calib, selection, self.cache)

        out = Path(config.out)
        write_csv(out / "analysis.csv", ANALYSIS_HEADER, rows)
        write_json(out / "analysis.json", {
            "study": config.study.value,
            "config": selection.echo(),
            "rows": rows_to_records(ANALYSIS_HEADER, rows),
        })
        config.write(out)
        return rows

    # select

    def handle_select(self, args: argparse.Namespace) -> None:
        config = build_run_config(SelectConfig, collect(args, QUANT_FIELDS), args.config,
                                  defaults=self._defaults())
        report = self.select(config)
        emit(render_csv(CSV_HEADER, report.table_rows()), self.stdout)

    def select(self, config: SelectConfig) -> SelectionReport:
        """
        Run selection; write the report, the quantized bundle and ``run_config.json``.

        A failed run still writes the partial report (``complete: false``)
        before the error propagates.
        """
        model_bundle, graph = load_model(config.model)
        selection = config.selection_config()
        calib = load_calib(config.calib, model_bundle, selection.needs_calibration,
                           f"for {config.mode.value} selection with the {selection.error_metric.value} metric")
        out = Path(config.out)
        try:
            configs, report = mofq_select(graph, calib, selection, self.cache)
        except SelectionError as e:
            if e.report is not None:
                e.report.write(out)
                config.write(out)
            raise
        report.write(out)
        save_bundle(build_quantized_bundle(graph, configs), out / "quantized")
        config.write(out)
        return report

    # eval

    def handle_eval(self, args: argparse.Namespace) -> None:
        fields = ("model", "quantized", "label", "baselines", "inputs", "out")
        config = build_run_config(EvalConfig, collect(args, fields), args.config)
        rows = self.evaluate(config)
        emit(render_csv(EVAL_HEADER, rows), self.stdout)

    def _candidate(self, path: Optional[str], reference: ModelGraph
                   ) -> Tuple[ModelGraph, Optional[Dict[str, LayerQuantConfig]], Optional[float]]:
        if path is None:
            return reference, None, None
        bundle = load_bundle(path)
        if isinstance(bundle, ModelBundle):
            return ModelGraph.from_bundle(bundle), None, None
        if isinstance(bundle, QuantizedBundle):
            graph, configs = graph_from_quantized(bundle)
            quantized = [layer for layer in bundle.layers if layer.weight_q is not None]
            fp_fraction = (
                sum(1 for layer in quantized if layer.weight_q.scheme.format.is_fp) / len(quantized)
                if quantized else None
            )
            return graph, configs, fp_fraction
        raise BundleError(f"{path} holds a {type(bundle).__name__}, expected a model or quantized bundle",
                          path=str(path))

    def evaluate(self, config: EvalConfig) -> List[EvalRow]:
        """
        Compare each quantized model's final output with the reference on held-out inputs.

        Returns:
            One row per label: mean MSE, mean NSR and the FP share of quantized layers
        """
        _, reference = load_model(config.model)
        inputs = load_typed(config.inputs, InputsBundle)
        rows = []
        for label, path in [(config.label, config.quantized)] + list(config.baselines.items()):
            candidate, configs, fp_fraction = self._candidate(path, reference)
            metrics = compare_models(reference, candidate, configs, inputs.batches)
            rows.append((label, metrics[ErrorReduction.MSE], metrics[ErrorReduction.NSR], fp_fraction))
            logger.info(f"Evaluated {label}: mse={metrics[ErrorReduction.MSE]!r}, "
                        f"nsr={metrics[ErrorReduction.NSR]!r}")

        out = Path(config.out)
        write_csv(out / "eval.csv", EVAL_HEADER, rows)
        write_json(out / "eval.json", rows_to_records(EVAL_HEADER, rows))
        config.write(out)
        return rows
