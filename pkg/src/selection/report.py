"""
Selection report: per-layer choice, per-candidate errors and FP fraction.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

from pydantic import BaseModel, Field

from src.utils.output import write_csv, write_json

logger = logging.getLogger(__name__)

REPORT_VERSION = 1
CSV_HEADER = ("layer", "format", "error", "chosen")


class LayerSelection(BaseModel):
    """Outcome for one layer."""
    layer: str
    chosen_format: str
    chosen_is_fp: bool
    errors: Dict[str, float] = Field(..., description="Error per candidate, in evaluation order")

    @property
    def chosen_error(self) -> float:
        return self.errors[self.chosen_format]


class SelectionReport(BaseModel):
    """Everything needed to audit a selection run."""
    version: int = REPORT_VERSION
    config: Dict[str, Any]
    layers: List[LayerSelection] = Field(default_factory=list)
    complete: bool = True
    wall_clock_seconds: float = 0.0

    @property
    def fp_fraction(self) -> float:
        if not self.layers:
            return 0.0
        return sum(1 for layer in self.layers if layer.chosen_is_fp) / len(self.layers)

    @property
    def chosen_formats(self) -> Dict[str, str]:
        return {layer.layer: layer.chosen_format for layer in self.layers}

    def table_rows(self) -> List[Tuple[str, str, float, bool]]:
        """One row per layer x candidate, in layer then evaluation order."""
        return [
            (layer.layer, fmt, error, fmt == layer.chosen_format)
            for layer in self.layers
            for fmt, error in layer.errors.items()
        ]

    def to_payload(self) -> Dict[str, Any]:
        """JSON document without timing (timing varies between identical runs)."""
        return {
            "version": self.version,
            "config": self.config,
            "complete": self.complete,
            "fp_fraction": self.fp_fraction,
            "layers": [
                {"name": l.layer, "chosen": l.chosen_format, "chosen_is_fp": l.chosen_is_fp,
                 "errors": dict(l.errors)}
                for l in self.layers
            ],
            "timing": {"file": "timing.json"},
        }

    def write(self, out_dir: Union[str, Path]) -> Dict[str, Path]:
        """
        Write ``report.json``, ``report.csv`` and ``timing.json``.

        Args:
            out_dir: Output directory

        Returns:
            Paths written, by role
        """
        out_dir = Path(out_dir)
        rows = self.table_rows()
        paths = {
            "json": write_json(out_dir / "report.json", self.to_payload()),
            "csv": write_csv(out_dir / "report.csv", CSV_HEADER, rows),
            "timing": write_json(out_dir / "timing.json",
                                 {"wall_clock_seconds": self.wall_clock_seconds}),
        }
        logger.info(
            f"Wrote selection report for {len(self.layers)} layers "
            f"(fp_fraction={self.fp_fraction:.3f}, complete={self.complete}) to {out_dir}"
        )
        return paths
