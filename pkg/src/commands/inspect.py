"""
Format inspection command.
"""

import argparse
import logging
from pathlib import Path
from typing import List, Optional, Sequence, TextIO, Tuple

from src.commands.common import emit
from src.core.formats import enumerate_values, format_value, parse_format
from src.utils.errors import InvalidParameterError
from src.utils.output import render_csv, rows_to_records, write_csv, write_json

logger = logging.getLogger(__name__)

FORMATS_HEADER = ("format", "code", "bits", "value", "kind")

KNOWN_FORMATS = ["int4", "int8", "fp4_e2m1", "fp4_e2m1_ieee", "fp8_e4m3", "fp8_e5m2"]

FormatRow = Tuple[str, int, str, str, str]


class FormatCommands:
    """Print the value table of number formats."""

    def __init__(self, stdout: Optional[TextIO] = None):
        """
        Initialize format commands.

        Args:
            stdout: Stream tables are printed to (stdout by default)
        """
        self.stdout = stdout
        logger.info("Initialized format commands")

    def register(self, subparsers) -> None:
        parser = subparsers.add_parser("formats", help="List every code of a number format")
        parser.add_argument("name", nargs="?", default=None, help="Format name, e.g. fp4_e2m1")
        parser.add_argument("--all", action="store_true", help=f"All of {', '.join(KNOWN_FORMATS)}")
        parser.add_argument("--out", default=None, help="Also write formats.csv and formats.json here")
        parser.set_defaults(handler=self.handle)

    def handle(self, args: argparse.Namespace) -> None:
        rows = self.formats(args.name, show_all=args.all)
        emit(render_csv(FORMATS_HEADER, rows), self.stdout)
        if args.out is not None:
            out = Path(args.out)
            write_csv(out / "formats.csv", FORMATS_HEADER, rows)
            write_json(out / "formats.json", rows_to_records(FORMATS_HEADER, rows))

    def formats(self, name: Optional[str] = None, show_all: bool = False) -> List[FormatRow]:
        """
        Value table rows for one format or all known formats.

        Args:
            name: Format name
            show_all: List every known format instead

        Returns:
            One row per code: format, code, bit pattern, value, kind

        Raises:
            FormatParseError: If the name is not a valid format
        """
        if show_all:
            names: Sequence[str] = KNOWN_FORMATS
        elif name is not None:
            names = [name]
        else:
            raise InvalidParameterError("name", "Give a format name or --all")

        rows = []
        for fmt in (parse_format(n) for n in names):
            for row in enumerate_values(fmt):
                rows.append((fmt.name, row.code, format(row.code, f"0{fmt.bits}b"),
                             format_value(row), row.kind.value))
        logger.info(f"Listed {len(rows)} codes for {len(names)} format(s)")
        return rows
