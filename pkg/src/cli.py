"""
Command-line front end for the quantization toolkit.
"""

import argparse
import logging
import sys
from typing import Optional, Sequence, TextIO

from src import __version__
from src.commands.data import DataCommands
from src.commands.inspect import FormatCommands
from src.commands.quantize import QuantizeCommands
from src.config import ToolkitSettings, load_config
from src.utils.cache import ScaleCache
from src.utils.errors import QuantToolkitError, exit_code_for

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

logger = logging.getLogger(__name__)


def setup_logging(settings: ToolkitSettings) -> None:
    """Send logs to stderr; stdout is reserved for tables."""
    level = logging.DEBUG if settings.debug else getattr(logging, settings.log_level.upper(), logging.INFO)
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)


class QuantToolkitCLI:
    """
    Dispatches subcommands and maps failures to exit codes.

    Exit codes: 0 success, 2 argument/parse error, 3 data/validation error,
    4 algorithm failure.
    """

    def __init__(self, settings: Optional[ToolkitSettings] = None, stdout: Optional[TextIO] = None):
        """
        Initialize the CLI.

        Args:
            settings: Toolkit settings (read from the environment when omitted)
            stdout: Stream tables are printed to
        """
        self.settings = settings or load_config()
        self.cache = ScaleCache(max_size=self.settings.scale_cache_size)
        self.format_commands = FormatCommands(stdout)
        self.data_commands = DataCommands(self.settings, stdout)
        self.quantize_commands = QuantizeCommands(self.settings, self.cache, stdout)
        self.parser = self._build_parser()
        logger.info("Initialized QuantToolkitCLI")

    def _build_parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(
            prog="qtk",
            description="Bit-exact INT/FP quantization and per-layer format selection",
        )
        parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
        subparsers = parser.add_subparsers(dest="command", required=True)
        self.format_commands.register(subparsers)
        self.data_commands.register(subparsers)
        self.quantize_commands.register(subparsers)
        return parser

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        """
        Parse ``argv`` and run the chosen command.

        Returns:
            Process exit code
        """
        try:
            args = self.parser.parse_args(argv)
        except SystemExit as e:
            # argparse already printed usage; --help/--version exit 0
            return e.code if isinstance(e.code, int) else 2

        logger.info(f"Running command: {args.command}")
        try:
            args.handler(args)
            return 0
        except QuantToolkitError as e:
            logger.error(f"Command {args.command} failed: {e}")
            print(f"Error: {e}", file=sys.stderr)
            return exit_code_for(e)
        except Exception as e:
            logger.error(f"Unexpected error in command {args.command}: {e}", exc_info=True)
            print(f"Unexpected error: {e}", file=sys.stderr)
            return exit_code_for(e)
        finally:
            logger.info(f"Final cache stats: {self.cache.get_stats()}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point."""
    settings = load_config()
    setup_logging(settings)
    return QuantToolkitCLI(settings).run(argv)


if __name__ == "__main__":
    sys.exit(main())
