"""
Atomic, locale-independent table and JSON writers.
"""

import csv
import io
import json
import logging
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, List, Mapping, Sequence, Union

logger = logging.getLogger(__name__)


def format_real(value: float) -> str:
    """Shortest round-tripping decimal with a ``.`` separator, whatever the locale."""
    value = float(value)
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return repr(value)


def _cell(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format_real(value)
    if value is None:
        return ""
    return str(value)


def atomic_write_text(path: Union[str, Path], text: str) -> Path:
    """Write ``text`` to a sibling temp file and rename it over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.debug(f"Wrote {path}")
    return path


def render_csv(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    """RFC-4180 CSV text (CRLF line endings, minimal quoting)."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return buffer.getvalue()


def write_csv(path: Union[str, Path], header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    return atomic_write_text(path, render_csv(header, rows))


def _jsonable(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return format_real(value)
    if isinstance(value, Mapping):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def render_json(payload: Any) -> str:
    return json.dumps(_jsonable(payload), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path: Union[str, Path], payload: Any) -> Path:
    return atomic_write_text(path, render_json(payload))


def rows_to_records(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> List[dict]:
    """Zip table rows into dictionaries for the JSON twin of a CSV."""
    return [dict(zip(header, row)) for row in rows]
