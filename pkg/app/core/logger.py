"""
Log setup for the CLI: one stderr handler, JSON lines or plain text.

Pipeline code attaches context through ``extra={...}``; see ``EXTRA_FIELDS``.
"""

from __future__ import annotations

import json
import logging
import math
import sys
from datetime import datetime, timezone
from typing import Any, Optional

import numpy as np

from app.core.config import settings

EXTRA_FIELDS = ("component", "stage", "iteration", "ratio", "phase", "loss", "psnr", "latency_ms")

_HANDLER_FLAG = "_scenecompress_handler"


def _jsonable(value: Any) -> Any:
    """numpy scalars become Python numbers; non-finite floats become strings (strict JSON)."""
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return value


class JSONFormatter(logging.Formatter):
    """One JSON object per line.

    ``component`` defaults to the subpackage that logged (``training``,
    ``compression``, ...).
    """

    def format(self, record: logging.LogRecord) -> str:
        entry = {
            "ts": datetime.fromtimestamp(record.created, timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "msg": record.getMessage(),
        }
        parts = record.name.split(".")
        if len(parts) > 1 and parts[0] == "app":
            entry["component"] = parts[1]
        for key in EXTRA_FIELDS:
            value = getattr(record, key, None)
            if value is not None:
                entry[key] = _jsonable(value)
        if record.exc_info and record.exc_info[0] is not None:
            entry["exception"] = self.formatException(record.exc_info)
        return json.dumps(entry, allow_nan=False)


class PlainFormatter(logging.Formatter):
    def __init__(self) -> None:
        super().__init__(fmt="%(asctime)s %(levelname)-7s %(name)s: %(message)s", datefmt="%H:%M:%S")


def setup_logging(level: Optional[str] = None, json_lines: Optional[bool] = None) -> None:
    """Install the stderr handler once; later calls only adjust the level."""
    root = logging.getLogger()
    root.setLevel(getattr(logging, (level or settings.log_level).upper(), logging.INFO))
    if any(getattr(h, _HANDLER_FLAG, False) for h in root.handlers):
        return

    use_json = settings.log_json if json_lines is None else json_lines
    handler = logging.StreamHandler(sys.stderr)
    setattr(handler, _HANDLER_FLAG, True)
    handler.setFormatter(JSONFormatter() if use_json else PlainFormatter())
    root.addHandler(handler)

    for name in ("matplotlib", "PIL"):
        logging.getLogger(name).setLevel(logging.WARNING)
