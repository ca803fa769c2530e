"""Shared logging setup for nlclab.

``get_logger()`` configures the ``nlclab`` logger once per (level, trace
file) and returns it. When a trace file is given, every record is also
appended there so a run can be inspected after the fact.
"""

import logging
import sys
from functools import lru_cache
from pathlib import Path
from typing import Optional


LOGGER_NAME = "nlclab"
LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"


class RunTraceHandler(logging.Handler):
    """Append log records from a run to a trace file."""

    def __init__(self, trace_file: Path) -> None:
        super().__init__(level=logging.DEBUG)
        self.trace_file = Path(trace_file)

    def emit(self, record: logging.LogRecord) -> None:
        try:
            self.trace_file.parent.mkdir(parents=True, exist_ok=True)
            with self.trace_file.open("a", encoding="utf-8") as f:
                f.write(f"=== {record.levelname} {record.name} ===\n")
                f.write(f"{record.getMessage()}\n")
        except OSError:
            self.handleError(record)


@lru_cache(maxsize=4)
def get_logger(level: str = "INFO", trace_file: Optional[Path] = None) -> logging.Logger:
    """Return the package logger, configured for ``level`` and ``trace_file``.

    Everything in nlclab logs through children of this logger, so the CLI
    only needs to call this once at startup.
    """

    logger = logging.getLogger(LOGGER_NAME)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)

    stream = logging.StreamHandler(sys.stderr)
    stream.setFormatter(logging.Formatter(LOG_FORMAT))
    stream.setLevel(level.upper())
    logger.addHandler(stream)

    if trace_file is not None:
        logger.addHandler(RunTraceHandler(trace_file))
        logger.setLevel(logging.DEBUG)
    else:
        logger.setLevel(level.upper())
    return logger
