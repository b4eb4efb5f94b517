"""Logging helper that honors settings and supports JSON output."""

from __future__ import annotations

import logging
from pathlib import Path

import structlog
from structlog.dev import ConsoleRenderer
from structlog.processors import (
    JSONRenderer,
    StackInfoRenderer,
    TimeStamper,
    UnicodeDecoder,
    format_exc_info,
)

from stage_gat.utils.config import Settings


def configure_logging(
    settings: Settings, *, level: str | None = None, json_mode: bool | None = None
) -> None:
    """Route structlog through stdlib logging; ``level``/``json_mode`` override settings."""
    config = settings.logging or {}
    level_name = str(level or config.get("level", "INFO")).upper()
    numeric_level = getattr(logging, level_name, logging.INFO)
    as_json = bool(config.get("json", False)) if json_mode is None else json_mode
    log_file = config.get("file")

    shared_processors = [
        structlog.stdlib.add_logger_name,
        structlog.stdlib.add_log_level,
        TimeStamper(fmt="iso"),
        StackInfoRenderer(),
        format_exc_info,
        UnicodeDecoder(),
    ]

    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    root.setLevel(numeric_level)

    stream_handler = logging.StreamHandler()
    stream_handler.setFormatter(
        structlog.stdlib.ProcessorFormatter(
            processor=JSONRenderer() if as_json else ConsoleRenderer(colors=False),
            foreign_pre_chain=shared_processors,
        )
    )
    root.addHandler(stream_handler)

    if log_file:
        try:
            log_path = Path(log_file)
            log_path.parent.mkdir(parents=True, exist_ok=True)
            file_handler = logging.FileHandler(log_path)
            file_handler.setFormatter(
                structlog.stdlib.ProcessorFormatter(
                    processor=JSONRenderer(),  # file logs are always JSON
                    foreign_pre_chain=shared_processors,
                )
            )
            root.addHandler(file_handler)
        except OSError:
            # stderr-only logging when the path is not writable
            pass

    structlog.configure(
        processors=shared_processors + [structlog.stdlib.ProcessorFormatter.wrap_for_formatter],
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=False,
    )
