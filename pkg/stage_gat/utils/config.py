"""Runtime settings for stage-gat: logging, threads, output root and default overrides."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import structlog
import yaml
from dotenv import load_dotenv

load_dotenv()
logger = structlog.get_logger("stage_gat.config")

DEFAULT_PATH = "config/settings.yaml"
SAMPLE_PATH = "config/settings.example.yaml"
CONFIG_ENV = "STAGE_GAT_CONFIG"
THREADS_ENV = "STAGE_THREADS"
SECTIONS = ("logging", "runtime", "training", "evaluation")


@dataclass
class Settings:
    logging: dict[str, Any] = field(default_factory=lambda: {"level": "INFO", "json": False})
    runtime: dict[str, Any] = field(default_factory=lambda: {"threads": 1, "output_root": "runs"})
    training: dict[str, Any] = field(default_factory=dict)
    evaluation: dict[str, Any] = field(default_factory=dict)

    file_path: str | None = field(default=None, repr=False)

    @property
    def threads(self) -> int:
        """Worker threads; the STAGE_THREADS environment variable wins over the file."""
        raw = os.environ.get(THREADS_ENV, self.runtime.get("threads", 1))
        try:
            return max(1, int(raw))
        except (TypeError, ValueError):
            logger.warning("ignoring invalid thread count", value=raw)
            return 1

    @property
    def output_root(self) -> Path:
        return Path(self.runtime.get("output_root", "runs"))

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data.pop("file_path", None)
        return data


def load_settings(path: str | None = None) -> Settings:
    """Load YAML settings from ``path``, $STAGE_GAT_CONFIG, settings.yaml or the sample."""
    candidate = path or os.environ.get(CONFIG_ENV)
    if candidate is None:
        candidate = DEFAULT_PATH if Path(DEFAULT_PATH).exists() else SAMPLE_PATH
    chosen = Path(candidate)
    if not chosen.exists():
        logger.debug("no settings file found, using defaults", path=str(chosen))
        return Settings()

    with chosen.open("r", encoding="utf-8") as handle:
        data: dict[str, Any] = yaml.safe_load(handle) or {}

    known = {k: v for k, v in data.items() if k in SECTIONS}
    unknown = sorted(set(data) - set(known))
    if unknown:
        logger.warning("unknown settings sections ignored", sections=unknown, path=str(chosen))
    settings = Settings(**known)
    settings.file_path = str(chosen)
    return settings
