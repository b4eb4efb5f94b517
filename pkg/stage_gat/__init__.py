"""stage-gat package exposing the STAGE model and its training entry point."""

from __future__ import annotations

from typing import TYPE_CHECKING

if TYPE_CHECKING:  # pragma: no cover - import only for typing
    from .core.model import StageModel
    from .learning.trainer import fit
    from .models.config import StageConfig

__version__ = "0.1.0"

__all__ = ["StageConfig", "StageModel", "fit", "__version__"]


def __getattr__(name: str):
    if name == "StageModel":
        from .core.model import StageModel

        return StageModel
    if name == "StageConfig":
        from .models.config import StageConfig

        return StageConfig
    if name == "fit":
        from .learning.trainer import fit

        return fit
    raise AttributeError(f"module 'stage_gat' has no attribute {name!r}")
