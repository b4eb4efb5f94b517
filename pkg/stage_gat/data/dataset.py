"""Line-delimited JSON detection-feature datasets: one ClipRecord per line."""

from __future__ import annotations

import hashlib
from collections.abc import Iterable, Sequence
from pathlib import Path

import structlog
from pydantic import ValidationError

from stage_gat.core.errors import DatasetFormatError
from stage_gat.models.records import ClipRecord

logger = structlog.get_logger("stage_gat.dataset")


def _describe(error: ValidationError) -> str:
    first = error.errors()[0]
    location = ".".join(str(part) for part in first["loc"]) or "record"
    return f"{location}: {first['msg']}"


def read_clips(path: str | Path) -> list[ClipRecord]:
    """Parse and validate a dataset file, returning clips sorted by (video, timestamp).

    Blank lines are ignored; an empty file is a valid empty dataset.

    Raises:
        FileNotFoundError: If ``path`` does not exist.
        DatasetFormatError: On a malformed or non-UTF-8 line (with its line number), a feature
            width that changes within a kind, or a repeated (video, timestamp).
    """
    path = Path(path)
    widths: dict[str, tuple[int, int]] = {}
    seen: dict[tuple[str, int], int] = {}
    clips: list[ClipRecord] = []
    with path.open("rb") as handle:
        for lineno, raw in enumerate(handle, start=1):
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise DatasetFormatError(
                    f"{path}:{lineno}: not valid UTF-8 at byte {exc.start}"
                ) from exc
            if not line.strip():
                continue
            try:
                clip = ClipRecord.model_validate_json(line)
            except ValidationError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {_describe(exc)}") from exc

            if clip.key in seen:
                raise DatasetFormatError(
                    f"{path}:{lineno}: timestamp {clip.timestamp} of video {clip.video_id!r} "
                    f"already appeared on line {seen[clip.key]}"
                )
            seen[clip.key] = lineno

            for entity in clip.entities:
                width = len(entity.feature)
                first = widths.setdefault(entity.kind, (width, lineno))
                if first[0] != width:
                    raise DatasetFormatError(
                        f"{path}:{lineno}: {entity.kind} feature width {width} differs from "
                        f"width {first[0]} first seen on line {first[1]}"
                    )
            clips.append(clip)

    clips.sort(key=lambda c: c.key)
    logger.debug("clips loaded", path=str(path), clips=len(clips))
    return clips


def write_clips(path: str | Path, clips: Iterable[ClipRecord]) -> Path:
    """Write one canonical JSON line per clip."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as handle:
        for clip in clips:
            handle.write(clip.to_line())
            handle.write("\n")
    return path


def feature_widths(clips: Sequence[ClipRecord]) -> tuple[int | None, int | None]:
    """(actor width, object width); None for a kind that never occurs."""
    actor = next((len(e.feature) for c in clips for e in c.actors), None)
    obj = next((len(e.feature) for c in clips for e in c.objects), None)
    return actor, obj


def label_count(clips: Sequence[ClipRecord]) -> int:
    """One more than the largest class id used by any actor."""
    return max(
        (label + 1 for c in clips for e in c.actors for label in (e.labels or [])),
        default=0,
    )


def sha256_digest(path: str | Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for block in iter(lambda: handle.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()
