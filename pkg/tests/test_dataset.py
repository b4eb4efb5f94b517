"""Tests for reading and writing detection-feature datasets."""

import pytest

from stage_gat.core.errors import DatasetFormatError
from stage_gat.data.dataset import (
    feature_widths,
    label_count,
    read_clips,
    sha256_digest,
    write_clips,
)
from stage_gat.models.records import ClipRecord


def _line(video, t, actor_feature=(0.5, 1.25), object_feature=(2.0, -1.0, 0.0)):
    truth = {
        "kind": "actor",
        "box": [0.1, 0.1, 0.3, 0.5],
        "feature": list(actor_feature),
        "labels": [t % 3],
    }
    detection = {
        "kind": "actor",
        "box": [0.4, 0.2, 0.6, 0.7],
        "score": 0.8,
        "feature": list(actor_feature),
    }
    obj = {"kind": "object", "box": [0.5, 0.5, 0.9, 0.9], "feature": list(object_feature)}
    record = {"video_id": video, "timestamp": t, "entities": [truth, detection, obj]}
    return ClipRecord.model_validate(record).to_line()


def test_round_trip(tmp_path):
    """Reading a written file gives the same records and rewriting gives the same bytes."""
    source = tmp_path / "clips.jsonl"
    source.write_text("".join(_line("b", t) + "\n" for t in (0, 1)) + _line("a", 5) + "\n")

    clips = read_clips(source)
    copy = write_clips(tmp_path / "copy.jsonl", clips)

    assert [c.key for c in clips] == [("a", 5), ("b", 0), ("b", 1)]
    assert read_clips(copy) == clips
    write_clips(tmp_path / "again.jsonl", read_clips(copy))
    assert sha256_digest(copy) == sha256_digest(tmp_path / "again.jsonl")
    assert clips[0].actors[1].labels is None
    assert clips[0].actors[1].score == 0.8


def test_empty_and_blank_files(tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    blank = tmp_path / "blank.jsonl"
    blank.write_text("\n" + _line("v", 0) + "\n\n")

    assert read_clips(empty) == []
    assert len(read_clips(blank)) == 1


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_clips(tmp_path / "absent.jsonl")


def test_width_mismatch_names_both_widths(tmp_path):
    path = tmp_path / "clips.jsonl"
    path.write_text(_line("v", 0) + "\n" + _line("v", 1, object_feature=(1.0, 2.0)) + "\n")

    with pytest.raises(DatasetFormatError) as excinfo:
        read_clips(path)

    message = str(excinfo.value)
    assert ":2:" in message
    assert "object feature width 2" in message and "width 3" in message


def test_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "clips.jsonl"
    path.write_text(_line("v", 0) + "\n{not json\n")

    with pytest.raises(DatasetFormatError, match=r"clips.jsonl:2:"):
        read_clips(path)


def test_undecodable_bytes_report_line_number(tmp_path):
    path = tmp_path / "clips.jsonl"
    path.write_bytes((_line("v", 0) + "\n").encode() + b'{"video_id": "v\xff"}\n')

    with pytest.raises(DatasetFormatError, match=r"clips.jsonl:2: not valid UTF-8"):
        read_clips(path)


@pytest.mark.parametrize(
    "entity",
    [
        '{"kind": "actor", "box": [0.5, 0.1, 0.3, 0.5], "feature": [1.0]}',
        '{"kind": "actor", "box": [0.1, 0.1, 0.3], "feature": [1.0]}',
        '{"kind": "actor", "box": [0.1, 0.1, 0.3, 0.5], "feature": []}',
        '{"kind": "object", "box": [0.1, 0.1, 0.3, 0.5], "feature": [1.0], "labels": [0]}',
        '{"kind": "person", "box": [0.1, 0.1, 0.3, 0.5], "feature": [1.0]}',
    ],
)
def test_invalid_entities_are_rejected(tmp_path, entity):
    path = tmp_path / "clips.jsonl"
    path.write_text(f'{{"video_id": "v", "timestamp": 0, "entities": [{entity}]}}\n')

    with pytest.raises(DatasetFormatError, match=":1:"):
        read_clips(path)


def test_duplicate_timestamp(tmp_path):
    path = tmp_path / "clips.jsonl"
    path.write_text(_line("v", 3) + "\n" + _line("w", 3) + "\n" + _line("v", 3) + "\n")

    with pytest.raises(DatasetFormatError, match="line 1"):
        read_clips(path)


def test_widths_and_label_count(tmp_path):
    path = tmp_path / "clips.jsonl"
    path.write_text("".join(_line("v", t) + "\n" for t in range(3)))
    clips = read_clips(path)

    assert feature_widths(clips) == (2, 3)
    assert label_count(clips) == 3
    assert feature_widths([]) == (None, None)
    assert label_count([]) == 0
