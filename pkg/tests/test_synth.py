"""Tests for the synthetic interaction generator."""

from pathlib import Path

import pytest
from pydantic import ValidationError

from stage_gat.data.dataset import read_clips
from stage_gat.data.synth import (
    SynthRule,
    SynthSpec,
    label_mismatches,
    load_synth_spec,
    single_clip_scores,
    synth_generate,
    write_synth,
)
from stage_gat.learning.evaluation import frame_map, ground_truth_from_clips

EXAMPLE_SPEC = Path(__file__).resolve().parents[1] / "config" / "synth.example.yaml"


@pytest.fixture(scope="module")
def example():
    return synth_generate(load_synth_spec(EXAMPLE_SPEC))


def test_same_seed_gives_identical_files(tmp_path):
    spec = load_synth_spec(EXAMPLE_SPEC).model_copy(update={"n_videos": 6})

    first = write_synth(synth_generate(spec), tmp_path / "a")
    second = write_synth(synth_generate(spec), tmp_path / "b")
    other = write_synth(synth_generate(spec.model_copy(update={"seed": 1})), tmp_path / "c")

    for name in ("train", "val", "report"):
        assert first[name].read_bytes() == second[name].read_bytes()
    assert first["train"].read_bytes() != other["train"].read_bytes()


def test_split_keeps_videos_whole(example):
    train_videos = {c.video_id for c in example.train}
    val_videos = {c.video_id for c in example.val}

    assert not train_videos & val_videos
    assert len(val_videos) == 6
    assert example.report.n_train_clips == 18 * 12


def test_labels_agree_with_rules(example):
    assert label_mismatches(example) == []
    assert all(example.report.positives[c] > 0 for c in range(3))
    assert example.report.warnings == []


def test_labels_survive_a_file_round_trip(tmp_path, example):
    paths = write_synth(example, tmp_path)

    clips = read_clips(paths["train"]) + read_clips(paths["val"])

    assert label_mismatches(example, clips) == []


def _single_clip_ap(example, rule):
    clips = example.val
    report = frame_map(
        single_clip_scores(example, clips, rule),
        ground_truth_from_clips(clips),
        n_classes=example.spec.n_classes,
    )
    return report.per_class_ap[rule.class_id]


def test_spatial_rule_is_readable_from_one_clip(example):
    spatial = next(r for r in example.spec.rules if r.kind == "spatial-proximity")

    assert _single_clip_ap(example, spatial) == pytest.approx(1.0)


def test_temporal_rule_needs_neighbouring_clips(example):
    """Transient objects are resampled, so the clip itself does not reveal the label."""
    temporal = next(r for r in example.spec.rules if r.kind == "temporal-adjacent-object")

    assert _single_clip_ap(example, temporal) < 0.9


def test_actor_tracks_keep_their_index(example):
    video = [c for c in example.train if c.video_id == "synth000"]

    counts = {len(c.ground_truth_actors) for c in video}

    assert len(counts) == 1
    for previous, current in zip(video, video[1:], strict=False):
        for a, b in zip(previous.ground_truth_actors, current.ground_truth_actors, strict=True):
            assert abs(a.box.xc - b.box.xc) < 0.5


def test_unreachable_rule_is_reported():
    spec = SynthSpec(
        n_videos=2,
        clips_per_video=3,
        rules=[SynthRule(class_id=0, kind="actor-actor", radius=1e-9)],
        actors_per_clip=(1, 1),
    )

    result = synth_generate(spec)

    assert result.report.positives == {0: 0}
    assert "class 0" in result.report.warnings[0]
    assert result.report.to_dict()["positive_rate"] == {"0": 0.0}


def test_detections_are_emitted_on_request():
    spec = SynthSpec(n_videos=2, clips_per_video=2, emit_detections=True)

    result = synth_generate(spec)

    for clip in result.clips:
        assert len(clip.detected_actors) == len(clip.ground_truth_actors)
        assert all(0.6 <= d.score <= 1.0 for d in clip.detected_actors)


@pytest.mark.parametrize(
    "fields",
    [
        {"rules": [{"class_id": 0, "kind": "spatial-proximity", "object_kind": 5}]},
        {"rules": [{"class_id": 0, "kind": "spatial-proximity"}]},
        {"actors_per_clip": (3, 1)},
        {"val_fraction": 1.0},
    ],
)
def test_spec_validation(fields):
    with pytest.raises(ValidationError):
        SynthSpec(**fields)
