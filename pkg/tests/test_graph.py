"""Tests for adjacency matrices, masks and window assembly."""

import math

import numpy as np
import pytest
from conftest import box, centred_box

from stage_gat.core.errors import DatasetFormatError, TemporalGapError
from stage_gat.core.graph import (
    build_window,
    feature_distance_adjacency,
    interaction_mask,
    merge_windows,
    multi_clip_adjacency,
    proximity_adjacency,
)
from stage_gat.core.model import StageModel
from stage_gat.data.dataset import read_clips, write_clips


def test_proximity_closed_form():
    """Centers 0.5 apart give exp(-0.5); coincident centers give 1."""
    a = centred_box(0.1, 0.1)
    b = centred_box(0.4, 0.5)

    A = proximity_adjacency([a, b, a]).value

    assert A[0, 1] == pytest.approx(math.exp(-0.5))
    assert A[0, 2] == pytest.approx(1.0)
    np.testing.assert_array_equal(np.diag(A), 1.0)


def test_proximity_is_symmetric():
    """A[i, j] == A[j, i] for random boxes."""
    rng = np.random.default_rng(0)
    boxes = [centred_box(*rng.uniform(0.1, 0.9, size=2)) for _ in range(6)]

    A = proximity_adjacency(boxes).value

    np.testing.assert_array_equal(A, A.T)
    assert (A > 0).all() and (A <= 1).all()


def test_proximity_needs_an_entity():
    with pytest.raises(ValueError):
        proximity_adjacency([])


def test_feature_distance_inverse_and_cap():
    """1/‖h_i − h_j‖ off the diagonal; identical rows and the diagonal hit the cap."""
    H = np.array([[0.0, 0.0], [3.0, 4.0], [0.0, 0.0]])

    A = feature_distance_adjacency(H, cap=1e6).value

    assert A[0, 1] == pytest.approx(0.2)
    assert A[0, 2] == 1e6
    np.testing.assert_array_equal(np.diag(A), 1e6)
    np.testing.assert_array_equal(A, A.T)


def test_multi_clip_block_pattern(make_clip):
    """Entity counts [2, 1, 2] with rf=3: only the clip 0 / clip 2 blocks are zero."""
    clips = [
        make_clip(0, [centred_box(0.2, 0.2)], [centred_box(0.3, 0.3)]),
        make_clip(1, [centred_box(0.5, 0.5)]),
        make_clip(2, [centred_box(0.7, 0.7)], [centred_box(0.8, 0.2)]),
    ]

    structure = multi_clip_adjacency(clips, rf_direct=3)
    A, tmask = structure.adjacency.value, structure.tmask

    assert A.shape == (5, 5)
    np.testing.assert_array_equal(structure.offsets, [0, 2, 3, 5])
    far = np.zeros((5, 5), dtype=bool)
    far[:2, 3:] = far[3:, :2] = True
    np.testing.assert_array_equal(tmask, ~far)
    assert (A[far] == 0.0).all()
    assert (A[~far] > 0.0).all()


def test_rf_one_is_block_diagonal(make_clip):
    """Without temporal links only same-clip blocks are filled."""
    clips = [make_clip(t, [centred_box(0.5, 0.5)]) for t in range(3)]

    A = multi_clip_adjacency(clips, rf_direct=1).adjacency.value

    np.testing.assert_array_equal(A, np.eye(3))


def test_cross_clip_value(make_clip):
    """Proximity applies unchanged across adjacent clips."""
    clips = [make_clip(0, [centred_box(0.1, 0.1)]), make_clip(1, [centred_box(0.4, 0.5)])]

    A = multi_clip_adjacency(clips).adjacency.value

    assert A[0, 1] == pytest.approx(math.exp(-0.5))


def test_single_clip_equals_proximity(make_clip):
    """Restricted to one clip, the window adjacency is the clip's proximity matrix."""
    boxes = [centred_box(0.2, 0.3), centred_box(0.6, 0.1), centred_box(0.5, 0.8)]
    clip = make_clip(0, boxes[:1], boxes[1:])

    window = multi_clip_adjacency([clip]).adjacency.value

    np.testing.assert_array_equal(window, proximity_adjacency(boxes).value)


def test_gap_and_video_change_are_rejected(make_clip):
    """Windows need consecutive timestamps of one video."""
    a = make_clip(4, [centred_box(0.5, 0.5)])
    b = make_clip(6, [centred_box(0.5, 0.5)])
    other = make_clip(5, [centred_box(0.5, 0.5)], video_id="other")

    with pytest.raises(TemporalGapError) as excinfo:
        multi_clip_adjacency([a, b])
    assert "4" in str(excinfo.value) and "6" in str(excinfo.value)
    with pytest.raises(ValueError):
        multi_clip_adjacency([a, other])


def test_interaction_masks():
    """Disabled blocks lose their off-diagonal entries; self-edges stay."""
    kinds = [True, True, False]

    np.testing.assert_array_equal(interaction_mask(kinds).value, np.ones((3, 3)))
    np.testing.assert_array_equal(
        interaction_mask(kinds, aa=False).value, [[1, 0, 1], [0, 1, 1], [1, 1, 1]]
    )
    objects = [False, False, True]
    np.testing.assert_array_equal(
        interaction_mask(objects, oo=False).value, [[1, 0, 1], [0, 1, 1], [1, 1, 1]]
    )
    np.testing.assert_array_equal(
        interaction_mask(kinds, aa=False, ao=False, oa=False, oo=False).value, np.eye(3)
    )


def test_build_window_orders_actors_first(make_clip, small_config):
    """Rows run clip by clip with actors ahead of objects; features arrive untouched."""
    clip = make_clip(
        0,
        [centred_box(0.2, 0.2), centred_box(0.6, 0.6)],
        [centred_box(0.4, 0.4)],
        labels=[[0], [1, 2]],
    )
    clip = clip.model_copy(update={"entities": [clip.entities[2], *clip.entities[:2]]})

    window = build_window([clip], small_config)

    np.testing.assert_array_equal(window.is_actor, [True, True, False])
    np.testing.assert_array_equal(window.actor_rows, [0, 1])
    np.testing.assert_array_equal(window.actor_labels, [[1, 0, 0], [0, 1, 1]])
    first = clip.actors[0]
    np.testing.assert_array_equal(
        window.actor_features[0], first.feature + first.box.geometry_features()
    )
    assert window.mask.diagonal().all()


def test_build_window_rejects_bad_widths_and_labels(make_clip, small_config):
    wide = make_clip(0, [centred_box(0.5, 0.5)], actor_dim=5)
    with pytest.raises(DatasetFormatError):
        build_window([wide], small_config)

    mislabelled = make_clip(0, [centred_box(0.5, 0.5)], labels=[[7]])
    with pytest.raises(DatasetFormatError):
        build_window([mislabelled], small_config)


def test_feature_distance_ablation_respects_temporal_mask(make_clip, small_config):
    """Feature-distance adjacency stays zero between disconnected clips."""
    config = small_config.with_ablation("feature-distance")
    clips = [make_clip(t, [centred_box(0.5, 0.5)], seed=t) for t in range(3)]

    window = build_window(clips, config)

    assert window.adjacency.value[0, 2] == 0.0
    assert window.adjacency.value[0, 0] == config.adj_cap
    assert window.adjacency.value[0, 1] > 0.0


def test_no_proximity_ablation_uses_plain_connectivity(make_clip, small_config):
    config = small_config.with_ablation("no-proximity")
    clips = [make_clip(t, [centred_box(0.1 + 0.3 * t, 0.5)]) for t in range(3)]

    window = build_window(clips, config)

    np.testing.assert_array_equal(window.adjacency.value, window.tmask.astype(float))


def test_merge_windows_is_block_diagonal(make_clip, small_config):
    """No adjacency or mask entry links two merged windows."""
    first = build_window(
        [make_clip(0, [centred_box(0.3, 0.3)], [box(0.1, 0.1, 0.2, 0.2)])], small_config
    )
    second = build_window(
        [make_clip(0, [centred_box(0.5, 0.5), centred_box(0.6, 0.6)], video_id="b")],
        small_config,
    )

    merged = merge_windows([first, second])

    assert merged.n_entities == 4
    assert merged.n_actors == 3
    assert not merged.mask[:2, 2:].any()
    assert (merged.adjacency.value[:2, 2:] == 0).all()
    np.testing.assert_array_equal(merged.offsets, [0, 2, 4])
    np.testing.assert_array_equal(merged.actor_rows, [0, 2, 3])
    assert [r.video_id for r in merged.actor_refs] == ["vid", "b", "b"]


def test_merged_windows_score_like_separate_windows(make_clip, small_config):
    """A block-diagonal minibatch gives the same logits as each window on its own."""
    rng = np.random.default_rng(4)
    windows = []
    for v in range(6):
        clips = [
            make_clip(
                t,
                [centred_box(*rng.uniform(0.1, 0.9, 2)) for _ in range(1 + (v + t) % 3)],
                [centred_box(*rng.uniform(0.1, 0.9, 2)) for _ in range(v % 2 + 1)],
                video_id=f"v{v}",
                seed=v,
            )
            for t in range(3)
        ]
        windows.append(build_window(clips, small_config))
    model = StageModel(small_config)

    merged = model.forward(merge_windows(windows)).value
    separate = np.vstack([model.forward(w).value for w in windows])

    assert merged.shape == separate.shape
    np.testing.assert_allclose(merged, separate, atol=1e-12)


def test_window_features_are_the_file_features(tmp_path, make_clip, small_config):
    """Features reach the model exactly as stored, with only the box geometry appended."""
    clips = [
        make_clip(t, [centred_box(0.2, 0.3), centred_box(0.6, 0.4)], [centred_box(0.5, 0.8)])
        for t in range(3)
    ]
    stored = read_clips(write_clips(tmp_path / "clips.jsonl", clips))

    window = build_window(stored, small_config)

    actors = [a for clip in stored for a in clip.actors]
    objects = [o for clip in stored for o in clip.objects]
    np.testing.assert_array_equal(window.actor_features[:, :4], [a.feature for a in actors])
    np.testing.assert_array_equal(window.object_features[:, :6], [o.feature for o in objects])
    np.testing.assert_array_equal(
        window.actor_features[:, 4:], [a.box.geometry_features() for a in actors]
    )
