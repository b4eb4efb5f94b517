"""End-to-end tests for the stage-gat command line."""

import csv
import json
import logging

import pytest
import structlog
import yaml

from stage_gat.data.dataset import label_count, read_clips
from stage_gat.interfaces.cli.main import main

SPEC = {
    "n_videos": 4,
    "clips_per_video": 5,
    "seed": 3,
    "rules": [
        {"class_id": 0, "kind": "spatial-proximity", "object_kind": 0, "radius": 0.3},
        {"class_id": 1, "kind": "actor-actor", "radius": 0.3},
    ],
}


@pytest.fixture(autouse=True)
def isolated(tmp_path, monkeypatch):
    """Run from an empty directory and undo the logging setup afterwards."""
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("STAGE_GAT_CONFIG", raising=False)
    yield
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    structlog.reset_defaults()


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture
def dataset(tmp_path, capsys):
    spec = tmp_path / "spec.yaml"
    spec.write_text(yaml.safe_dump(SPEC), encoding="utf-8")
    code, _, _ = run(capsys, "synth", "--spec", spec, "--out", tmp_path / "data")
    assert code == 0
    return tmp_path / "data"


def test_params_for_one_preset(capsys):
    code, out, _ = run(capsys, "params", "--preset", "stage-i3d")

    assert code == 0
    assert "6,432,284" in out


def test_params_for_all_presets(capsys):
    code, out, _ = run(capsys, "params")

    assert code == 0
    for name in ("stage-i3d", "stage-r101", "stage-slowfast", "tiny"):
        assert name in out


def test_flops_report(capsys):
    code, out, _ = run(capsys, "flops")

    payload = json.loads(out)
    assert code == 0
    assert payload["macs"] == 180_839_592
    assert payload["flops"] == 2 * payload["macs"]
    assert payload["gflops"] == pytest.approx(2 * payload["gmacs"])
    assert set(payload["terms"]) == {
        "projection",
        "fc11",
        "fc12",
        "weighted_sum",
        "fc13",
        "classifier",
    }


def test_gradcheck_passes_and_repeats(capsys):
    first = run(capsys, "gradcheck", "--seed", 1)
    second = run(capsys, "gradcheck", "--seed", 1)

    assert first[0] == 0
    assert "PASS" in first[1]
    assert first[1] == second[1]


def test_missing_input_is_a_usage_error(tmp_path, capsys):
    missing = tmp_path / "nowhere.npz"

    code, _, err = run(capsys, "eval", "--checkpoint", missing, "--data", missing)

    assert code == 2
    assert str(missing) in err


def _train(capsys, dataset, out, *extra):
    return run(
        capsys,
        "train",
        "--train",
        dataset / "train.jsonl",
        "--val",
        dataset / "val.jsonl",
        "--out",
        out,
        *extra,
    )


def test_invalid_configuration_is_a_usage_error(tmp_path, dataset, capsys):
    code, _, err = _train(capsys, dataset, tmp_path / "bad", "--rf-direct", 2)

    assert code == 2
    assert "invalid configuration" in err


def test_unknown_flag_exits_with_usage(capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(["params", "--frobnicate"])
    assert excinfo.value.code == 2


def test_synth_writes_dataset_and_manifest(dataset):
    report = json.loads((dataset / "report.json").read_text())
    manifest = json.loads((dataset / "manifest.json").read_text())

    assert report["n_train_clips"] == 15
    assert report["n_val_clips"] == 5
    assert manifest["command"] == "synth"
    assert manifest["seed"] == 3
    assert len(manifest["inputs"]) == 1


@pytest.mark.slow
def test_train_then_eval_reproduces_validation_map(tmp_path, dataset, capsys):
    """Evaluating the saved best checkpoint gives the mAP recorded while training."""
    train_dir = tmp_path / "train"
    code, out, _ = _train(capsys, dataset, train_dir, "--epochs", 2, "--seed", 5)
    assert code == 0
    assert out.startswith("best epoch")
    for name in ("best.npz", "last.npz", "history.csv", "eval_val.csv", "manifest.json"):
        assert (train_dir / name).exists()

    manifest = json.loads((train_dir / "manifest.json").read_text())
    clips = read_clips(dataset / "train.jsonl") + read_clips(dataset / "val.jsonl")
    assert manifest["config"]["max_epochs"] == 2
    assert manifest["config"]["seed"] == 5
    assert manifest["config"]["actor_dim"] == 12
    assert manifest["config"]["n_classes"] == max(label_count(clips), 1)
    with (train_dir / "history.csv").open(newline="") as handle:
        history = list(csv.DictReader(handle))
    recorded = float(history[manifest["best_epoch"] - 1]["val_map"])

    code, out, _ = run(
        capsys,
        "eval",
        "--checkpoint",
        train_dir / "best.npz",
        "--data",
        dataset / "val.jsonl",
        "--out",
        tmp_path / "eval",
    )
    assert code == 0
    summary, body = out.split("\n", 1)
    assert summary.startswith("frame-mAP@0.5=")
    assert json.loads(body)["mean_ap"] == recorded
    assert (tmp_path / "eval" / "eval.csv").exists()


@pytest.mark.slow
def test_ablated_training_records_its_switches(tmp_path, dataset, capsys):
    code, _, _ = _train(
        capsys, dataset, tmp_path / "ablated", "--epochs", 1, "--ablate", "no-temporal"
    )

    manifest = json.loads((tmp_path / "ablated" / "manifest.json").read_text())
    assert code == 0
    assert manifest["config"]["temporal_on"] is False


def test_eval_rejects_mismatched_data(tmp_path, dataset, capsys):
    """A checkpoint trained on other feature widths exits with a failure."""
    spec = tmp_path / "other.yaml"
    spec.write_text(yaml.safe_dump(dict(SPEC, actor_dim=7)), encoding="utf-8")
    assert run(capsys, "synth", "--spec", spec, "--out", tmp_path / "other")[0] == 0
    assert _train(capsys, dataset, tmp_path / "model", "--epochs", 1)[0] == 0

    code, _, _ = run(
        capsys,
        "eval",
        "--checkpoint",
        tmp_path / "model" / "best.npz",
        "--data",
        tmp_path / "other" / "val.jsonl",
    )

    assert code == 1


@pytest.mark.parametrize(
    ("argv", "report_name"),
    [
        (["gradcheck", "--seed", "2"], "gradcheck.json"),
        (["params", "--preset", "tiny"], "params.json"),
        (["flops", "--actors", "2", "--objects", "3"], "flops.json"),
    ],
)
def test_report_commands_write_output_and_manifest(tmp_path, capsys, argv, report_name):
    out = tmp_path / "report"

    code, _, _ = run(capsys, *argv, "--out", out)

    manifest = json.loads((out / "manifest.json").read_text())
    assert code == 0
    assert (out / report_name).exists()
    assert manifest["command"] == argv[0]
    assert manifest["outputs"] == [str(out / report_name)]
    assert sorted(p.name for p in out.iterdir()) == sorted(["manifest.json", report_name])


def test_report_commands_default_under_output_root(tmp_path, capsys):
    code, _, _ = run(capsys, "flops")

    assert code == 0
    payload = json.loads((tmp_path / "runs" / "flops" / "flops.json").read_text())
    assert payload["macs"] == 180_839_592


@pytest.mark.slow
def test_eval_takes_class_floor_from_settings(tmp_path, dataset, capsys):
    """The settings `evaluation` section supplies defaults; the flag still wins."""
    settings = tmp_path / "settings.yaml"
    settings.write_text("evaluation:\n  min_class_examples: 100000\n", encoding="utf-8")
    assert _train(capsys, dataset, tmp_path / "model", "--epochs", 1)[0] == 0
    base = ["eval", "--checkpoint", tmp_path / "model" / "best.npz", "--data"]
    base += [dataset / "val.jsonl", "--config", settings]

    code, out, _ = run(capsys, *base, "--out", tmp_path / "strict")
    filtered = json.loads(out.split("\n", 1)[1])
    manifest = json.loads((tmp_path / "strict" / "manifest.json").read_text())
    _, out, _ = run(capsys, *base, "--min-class-examples", 0, "--out", tmp_path / "loose")
    unfiltered = json.loads(out.split("\n", 1)[1])

    assert code == 0
    assert filtered["mean_ap"] == 0.0
    assert unfiltered["mean_ap"] > 0.0
    assert manifest["settings_file"] == str(settings)
    assert manifest["settings"]["evaluation"] == {"min_class_examples": 100000}
