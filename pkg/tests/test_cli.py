import json

import numpy as np
import pytest
from typer.testing import CliRunner

from uncertainty_localizer.cli import app
from uncertainty_localizer.data.datakit import write_features


runner = CliRunner()


@pytest.fixture
def spec_file(tmp_path, tiny_spec):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(tiny_spec.model_dump(mode="json")))
    return path


@pytest.fixture
def trained(tmp_path, dataset_dir, tiny_run_config):
    out = tmp_path / "run"
    result = runner.invoke(app, ["train", "--data", str(dataset_dir), "--out", str(out), "--config", str(tiny_run_config)])
    assert result.exit_code == 0, result.output
    return out


def test_gen_data_writes_dataset(tmp_path, spec_file):
    out = tmp_path / "data"
    result = runner.invoke(app, ["gen-data", "--spec", str(spec_file), "--out", str(out), "--seed", "5"])

    assert result.exit_code == 0, result.output
    assert (out / "manifest.json").exists()
    assert (out / "gt.json").exists()
    assert (out / "resolved_config.json").exists()
    assert len(list((out / "features").glob("*.umft"))) == 9


def test_gen_data_same_seed_same_hash(tmp_path, spec_file):
    for name in ("a", "b"):
        runner.invoke(app, ["gen-data", "--spec", str(spec_file), "--out", str(tmp_path / name), "--seed", "5"])

    first = json.loads((tmp_path / "a" / "manifest.json").read_text())
    second = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert first["dataset_hash"] == second["dataset_hash"]


def test_gen_data_invalid_spec(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps({"num_classes": 3, "colour": "blue"}))

    result = runner.invoke(app, ["gen-data", "--spec", str(path), "--out", str(tmp_path / "data")])

    assert result.exit_code == 2
    assert "Error" in result.output


def test_train_writes_checkpoint(trained):
    assert (trained / "model.umck").exists()
    assert (trained / "train_state.npz").exists()
    assert (trained / "resolved_config.json").exists()
    assert json.loads((trained / "run_manifest.json").read_text())["steps"] == 4


def test_train_resume_continues_step_count(tmp_path, trained, dataset_dir, tiny_run_config):
    config = json.loads(tiny_run_config.read_text())
    config["train"]["steps"] = 6
    longer = tmp_path / "longer.json"
    longer.write_text(json.dumps(config))

    result = runner.invoke(app, [
        "train", "--data", str(dataset_dir), "--out", str(tmp_path / "resumed"),
        "--config", str(longer), "--resume", str(trained / "train_state.npz"),
    ])

    assert result.exit_code == 0, result.output
    assert json.loads((tmp_path / "resumed" / "run_manifest.json").read_text())["steps"] == 6


def test_train_numerical_failure_exit_code(tmp_path, dataset_dir, tiny_run_config):
    config = json.loads(tiny_run_config.read_text())
    config["train"]["batch_size"] = 6
    path = tmp_path / "all.json"
    path.write_text(json.dumps(config))
    write_features(np.full((35, 8), np.nan), dataset_dir.parent / "features" / "video_0000.umft")

    result = runner.invoke(app, ["train", "--data", str(dataset_dir), "--out", str(tmp_path / "run"), "--config", str(path)])

    assert result.exit_code == 3


def test_detect_is_deterministic(tmp_path, trained, dataset_dir, tiny_run_config):
    outputs = []
    for name in ("a.json", "b.json"):
        out = tmp_path / name
        result = runner.invoke(app, [
            "detect", "--checkpoint", str(trained / "model.umck"), "--data", str(dataset_dir),
            "--config", str(tiny_run_config), "--out", str(out), "--threads", "2",
        ])
        assert result.exit_code == 0, result.output
        outputs.append(out.read_bytes())

    assert outputs[0] == outputs[1]
    results = json.loads(outputs[0])["results"]
    assert sorted(results) == ["video_0006", "video_0007", "video_0008"]
    for items in results.values():
        for item in items:
            assert set(item) == {"label", "segment", "score"}


def test_detect_score_mode_flag(tmp_path, trained, dataset_dir):
    out = tmp_path / "softmax.json"
    result = runner.invoke(app, [
        "detect", "--checkpoint", str(trained / "model.umck"), "--data", str(dataset_dir),
        "--out", str(out), "--score-mode", "softmax_only",
    ])

    assert result.exit_code == 0, result.output
    config = json.loads((tmp_path / "softmax.resolved_config.json").read_text())
    assert config["detect"]["score_mode"] == "softmax_only"


def test_detect_missing_checkpoint(tmp_path, dataset_dir):
    result = runner.invoke(app, [
        "detect", "--checkpoint", str(tmp_path / "nope.umck"), "--data", str(dataset_dir), "--out", str(tmp_path / "d.json"),
    ])
    assert result.exit_code == 2


def test_eval_perfect_detections(tmp_path, dataset_dir):
    truth = json.loads((dataset_dir.parent / "gt.json").read_text())
    detections = {
        "results": {
            video_id: [{"label": a["label"], "segment": a["segment"], "score": 1.0} for a in video["annotations"]]
            for video_id, video in truth["database"].items()
            if video["subset"] == "test"
        }
    }
    path = tmp_path / "dets.json"
    path.write_text(json.dumps(detections))

    result = runner.invoke(app, [
        "eval", "--detections", str(path), "--gt", str(dataset_dir.parent / "gt.json"), "--subset", "test",
    ])

    assert result.exit_code == 0, result.output
    assert "Average mAP: 1.0000" in result.output
    report = json.loads((tmp_path / "eval_report.json").read_text())
    assert report["average_map"] == 1.0
    assert report["thresholds"] == [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]


def test_eval_mismatched_vocabulary(tmp_path, dataset_dir):
    path = tmp_path / "dets.json"
    path.write_text(json.dumps({"results": {"video_0006": [{"label": "other", "segment": [0, 1], "score": 1.0}]}}))

    result = runner.invoke(app, ["eval", "--detections", str(path), "--gt", str(dataset_dir.parent / "gt.json")])

    assert result.exit_code == 2


def test_eval_bad_threshold_list(tmp_path, dataset_dir):
    path = tmp_path / "dets.json"
    path.write_text(json.dumps({"results": {}}))

    result = runner.invoke(app, [
        "eval", "--detections", str(path), "--gt", str(dataset_dir.parent / "gt.json"), "--thresholds", "0.5,abc",
    ])

    assert result.exit_code == 2


def test_grad_check_command():
    result = runner.invoke(app, ["grad-check"])

    assert result.exit_code == 0, result.output
    assert "embed_weights" in result.output
    assert "20 seeds" in result.output
    assert "Floored" in result.output


def test_hist_command(tmp_path, trained, dataset_dir):
    out = tmp_path / "hist.csv"
    result = runner.invoke(app, [
        "hist", "--data", str(dataset_dir), "--checkpoint", str(trained / "model.umck"), "--out", str(out), "--bins", "5",
    ])

    assert result.exit_code == 0, result.output
    assert "Overlap coefficient" in result.output
    assert len(out.read_text().splitlines()) == 6


def test_ablate_emits_rows_in_order(tmp_path, dataset_dir, tiny_run_config):
    out = tmp_path / "ablation"
    result = runner.invoke(app, [
        "ablate", "--data", str(dataset_dir), "--config", str(tiny_run_config), "--out", str(out), "--no-m-sweep",
    ])

    assert result.exit_code == 0, result.output
    report = json.loads((out / "ablation.json").read_text())
    assert [row["name"] for row in report["modes"]] == [
        "softmax_only", "minmax_fused", "fused+L_um", "fused+L_um+L_be",
    ]
    assert report["m_sweep"] == []
    assert (out / "cls" / "model.umck").exists()
    assert (out / "cls+um" / "model.umck").exists()
    assert (out / "full" / "model.umck").exists()


def test_version():
    result = runner.invoke(app, ["version"])
    assert result.exit_code == 0
