"""End-to-end tests for the command line entry point.

Every test drives ``main(argv)`` directly and checks the exit code plus
the printed resolved-config line, so the contract tested here is exactly
what a shell user sees: 0 success, 1 usage, 2 bad data, 3 numeric failure.
"""
import dataclasses
import json
import shutil

import numpy as np
import pytest

from asis.cli import main
from asis.cloud import LabeledCloud, read_scene, write_scene
from asis.synthgen import SceneSpec
from asis.trainer import META_SUFFIX, load_trained

TINY_NET = {
    "n_classes": 4,
    "embedding_dim": 3,
    "encoder_widths": [8, 16],
    "decoder_widths": [16, 8],
    "knn_k": 8,
}

TINY_TRAIN = {
    "epochs": 2,
    "batch_size": 2,
    "sample_size": 64,
    "min_points": 40,
    "seed": 1,
}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen", "--scenes", "3", "--seed", "21", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    # grouping and merge sections left out on purpose: they are optional.
    path = tmp_path_factory.mktemp("cfg") / "run.json"
    path.write_text(json.dumps({"network": TINY_NET, "train": TINY_TRAIN}))
    return path


@pytest.fixture(scope="module")
def checkpoint(dataset, config_file, tmp_path_factory):
    ckpt = tmp_path_factory.mktemp("model") / "model.ckpt"
    code = main(["train", "--data", str(dataset), "--config", str(config_file),
                 "--out", str(ckpt)])
    assert code == 0
    return ckpt


@pytest.fixture(scope="module")
def scene_path(dataset):
    return sorted(dataset.glob("scene_*.txt"))[0]


@pytest.fixture(scope="module")
def prediction(checkpoint, scene_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("pred") / "pred.txt"
    code = main(["infer", "--model", str(checkpoint), "--scene", str(scene_path),
                 "--out", str(out)])
    assert code == 0
    return out


def _config_payload(captured: str, label: str) -> dict:
    lines = [l for l in captured.splitlines() if l.startswith(f"config {label}: ")]
    assert len(lines) == 1, f"expected exactly one config line, got {lines!r}"
    return json.loads(lines[0][len(f"config {label}: "):])


class TestUsage:
    def test_no_command_is_usage_error(self):
        assert main([]) == 1

    def test_unknown_command_is_usage_error(self):
        assert main(["resample"]) == 1

    def test_missing_required_option_is_usage_error(self):
        assert main(["gen", "--scenes", "2"]) == 1

    def test_non_integer_argument_is_usage_error(self):
        assert main(["gen", "--scenes", "two", "--out", "x"]) == 1

    def test_version_prints_and_exits_zero(self, capsys):
        assert main(["--version"]) == 0
        assert "asis" in capsys.readouterr().out


class TestGen:
    def test_writes_scenes_and_manifest(self, dataset, capsys):
        assert (dataset / "manifest.json").exists()
        assert len(sorted(dataset.glob("scene_*.txt"))) == 3

    def test_prints_resolved_config(self, tmp_path, capsys):
        out = tmp_path / "out"
        assert main(["gen", "--scenes", "1", "--seed", "9", "--out", str(out)]) == 0
        captured = capsys.readouterr().out
        payload = _config_payload(captured, "gen")
        assert payload["scenes"] == 1
        assert payload["seed"] == 9
        assert len(payload["spec"]["classes"]) == 4
        assert f"wrote 1 scenes" in captured

    def test_spec_file_feeds_generator(self, tmp_path, capsys):
        spec = SceneSpec()
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(spec.to_dict()))
        out = tmp_path / "out"
        code = main(["gen", "--scenes", "1", "--out", str(out), "--spec", str(spec_path)])
        assert code == 0
        payload = _config_payload(capsys.readouterr().out, "gen")
        assert payload["spec"] == spec.to_dict()

    def test_zero_scenes_is_data_error(self, tmp_path, capsys):
        assert main(["gen", "--scenes", "0", "--out", str(tmp_path / "x")]) == 2
        assert "data error" in capsys.readouterr().err

    def test_missing_spec_file_is_data_error(self, tmp_path):
        code = main(["gen", "--scenes", "1", "--out", str(tmp_path / "x"),
                     "--spec", str(tmp_path / "nope.json")])
        assert code == 2


class TestTrain:
    def test_writes_checkpoint_log_and_sidecar(self, checkpoint):
        assert checkpoint.exists()
        assert checkpoint.with_name(checkpoint.name + META_SUFFIX).exists()
        assert checkpoint.with_suffix(".log.csv").exists()

    def test_prints_resolved_run_config(self, dataset, config_file, tmp_path, capsys):
        ckpt = tmp_path / "m.ckpt"
        assert main(["train", "--data", str(dataset), "--config", str(config_file),
                     "--out", str(ckpt)]) == 0
        captured = capsys.readouterr().out
        payload = _config_payload(captured, "train")
        assert payload["train"]["epochs"] == 2
        assert payload["network"]["use_sa"] is True
        assert payload["network"]["use_if"] is True
        assert "grouping" in payload and "merge" in payload  # defaults resolved
        assert "trained" in captured and "checkpoint at" in captured

    def test_toggle_flags_disable_coupling(self, dataset, config_file, tmp_path):
        ckpt = tmp_path / "plain.ckpt"
        assert main(["train", "--data", str(dataset), "--config", str(config_file),
                     "--out", str(ckpt), "--no-sa", "--no-if"]) == 0
        _, run = load_trained(ckpt)
        assert run.network.use_sa is False
        assert run.network.use_if is False

    def test_missing_config_is_data_error(self, dataset, tmp_path):
        code = main(["train", "--data", str(dataset),
                     "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "m.ckpt")])
        assert code == 2

    def test_unknown_config_section_is_data_error(self, dataset, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"network": TINY_NET, "optimizer": {"lr": 1.0}}))
        code = main(["train", "--data", str(dataset), "--config", str(cfg),
                     "--out", str(tmp_path / "m.ckpt")])
        assert code == 2
        assert "optimizer" in capsys.readouterr().err

    def test_invalid_json_config_is_data_error(self, dataset, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text("{not json")
        code = main(["train", "--data", str(dataset), "--config", str(cfg),
                     "--out", str(tmp_path / "m.ckpt")])
        assert code == 2


class TestInfer:
    def test_prediction_parses_as_scene(self, scene_path, prediction):
        scene = read_scene(scene_path)
        pred = read_scene(prediction)
        assert len(pred) == len(scene)
        assert pred.semantic_labels.min() >= 0
        assert pred.instance_ids.min() >= 0
        np.testing.assert_allclose(pred.positions, scene.positions, atol=1e-6)

    def test_prints_config_and_summary(self, checkpoint, scene_path, tmp_path, capsys):
        out = tmp_path / "pred.txt"
        assert main(["infer", "--model", str(checkpoint), "--scene", str(scene_path),
                     "--out", str(out)]) == 0
        captured = capsys.readouterr().out
        payload = _config_payload(captured, "infer")
        assert payload["network"]["embedding_dim"] == 3
        assert "predicted" in captured

    def test_missing_model_is_data_error(self, scene_path, tmp_path):
        code = main(["infer", "--model", str(tmp_path / "nope.ckpt"),
                     "--scene", str(scene_path), "--out", str(tmp_path / "p.txt")])
        assert code == 2

    def test_missing_scene_is_data_error(self, checkpoint, tmp_path):
        code = main(["infer", "--model", str(checkpoint),
                     "--scene", str(tmp_path / "nope.txt"),
                     "--out", str(tmp_path / "p.txt")])
        assert code == 2

    def test_nan_checkpoint_is_numeric_error(self, checkpoint, scene_path, tmp_path, capsys):
        # Corrupt the final linear head: a NaN there must reach the logits.
        # (A NaN inside an encoder layer is legitimately masked by relu.)
        params, _ = load_trained(checkpoint)
        params.semantic_head.weight.values[0, 0] = np.nan
        bad = tmp_path / "bad.ckpt"
        params.save(bad)
        shutil.copy(str(checkpoint) + META_SUFFIX, str(bad) + META_SUFFIX)
        code = main(["infer", "--model", str(bad), "--scene", str(scene_path),
                     "--out", str(tmp_path / "p.txt")])
        assert code == 3
        assert "numeric error" in capsys.readouterr().err


class TestEval:
    def test_scores_prediction_against_truth(self, scene_path, prediction, tmp_path, capsys):
        report_path = tmp_path / "report.json"
        code = main(["eval", "--pred", str(prediction), "--gt", str(scene_path),
                     "--report", str(report_path)])
        assert code == 0
        captured = capsys.readouterr().out
        payload = _config_payload(captured, "eval")
        assert payload["iou_threshold"] == 0.5
        report = json.loads(report_path.read_text())
        for key in ("mean_coverage", "mean_weighted_coverage", "mean_iou",
                    "overall_accuracy"):
            assert key in report
            assert 0.0 <= report[key] <= 1.0

    def test_perfect_prediction_scores_one(self, scene_path, tmp_path, capsys):
        report_path = tmp_path / "self.json"
        assert main(["eval", "--pred", str(scene_path), "--gt", str(scene_path),
                     "--report", str(report_path)]) == 0
        out = capsys.readouterr().out
        assert "mean_weighted_coverage" in out  # table names every summary metric
        report = json.loads(report_path.read_text())
        np.testing.assert_allclose(report["mean_iou"], 1.0, atol=1e-12)
        np.testing.assert_allclose(report["mean_weighted_coverage"], 1.0, atol=1e-12)

    def test_point_count_mismatch_is_data_error(self, scene_path, tmp_path, capsys):
        cloud = read_scene(scene_path)
        short = LabeledCloud(cloud.positions[:-5], cloud.colors[:-5],
                             cloud.semantic_labels[:-5], cloud.instance_ids[:-5],
                             cloud.n_classes)
        short_path = tmp_path / "short.txt"
        write_scene(short_path, short)
        assert main(["eval", "--pred", str(short_path), "--gt", str(scene_path)]) == 2
        assert "point counts differ" in capsys.readouterr().err

    def test_class_count_mismatch_is_data_error(self, scene_path, tmp_path, capsys):
        cloud = read_scene(scene_path)
        widened = dataclasses.replace(cloud, n_classes=5)
        other_path = tmp_path / "wide.txt"
        write_scene(other_path, widened)
        assert main(["eval", "--pred", str(other_path), "--gt", str(scene_path)]) == 2
        assert "class counts differ" in capsys.readouterr().err

    def test_unlabeled_prediction_instance_is_data_error(self, scene_path, tmp_path, capsys):
        cloud = read_scene(scene_path)
        ids = cloud.instance_ids.copy()
        ids[0] = -1
        holey = dataclasses.replace(cloud, instance_ids=ids)
        holey_path = tmp_path / "holey.txt"
        write_scene(holey_path, holey)
        assert main(["eval", "--pred", str(holey_path), "--gt", str(scene_path)]) == 2
        assert "unlabeled" in capsys.readouterr().err

    def test_missing_file_is_data_error(self, scene_path, tmp_path):
        code = main(["eval", "--pred", str(tmp_path / "nope.txt"), "--gt", str(scene_path)])
        assert code == 2


class TestNumericCommands:
    def test_gradcheck_passes(self, capsys):
        assert main(["gradcheck", "--seed", "3"]) == 0
        out = capsys.readouterr().out
        assert "max relative error" in out
        assert "gradient check passed" in out

    def test_gradcheck_flags_corrupted_gradient(self, monkeypatch, capsys):
        # Skew one backward rule by 1%: the check must fail with exit 3.
        import asis.autodiff as adiff

        def crooked_relu(a):
            mask = a.values > 0.0
            out_values = np.where(mask, a.values, 0.0)

            def backward(grad):
                adiff._accum(a, grad * mask * 1.01)

            return adiff.Tensor(out_values, a.requires_grad, (a,), backward)

        monkeypatch.setattr(adiff, "relu", crooked_relu)
        assert main(["gradcheck", "--seed", "3"]) == 3
        assert "FAILED" in capsys.readouterr().err

    def test_selftest_passes(self, capsys):
        assert main(["selftest"]) == 0
        out = capsys.readouterr().out
        assert "selftest passed" in out
