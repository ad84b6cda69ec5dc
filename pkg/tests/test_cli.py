import csv
import json

import numpy as np
import pytest

from bleedseg.cli import main
from bleedseg.data import Manifest, read_vvol
from bleedseg.model import load_checkpoint
from bleedseg.volume import LabelVolume, Volume


def run_cli(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    """A tiny generated dataset shared by the CLI tests."""
    root = tmp_path_factory.mktemp("data")
    rc = run_cli(
        "gen-data", "--out", str(root), "--count", "4", "--seed", "100",
        "--classes", "2", "--extent", "36",
    )
    assert rc == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    """A short CLI training run producing a checkpoint and loss curve."""
    work = tmp_path_factory.mktemp("train")
    config = {
        "manifest": str(dataset / "manifest.json"),
        "seed": 5,
        "steps": 6,
        "tile": [24, 24, 24],
        "checkpoint": str(work / "model.ckpt"),
        "checkpoint_every": 3,
        "loss_csv": str(work / "loss.csv"),
        "model": {
            "in_channels": 1, "num_classes": 3, "base_channels": 2,
            "depth": 1, "dropout_p": 0.1,
        },
    }
    cfg_path = work / "run.json"
    cfg_path.write_text(json.dumps(config))
    rc = run_cli("train", "--config", str(cfg_path))
    assert rc == 0
    return work, cfg_path


class TestGenData:
    def test_files_and_manifest(self, dataset):
        manifest = Manifest.load(dataset / "manifest.json")
        assert len(manifest.entries) == 4
        assert manifest.num_classes == 3
        assert manifest.class_names[0] == "background"
        splits = [e.split for e in manifest.entries]
        # 70/15/15 by index: round(4*0.7)=3 train, round(4*0.15)=1 val
        assert splits == ["train", "train", "train", "val"]
        manifest.validate_files(dataset)

    def test_deterministic_given_seed(self, dataset, tmp_path):
        rc = run_cli(
            "gen-data", "--out", str(tmp_path), "--count", "1", "--seed", "100",
            "--classes", "2", "--extent", "36",
        )
        assert rc == 0
        a = (dataset / "phantom_0000_img.vvol").read_bytes()
        b = (tmp_path / "phantom_0000_img.vvol").read_bytes()
        assert a == b


class TestPreprocess:
    def test_pipeline_applied(self, dataset, tmp_path):
        pipeline = tmp_path / "pipe.json"
        pipeline.write_text(json.dumps({"steps": [{"op": "normalize", "lo": 0.0, "hi": 0.5}]}))
        out = tmp_path / "out"
        rc = run_cli(
            "preprocess", "--pipeline", str(pipeline),
            "--in-manifest", str(dataset / "manifest.json"),
            "--out", str(out), "--seed", "0",
        )
        assert rc == 0
        orig = read_vvol(dataset / "phantom_0000_img.vvol")
        proc = read_vvol(out / "phantom_0000_img.vvol")
        expect = np.clip(orig.data, 0.0, 0.5) / 0.5
        assert np.allclose(proc.data, expect, atol=1e-6)
        Manifest.load(out / "manifest.json")


class TestTrain:
    def test_outputs(self, trained):
        work, _ = trained
        model, opt_dict, step = load_checkpoint(work / "model.ckpt")
        assert step == 6
        assert opt_dict is not None and opt_dict["kind"] == "adam"
        with open(work / "loss.csv", newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["step", "loss"]
        assert len(rows) == 7
        assert [r[0] for r in rows[1:]] == [str(i) for i in range(6)]

    def test_resume_continues_step_count(self, trained, dataset, tmp_path):
        work, cfg_path = trained
        cfg = json.loads(cfg_path.read_text())
        cfg["steps"] = 2
        cfg["checkpoint"] = str(tmp_path / "resumed.ckpt")
        cfg["loss_csv"] = str(tmp_path / "loss.csv")
        cfg2 = tmp_path / "run2.json"
        cfg2.write_text(json.dumps(cfg))
        rc = run_cli(
            "train", "--config", str(cfg2), "--resume", str(work / "model.ckpt")
        )
        assert rc == 0
        _, _, step = load_checkpoint(tmp_path / "resumed.ckpt")
        assert step == 8
        with open(tmp_path / "loss.csv", newline="") as f:
            rows = list(csv.reader(f))
        assert rows[1][0] == "6"

    def test_missing_config_is_io_error(self):
        assert run_cli("train", "--config", "/nonexistent/run.json") == 3


class TestPredictAndEval:
    def test_predict_writes_labels_and_probs(self, trained, dataset, tmp_path):
        work, _ = trained
        rc = run_cli(
            "predict", "--checkpoint", str(work / "model.ckpt"),
            "--in", str(dataset / "phantom_0003_img.vvol"),
            "--out", str(tmp_path / "pred"),
        )
        assert rc == 0
        labels = read_vvol(tmp_path / "pred_labels.vvol")
        probs = read_vvol(tmp_path / "pred_probs.vvol")
        assert isinstance(labels, LabelVolume)
        assert isinstance(probs, Volume)
        assert labels.spatial == (36, 36, 36)
        assert probs.data.shape == (3, 36, 36, 36)
        assert np.allclose(probs.data.sum(axis=0), 1.0, atol=1e-5)

    def test_eval_self_comparison_is_perfect(self, dataset, tmp_path):
        report = tmp_path / "report.csv"
        rc = run_cli(
            "eval",
            "--pred-manifest", str(dataset / "manifest.json"),
            "--truth-manifest", str(dataset / "manifest.json"),
            "--report", str(report), "--format", "csv",
        )
        assert rc == 0
        with open(report, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["class", "precision", "recall", "accuracy", "iou"]
        for row in rows[1:]:
            assert row[1:] == ["100.00"] * 4

    def test_eval_json_report(self, dataset, tmp_path):
        report = tmp_path / "report.json"
        rc = run_cli(
            "eval",
            "--pred-manifest", str(dataset / "manifest.json"),
            "--truth-manifest", str(dataset / "manifest.json"),
            "--report", str(report),
        )
        assert rc == 0
        doc = json.loads(report.read_text())
        assert {c["name"] for c in doc["classes"]} == {"lesion_1", "lesion_2"}
        assert doc["mean_iou"] == pytest.approx(1.0)

    def test_predict_on_labels_file_is_error(self, trained, dataset, tmp_path):
        work, _ = trained
        rc = run_cli(
            "predict", "--checkpoint", str(work / "model.ckpt"),
            "--in", str(dataset / "phantom_0000_lab.vvol"),
            "--out", str(tmp_path / "pred"),
        )
        assert rc == 1


class TestGridsearch:
    def test_tiny_grid(self, dataset, tmp_path):
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps({
            "learning_rates": [0.001], "dropouts": [0.0],
            "conv_kernels": [3], "pool_kernels": [2], "budget": 2,
        }))
        config = {
            "manifest": str(dataset / "manifest.json"),
            "seed": 1, "steps": 2, "tile": [24, 24, 24],
            "model": {"in_channels": 1, "num_classes": 3, "base_channels": 2,
                      "depth": 1, "dropout_p": 0.0},
        }
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps(config))
        out = tmp_path / "grid.csv"
        rc = run_cli(
            "gridsearch", "--grid", str(grid), "--config", str(cfg),
            "--out", str(out),
        )
        assert rc == 0
        with open(out, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["lr", "dropout", "k_conv", "k_pool", "metric", "status"]
        assert len(rows) == 2
        assert rows[1][5] == "ok"


class TestUtilityCommands:
    def test_gradcheck_exit_zero(self):
        assert run_cli("gradcheck", "--seeds", "2") == 0

    def test_shapes_table(self, capsys):
        rc = run_cli(
            "shapes", "--depth", "2", "--lo", "44", "--hi", "64",
        )
        assert rc == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert out[0] == "input,output"
        assert out[1:] == ["44,4", "48,8", "52,12", "56,16", "60,20", "64,24"]

    def test_unknown_command_rejected(self):
        with pytest.raises(SystemExit):
            run_cli("frobnicate")
