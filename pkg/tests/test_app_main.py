"""Tests for sonar_kd.app.main and the subcommand handlers."""

import csv
import json
from unittest.mock import patch

import numpy as np
import pytest
from PIL import Image

from sonar_kd.app.main import main
from sonar_kd.core.boxes import DetBox
from sonar_kd.core.dataaug import load_dataset, read_index, save_image
from sonar_kd.core.detector import Model, save_checkpoint
from sonar_kd.core.evalmetrics import read_predictions, write_predictions
from sonar_kd.errors import ConfigError, DivergenceError, MissingFileError, SpecMismatchError
from tests.conftest import tiny_spec


def _envelope(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


def _run(argv):
    """Run main and return the exit code (0 when it returns normally)."""
    try:
        main(argv)
    except SystemExit as exc:
        return exc.code
    return 0


@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / "data"
    code = _run(
        ["make-dataset", "--seed", "1", "--out", str(out), "--num-images", "20", "--size", "64", "--wall-ratio", "1.0", "--no-expand"]
    )
    assert code == 0
    return out


class TestErrorHandling:
    """Test exit codes and the JSON error envelope."""

    @pytest.mark.parametrize(
        "error,code",
        [
            (ConfigError("bad flag"), 2),
            (MissingFileError("no file", {"path": "x"}), 3),
            (SpecMismatchError("other contract"), 4),
            (DivergenceError("nan loss", {"iteration": 3}), 5),
        ],
    )
    @patch("sonar_kd.app.main.parse_args")
    def test_exit_codes(self, mock_parse, error, code, capsys):
        """Test each error class maps to its exit code and envelope."""
        mock_parse.side_effect = error

        with pytest.raises(SystemExit) as exc_info:
            main([])

        assert exc_info.value.code == code
        envelope = _envelope(capsys)
        assert envelope["code"] == error.code
        assert envelope["message"] == error.message
        assert envelope["context"] == error.context

    @patch("sonar_kd.app.main.parse_args")
    def test_keyboard_interrupt(self, mock_parse, capsys):
        """Test Ctrl-C exits with 130."""
        mock_parse.side_effect = KeyboardInterrupt

        with pytest.raises(SystemExit) as exc_info:
            main([])

        assert exc_info.value.code == 130
        assert _envelope(capsys)["code"] == "interrupted"

    def test_kd_without_logits(self, capsys):
        """Test a real flag conflict surfaces as config_error."""
        assert _run(["train", "--dataset", "d", "--out", "o", "--kd"]) == 2
        assert _envelope(capsys)["code"] == "config_error"

    def test_missing_dataset(self, tmp_path, capsys):
        """Test a missing dataset manifest exits with 3."""
        assert _run(["eval", "--dataset", str(tmp_path / "nope"), "--predictions", str(tmp_path)]) == 3
        assert _envelope(capsys)["code"] == "missing_file"


class TestMakeDataset:
    """Test the make-dataset command."""

    def test_writes_dataset_and_snapshot(self, dataset, capsys):
        """Test the manifest splits and the replayable snapshot."""
        index = read_index(dataset)
        assert len(index.ids("train")) == 14
        assert len(index.ids("val")) == 3
        assert len(index.ids("test")) == 3
        snapshot = (dataset / "run_config.txt").read_text()
        assert snapshot.startswith("# sonar-kd make-dataset\n")
        assert "wall_ratio=1.0\n" in snapshot

    def test_expansion(self, tmp_path):
        """Test the default run adds three variants per image."""
        out = tmp_path / "expanded"
        assert _run(["make-dataset", "--out", str(out), "--num-images", "10", "--sigma", "20"]) == 0
        entries = read_index(out).entries
        assert len(entries) == 40
        assert {e["provenance"] for e in entries} == {"original", "noise", "flip", "noise_flip"}


class TestEval:
    """Test evaluation from prediction files."""

    def test_perfect_predictions(self, dataset, tmp_path):
        """Test predictions copied from the labels give AP50 = 1."""
        preds = tmp_path / "oracle"
        for sample in load_dataset(dataset, "test"):
            boxes = [DetBox(b.class_id, 1.0, b.cx, b.cy, b.w, b.h) for b in sample.boxes]
            write_predictions(preds / f"{sample.image_id}.txt", boxes, sample.width, sample.height)
        reports = tmp_path / "reports"

        code = _run(["eval", "--dataset", str(dataset), "--predictions", str(preds), "--out", str(reports)])

        assert code == 0
        (row,) = json.loads((reports / "report.json").read_text())
        assert row["model"] == "oracle"
        assert row["ap50"] == pytest.approx(1.0)
        assert row["tp_pct"] == 100.0
        assert (reports / "report.csv").is_file()
        assert (reports / "run_config.txt").is_file()

    def test_missing_prediction_file(self, dataset, tmp_path, capsys):
        """Test a test image without a prediction file exits with 3."""
        (tmp_path / "empty").mkdir()
        assert _run(["eval", "--dataset", str(dataset), "--predictions", str(tmp_path / "empty")]) == 3


@pytest.fixture
def checkpoint(tmp_path):
    return save_checkpoint(Model(tiny_spec()), tmp_path / "ckpt")


class TestInferAndVideo:
    """Test inference and video evaluation with a small checkpoint."""

    def test_infer_writes_predictions_and_overlay(self, checkpoint, tmp_path):
        """Test the prediction file and an overlay at the original image size."""
        image = tmp_path / "frame.png"
        save_image(image, np.full((80, 100), 90, dtype=np.uint8))
        out, overlay = tmp_path / "pred.txt", tmp_path / "overlay.png"

        code = _run(
            [
                "infer",
                "--checkpoint",
                str(checkpoint),
                "--image",
                str(image),
                "--out",
                str(out),
                "--annotated",
                str(overlay),
                "--score-thresh",
                "0.0",
            ]
        )

        assert code == 0
        assert len(read_predictions(out, 64, 64)) > 0
        with Image.open(overlay) as drawn:
            assert drawn.size == (100, 80)
            assert drawn.mode == "RGB"

    def test_eval_video(self, checkpoint, tmp_path):
        """Test frame shares when every frame has detections."""
        frames = tmp_path / "frames"
        for name in ("f0", "f1", "f2"):
            save_image(frames / f"{name}.png", np.full((64, 64), 40, dtype=np.uint8))
        (frames / "f2.txt").write_text("")
        timeline = tmp_path / "timeline.txt"
        timeline.write_text("f0 1\nf1 0\nf2 0\n")
        out = tmp_path / "video"

        code = _run(
            [
                "eval-video",
                "--checkpoint",
                str(checkpoint),
                "--frames",
                str(frames),
                "--gt-timeline",
                str(timeline),
                "--score-thresh",
                "0.0",
                "--out",
                str(out),
            ]
        )

        assert code == 0
        (row,) = json.loads((out / "report.json").read_text())
        assert row["detection_duration_pct"] == 100.0
        assert row["video_fp_pct"] == pytest.approx(200.0 / 3.0)

    def test_eval_video_unknown_frame(self, checkpoint, tmp_path, capsys):
        """Test frames absent from the timeline are a format error."""
        frames = tmp_path / "frames"
        save_image(frames / "f9.png", np.zeros((64, 64), dtype=np.uint8))
        timeline = tmp_path / "timeline.txt"
        timeline.write_text("f0 1\n")

        code = _run(["eval-video", "--checkpoint", str(checkpoint), "--frames", str(frames), "--gt-timeline", str(timeline)])

        assert code == 1
        assert _envelope(capsys)["code"] == "format_error"


def _pipeline(tmp_path, dataset, extra):
    teacher, logits, student = tmp_path / "teacher", tmp_path / "logits", tmp_path / "student"
    assert _run(["train", "--preset", "l", "--dataset", str(dataset), "--out", str(teacher), "--no-aug"] + extra) == 0
    assert _run(["dump-logits", "--checkpoint", str(teacher), "--dataset", str(dataset), "--out", str(logits)]) == 0
    assert (
        _run(
            ["train", "--preset", "nano", "--dataset", str(dataset), "--out", str(student), "--kd", "--teacher-logits", str(logits)]
            + extra
        )
        == 0
    )
    return teacher, logits, student


class TestPipeline:
    """Test train, dump-logits and distillation end to end."""

    def test_teacher_to_student(self, dataset, tmp_path):
        """Test a tiny teacher, its logit dump and a distilled student."""
        extra = ["--base-channels", "8", "--iters", "2", "--batch-size", "2"]
        teacher, logits, student = _pipeline(tmp_path, dataset, extra)

        assert (teacher / "manifest.json").is_file()
        assert len(list(logits.glob("*.kdl"))) == 14
        with (student / "losses.csv").open() as handle:
            rows = list(csv.DictReader(handle))
        assert len(rows) == 2
        assert float(rows[0]["soft"]) > 0.0
        assert "kd=true" in (student / "run_config.txt").read_text()

    def test_student_with_other_classes(self, dataset, tmp_path, capsys):
        """Test a student whose contract differs from the teacher logits exits with 4."""
        extra = ["--base-channels", "8", "--iters", "1", "--batch-size", "2"]
        _pipeline(tmp_path, dataset, extra)
        code = _run(
            [
                "train",
                "--dataset",
                str(dataset),
                "--out",
                str(tmp_path / "other"),
                "--kd",
                "--teacher-logits",
                str(tmp_path / "logits"),
                "--num-classes",
                "2",
            ]
            + extra
        )
        assert code == 4
        assert _envelope(capsys)["code"] == "spec_mismatch"

    @pytest.mark.slow
    def test_desk_scale_distillation(self, tmp_path):
        """Test the default desk-scale settings on an expanded synthetic dataset."""
        data = tmp_path / "data"
        assert _run(["make-dataset", "--out", str(data), "--num-images", "40"]) == 0
        _, _, student = _pipeline(tmp_path, data, ["--iters", "30"])
        with (student / "losses.csv").open() as handle:
            totals = [float(r["total"]) for r in csv.DictReader(handle)]
        assert np.mean(totals[-5:]) < np.mean(totals[:5])
