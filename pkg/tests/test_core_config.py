"""Tests for sonar_kd.core.config module."""

from unittest.mock import patch

import pytest

from sonar_kd.core.config import (
    COMMANDS,
    DEFAULT_SIGMA,
    SNAPSHOT_NAME,
    command_keys,
    config_items,
    format_snapshot,
    parse_args,
    parse_config_text,
    write_snapshot,
)
from sonar_kd.errors import ConfigError, MissingFileError

TRAIN = ["train", "--dataset", "data", "--out", "ckpt"]


class TestConstants:
    """Test module constants."""

    def test_default_sigma_is_half_range(self):
        """Test the noise default is half the 8-bit range."""
        assert DEFAULT_SIGMA == 127.5

    def test_commands(self):
        """Test every pipeline step has a subcommand."""
        assert COMMANDS == ("make-dataset", "train", "dump-logits", "eval", "eval-video", "infer")


class TestParseArgs:
    """Test command line argument parsing."""

    def test_parse_args_with_defaults(self):
        """Test parsing train with only the required flags."""
        with patch("sys.argv", ["sonar-kd"] + TRAIN):
            args = parse_args()

        assert args.command == "train"
        assert args.preset == "nano"
        assert args.vit == "off"
        assert args.kd is False
        assert args.lambda_bbox == 0.5
        assert args.kd_normalization == "sum"
        assert args.clip_norm is None
        assert args.verbose is False

    def test_parse_args_with_all_options(self):
        """Test parsing a fully specified distillation run."""
        args = parse_args(
            TRAIN
            + [
                "--preset",
                "l",
                "--vit",
                "on",
                "--vit-heads",
                "8",
                "--kd",
                "--teacher-logits",
                "logits",
                "--iters",
                "5",
                "--lambda-cls",
                "0.2",
                "--kd-mode",
                "blend",
                "--blend",
                "0.3",
                "-v",
            ]
        )

        assert args.preset == "l"
        assert args.vit_heads == 8
        assert args.kd is True
        assert args.teacher_logits == "logits"
        assert args.iters == 5
        assert args.lambda_cls == 0.2
        assert args.kd_mode == "blend"
        assert args.blend == 0.3
        assert args.verbose is True

    def test_parse_args_make_dataset(self):
        """Test make-dataset defaults."""
        args = parse_args(["make-dataset", "--out", "d", "--seed", "3"])
        assert args.seed == 3
        assert args.sigma == 127.5
        assert args.image_format == "png"
        assert args.no_expand is False

    def test_parse_args_missing_required(self):
        """Test argparse exits when a required flag is absent."""
        with pytest.raises(SystemExit):
            parse_args(["train", "--dataset", "data"])

    def test_parse_args_invalid_choice(self):
        """Test invalid choices exit through argparse."""
        with pytest.raises(SystemExit):
            parse_args(TRAIN + ["--preset", "xl"])

    def test_kd_requires_teacher_logits(self):
        """Test --kd alone is a configuration error."""
        with pytest.raises(ConfigError):
            parse_args(TRAIN + ["--kd"])

    def test_teacher_logits_require_kd(self):
        """Test --teacher-logits without --kd is a configuration error."""
        with pytest.raises(ConfigError):
            parse_args(TRAIN + ["--teacher-logits", "logits"])

    def test_eval_needs_one_source(self):
        """Test eval takes exactly one of a checkpoint or prediction files."""
        with pytest.raises(ConfigError):
            parse_args(["eval", "--dataset", "d"])
        with pytest.raises(ConfigError):
            parse_args(["eval", "--dataset", "d", "--checkpoint", "c", "--predictions", "p"])
        assert parse_args(["eval", "--dataset", "d", "--predictions", "p"]).split == "test"


class TestConfigFile:
    """Test key=value config files."""

    def test_parse_config_text(self):
        """Test comments, blank lines and dashed keys."""
        values = parse_config_text("# run\n\nlambda-bbox = 0.3  # soft box\nkd=true\n")
        assert values == {"lambda_bbox": "0.3", "kd": "true"}

    def test_parse_config_text_errors(self):
        """Test lines without '=' or with an empty key."""
        with pytest.raises(ConfigError):
            parse_config_text("lr 0.1\n")
        with pytest.raises(ConfigError):
            parse_config_text("=0.1\n")

    def test_file_provides_defaults(self, tmp_path):
        """Test file values apply, satisfy required flags and lose to explicit flags."""
        path = tmp_path / "run.cfg"
        path.write_text("dataset=data\nout=ckpt\nlr=0.05\niters=3\nno_aug=yes\n")
        args = parse_args(["train", "--config", str(path), "--iters", "7"])
        assert args.dataset == "data"
        assert args.lr == 0.05
        assert args.iters == 7
        assert args.no_aug is True

    @pytest.mark.parametrize(
        "text",
        ["colour=red\n", "iters=many\n", "no_aug=maybe\n", "preset=xl\n"],
    )
    def test_file_errors(self, tmp_path, text):
        """Test unknown keys and invalid values raise ConfigError."""
        path = tmp_path / "bad.cfg"
        path.write_text(text)
        with pytest.raises(ConfigError):
            parse_args(TRAIN + ["--config", str(path)])

    def test_missing_file(self, tmp_path):
        """Test a missing config file raises MissingFileError."""
        with pytest.raises(MissingFileError):
            parse_args(TRAIN + ["--config", str(tmp_path / "none.cfg")])


class TestSnapshot:
    """Test run_config.txt snapshots."""

    def test_keys_exclude_meta_options(self):
        """Test help, config and verbose are not part of a snapshot."""
        keys = command_keys("infer")
        assert "config" not in keys and "verbose" not in keys
        assert keys[:3] == ["checkpoint", "image", "out"]

    def test_format(self):
        """Test booleans are spelled out and unset options are skipped."""
        args = parse_args(TRAIN + ["--no-aug"])
        text = format_snapshot(args)
        assert text.startswith("# sonar-kd train\n")
        assert "no_aug=true\n" in text
        assert "kd=false\n" in text
        assert "clip_norm" not in text

    def test_snapshot_replays(self, tmp_path):
        """Test feeding a snapshot back through --config reproduces the configuration."""
        args = parse_args(TRAIN + ["--kd", "--teacher-logits", "logits", "--vit", "on", "--lr", "0.02", "--clip-norm", "4"])
        path = write_snapshot(args, tmp_path)
        assert path.name == SNAPSHOT_NAME
        replayed = parse_args(["train", "--config", str(path)])
        assert config_items(replayed) == config_items(args)
