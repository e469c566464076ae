"""Tests for the mtfatt command line."""

import argparse
import os
from unittest.mock import patch

import numpy as np
import pytest

from mtfatt import __version__, cli
from mtfatt.config import ConfigError, ModelConfig
from mtfatt.dataio import read_wav, save_checkpoint, write_wav
from mtfatt.model import build


@pytest.fixture
def dirs(tmp_path):
    return os.path.join(tmp_path, "checkpoints"), os.path.join(tmp_path, "output")


@pytest.fixture
def vocals_checkpoint(dirs):
    """An untrained tiny vocals model saved where the tiny configuration looks for it."""
    path = os.path.join(dirs[0], "vocals.mtfa")
    save_checkpoint(build(ModelConfig.tiny(), "vocals"), path)
    return path


@pytest.fixture
def mixture_file(tmp_path, rng):
    path = os.path.join(tmp_path, "mix.wav")
    write_wav(path, rng.standard_normal((300, 2)) * 0.1, 8000)
    return path


class TestArguments:
    """Test target and checkpoint argument parsing."""

    @pytest.mark.parametrize(
        "value,expected",
        [
            (None, (None, False)),
            ("vocals", (["vocals"], False)),
            ("synthetic-bass", (["bass"], True)),
            ("synthetic", (None, True)),
        ],
    )
    def test_parse_target(self, value, expected):
        """Test the accepted --stem forms."""
        assert cli.parse_target(value) == expected

    @pytest.mark.parametrize("value", ["piano", "synthetic-piano", "synth-vocals"])
    def test_parse_target_unknown(self, value):
        """Test that unknown stems are configuration errors."""
        with pytest.raises(ConfigError):
            cli.parse_target(value)

    def test_checkpoint_arg(self):
        """Test STEM=PATH parsing."""
        assert cli.checkpoint_arg("drums=/tmp/d.mtfa") == ("drums", "/tmp/d.mtfa")

    @pytest.mark.parametrize("value", ["d.mtfa", "piano=d.mtfa", "drums="])
    def test_checkpoint_arg_invalid(self, value):
        """Test malformed checkpoint arguments."""
        with pytest.raises(argparse.ArgumentTypeError):
            cli.checkpoint_arg(value)

    def test_argparse_errors_exit_2(self):
        """Test that usage errors exit with status 2."""
        with pytest.raises(SystemExit) as excinfo:
            cli.main(["train", "--variant", "Bogus"])
        assert excinfo.value.code == 2
        with pytest.raises(SystemExit) as excinfo:
            cli.main(["separate", "--input", "x.wav", "--checkpoint", "nonsense"])
        assert excinfo.value.code == 2

    def test_version(self, capsys):
        """Test the --version flag."""
        with pytest.raises(SystemExit) as excinfo:
            cli.main(["--version"])
        assert excinfo.value.code == 0
        assert __version__ in capsys.readouterr().out

    def test_overrides(self, tiny_config_file):
        """Test that command-line flags take precedence over the file."""
        args = cli.build_parser().parse_args(["train", "--variant", "TAtt", "--epochs", "3", "--seed", "5", "--threads", "2", "--out", "elsewhere"])
        config = cli.apply_overrides(cli.load_config(tiny_config_file), args)
        assert config.model.variant == "TAtt"
        assert config.training.epochs == 3
        assert config.model.seed == config.training.seed == 5
        assert config.threads == 2
        assert config.paths.output_dir == "elsewhere"


class TestTrain:
    """Test the train command."""

    def test_train_synthetic_stem(self, tiny_config_file, dirs):
        """Test that training writes a checkpoint, an epoch report and the effective configuration."""
        checkpoints, output = dirs
        assert cli.main(["train", "--config", tiny_config_file, "--stem", "synthetic-vocals"]) == 0
        assert os.path.exists(os.path.join(checkpoints, "vocals.mtfa"))
        assert not os.path.exists(os.path.join(checkpoints, "bass.mtfa"))
        assert os.path.exists(os.path.join(output, "effective_config.yaml"))
        with open(os.path.join(output, "train_vocals.txt")) as f:
            lines = f.read().splitlines()
        assert lines[0] == "stem=vocals variant=MTFAtt epochs=1"
        assert any(line.startswith("epoch=1 ") for line in lines)

    def test_train_needs_stem(self, tiny_config_file):
        """Test that train without --stem is a usage error."""
        assert cli.main(["train", "--config", tiny_config_file]) == 2

    def test_unknown_stem(self, tiny_config_file):
        """Test that an unknown stem exits with status 2."""
        assert cli.main(["train", "--config", tiny_config_file, "--stem", "piano"]) == 2

    def test_missing_dataset(self, tiny_config_file):
        """Test that a real-data target without a dataset root exits with status 2."""
        assert cli.main(["train", "--config", tiny_config_file, "--stem", "vocals"]) == 2

    def test_missing_config_file(self, tmp_path):
        """Test that an explicit missing configuration exits with status 2."""
        assert cli.main(["train", "--config", os.path.join(tmp_path, "none.yaml"), "--stem", "synthetic"]) == 2

    def test_invalid_override(self, tiny_config_file):
        """Test that an override breaking a model invariant exits with status 2."""
        with patch.object(cli, "load_config", return_value=cli.load_config(tiny_config_file)) as mock_load:
            mock_load.return_value.model.p_schedule = [3]
            assert cli.main(["train", "--stem", "synthetic-vocals"]) == 2

    def test_unexpected_error(self, tiny_config_file):
        """Test that an unexpected exception exits with status 1."""
        with patch.object(cli, "train", side_effect=RuntimeError("boom")):
            assert cli.main(["train", "--config", tiny_config_file, "--stem", "synthetic-vocals"]) == 1


class TestSeparate:
    """Test the separate command."""

    def test_writes_stem(self, tiny_config_file, vocals_checkpoint, mixture_file, dirs):
        """Test that each model writes a WAV of the input's length and rate."""
        assert cli.main(["separate", "--config", tiny_config_file, "--input", mixture_file]) == 0
        audio, rate = read_wav(os.path.join(dirs[1], "vocals.wav"))
        assert audio.shape == (300, 2)
        assert rate == 8000
        assert np.all(np.isfinite(audio))

    def test_explicit_checkpoint(self, tiny_config_file, vocals_checkpoint, mixture_file, tmp_path):
        """Test STEM=PATH checkpoints and the --out directory."""
        out = os.path.join(tmp_path, "explicit")
        assert cli.main(["separate", "--config", tiny_config_file, "--input", mixture_file, "--checkpoint", f"vocals={vocals_checkpoint}", "--out", out]) == 0
        assert os.path.exists(os.path.join(out, "vocals.wav"))

    def test_missing_models(self, tiny_config_file, mixture_file):
        """Test that separation without any checkpoint exits with status 2."""
        assert cli.main(["separate", "--config", tiny_config_file, "--input", mixture_file]) == 2

    def test_missing_requested_stem(self, tiny_config_file, vocals_checkpoint, mixture_file):
        """Test that a requested stem without a checkpoint exits with status 2."""
        assert cli.main(["separate", "--config", tiny_config_file, "--input", mixture_file, "--stem", "drums"]) == 2

    def test_sample_rate_mismatch(self, tiny_config_file, tmp_path, rng):
        """Test that a mixture at another sample rate is rejected, not resampled."""
        path = os.path.join(tmp_path, "mix16k.wav")
        write_wav(path, rng.standard_normal((300, 2)) * 0.1, 16000)
        assert cli.main(["separate", "--config", tiny_config_file, "--input", path, "--checkpoint", "vocals=unused.mtfa"]) == 2

    def test_architecture_mismatch(self, tiny_config_file, vocals_checkpoint, mixture_file):
        """Test that a checkpoint of another variant fails at load time."""
        assert cli.main(["separate", "--config", tiny_config_file, "--input", mixture_file, "--variant", "noAtt"]) == 1


class TestEvaluate:
    """Test the evaluate command."""

    def test_synthetic_test_split(self, tiny_config_file, vocals_checkpoint, dirs, capsys):
        """Test the SDR table and records on the synthetic test split."""
        assert cli.main(["evaluate", "--config", tiny_config_file, "--stem", "synthetic-vocals"]) == 0
        assert "plain SDR (dB), variant MTFAtt" in capsys.readouterr().out
        with open(os.path.join(dirs[1], "sdr_MTFAtt_test.records")) as f:
            records = f.read().splitlines()
        assert records[0].startswith("metric=plain_SDR stem=vocals song=synth-test-000 sdr=")
        assert os.path.exists(os.path.join(dirs[1], "sdr_MTFAtt_test.txt"))

    def test_repeatable(self, tiny_config_file, vocals_checkpoint, tmp_path):
        """Test that two runs write byte-identical reports."""
        reports = []
        for run in ("first", "second"):
            out = os.path.join(tmp_path, run)
            assert cli.main(["evaluate", "--config", tiny_config_file, "--stem", "synthetic-vocals", "--out", out]) == 0
            with open(os.path.join(out, "sdr_MTFAtt_test.records"), "rb") as f:
                reports.append(f.read())
        assert reports[0] == reports[1]

    def test_val_split(self, tiny_config_file, vocals_checkpoint, dirs):
        """Test the --split option."""
        assert cli.main(["evaluate", "--config", tiny_config_file, "--stem", "synthetic", "--split", "val"]) == 0
        assert os.path.exists(os.path.join(dirs[1], "sdr_MTFAtt_val.txt"))

    def test_missing_models(self, tiny_config_file):
        """Test that evaluation without checkpoints exits with status 2."""
        assert cli.main(["evaluate", "--config", tiny_config_file, "--stem", "synthetic-vocals"]) == 2


class TestSelftestCommand:
    """Test the selftest command."""

    def test_group(self, capsys):
        """Test a single passing group."""
        assert cli.main(["selftest", "--group", "stft-roundtrip"]) == 0
        assert capsys.readouterr().out.startswith("[PASS] stft-roundtrip:")

    def test_injected_fault(self, capsys):
        """Test that a corrupted softmax scale fails the attention group with status 1."""
        assert cli.main(["selftest", "--group", "attention-oracles", "--inject-fault", "softmax-scale"]) == 1
        assert "[FAIL] attention-oracles" in capsys.readouterr().out

    def test_unknown_group(self):
        """Test that argparse rejects an unknown group."""
        with pytest.raises(SystemExit) as excinfo:
            cli.main(["selftest", "--group", "everything"])
        assert excinfo.value.code == 2
