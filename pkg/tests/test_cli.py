"""Tests for the command-line entrypoint."""

import pytest

from h2dilr.main import EXIT_INVALID, EXIT_OK, run


@pytest.fixture
def run_dir(config_file):
    return config_file.parent / "run"


@pytest.fixture
def generated(config_file, run_dir):
    assert run(["gen-data", "--config", str(config_file)]) == EXIT_OK
    return run_dir


@pytest.fixture
def pretrained(config_file, generated):
    assert run(["pretrain", "--config", str(config_file)]) == EXIT_OK
    return generated


class TestArguments:
    """Tests for argument and config validation."""

    def test_missing_config(self, capsys):
        """A command without --config is a usage error."""
        assert run(["pretrain"]) == EXIT_INVALID
        assert "--config is required" in capsys.readouterr().err

    def test_unknown_command(self):
        """argparse rejections map to exit 1."""
        assert run(["train-everything"]) == EXIT_INVALID

    def test_help(self):
        """--help exits cleanly."""
        assert run(["--help"]) == EXIT_OK

    def test_config_file_not_found(self, tmp_path):
        """A missing file is a validation error."""
        assert run(["gen-data", "--config", str(tmp_path / "absent.cfg")]) == EXIT_INVALID

    def test_conflicting_overrides(self, config_file, capsys):
        """Two values for one key are rejected before anything runs."""
        code = run(["gen-data", "--config", str(config_file), "--set", "seed=1", "--set", "seed=2"])
        assert code == EXIT_INVALID
        assert "conflicting overrides" in capsys.readouterr().err

    def test_unknown_key(self, config_file):
        """Keys outside the schema are rejected."""
        assert run(["gen-data", "--config", str(config_file), "--set", "h2d.gamma=1"]) == EXIT_INVALID


class TestGenData:
    """Tests for gen-data."""

    def test_writes_subjects_and_echo(self, generated):
        """One directory per subject plus the effective config."""
        assert sorted(p.name for p in (generated / "data").iterdir()) == ["subject_0", "subject_1"]
        echo = (generated / "config.echo").read_text()
        assert "h2d.K_private=3\n" in echo

    def test_regeneration_is_identical(self, config_file, generated):
        """Running gen-data twice gives byte-identical files."""
        before = {p: p.read_bytes() for p in (generated / "data").rglob("*") if p.is_file()}
        assert run(["gen-data", "--config", str(config_file)]) == EXIT_OK
        after = {p: p.read_bytes() for p in (generated / "data").rglob("*") if p.is_file()}
        assert before == after


class TestPipelineCommands:
    """Tests for the training and evaluation commands."""

    def test_pretrain_without_data(self, config_file):
        """Stage 1 with no generated data is a validation error."""
        assert run(["pretrain", "--config", str(config_file)]) == EXIT_INVALID

    def test_pretrain_writes_checkpoint(self, pretrained):
        """Stage 1 leaves a checkpoint and its metrics."""
        assert (pretrained / "checkpoint_h2d" / "manifest").is_file()
        assert (pretrained / "metrics_pretrain.csv").is_file()

    def test_train_decoder(self, config_file, pretrained, capsys):
        """Stage 2 reports the test accuracy."""
        assert run(["train-decoder", "--config", str(config_file)]) == EXIT_OK
        assert "test top-1 =" in capsys.readouterr().out
        assert list(pretrained.glob("metrics_decoder_*.csv"))

    def test_train_decoder_missing_checkpoint(self, config_file, generated, tmp_path):
        """A checkpoint path with nothing in it fails validation."""
        code = run(["train-decoder", "--config", str(config_file), "--checkpoint", str(tmp_path / "nothing")])
        assert code == EXIT_INVALID

    def test_probe(self, config_file, pretrained):
        """Probe writes reconstruction and entropy lines plus the assignment table."""
        assert run(["probe", "--config", str(config_file)]) == EXIT_OK
        lines = (pretrained / "probe.txt").read_text().splitlines()
        assert lines[0].startswith("reconstruction_mse=")
        assert any(line.startswith("tone_entropy.codebook.shared=") for line in lines)
        assignments = (pretrained / "assignments.csv").read_text().splitlines()
        assert len(assignments) == 1 + 6 + 2 * 3

    def test_export_codes(self, config_file, pretrained, tmp_path):
        """Embeddings land in the requested directory."""
        dest = tmp_path / "emb"
        assert run(["export-codes", "--config", str(config_file), "--dest", str(dest)]) == EXIT_OK
        assert (dest / "codes.csv").is_file() and (dest / "samples.csv").is_file()

    def test_report(self, config_file, pretrained):
        """The disentanglement grid is written as text and CSV."""
        assert run(["report", "--config", str(config_file)]) == EXIT_OK
        text = (pretrained / "report.txt").read_text()
        assert text.startswith("nu")
        assert "homo_only" in text and "hetero_only" in text and "full" in text
        assert (pretrained / "report.csv").is_file()

    def test_sweep(self, config_file, generated):
        """A one-key sweep writes one CSV row per value."""
        code = run(["sweep", "--config", str(config_file), "--key", "h2d.nu", "--values", "0.25,0.75"])
        assert code == EXIT_OK
        rows = (generated / "sweep_h2d.nu.csv").read_text().splitlines()
        assert rows[0].startswith("h2d.nu,")
        assert [row.split(",")[0] for row in rows[1:]] == ["0.25", "0.75"]
