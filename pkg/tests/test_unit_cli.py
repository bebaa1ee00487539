"""
Unit tests for the command-line interface
"""

import logging

import pytest
import yaml

from modules.cli import build_parser, main, setup_logging


@pytest.fixture(autouse=True)
def restore_logging(monkeypatch):
    monkeypatch.delenv("PROXYFAIR_SEED", raising=False)
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


class TestParser:
    """Test argument parsing."""

    def test_common_flags_on_every_command(self):
        """Test that shared flags are accepted after any subcommand."""
        parser = build_parser()

        for command in ("ingest", "embed", "cluster", "mitigate", "evaluate", "probe", "show-config"):
            args = parser.parse_args([command, "--seed", "3", "--artifact-dir", "out", "--workers", "2"])
            assert (args.seed, args.artifact_dir, args.workers) == (3, "out", 2)

    def test_run_flags(self):
        """Test the mitigator selection flags."""
        args = build_parser().parse_args([
            "mitigate", "--algorithm", "fairmixup", "--variant", "eo", "--group-signal", "proxy",
            "--embedder", "transformer", "--clusterer", "birch", "--mitigation-seed", "4",
        ])

        assert (args.algorithm, args.variant, args.group_signal) == ("fairmixup", "eo", "proxy")
        assert (args.embedder, args.clusterer, args.mitigation_seed) == ("transformer", "birch", 4)

    def test_reproduce_requires_table(self):
        """Test that reproduce takes table1 or table2."""
        with pytest.raises(SystemExit):
            build_parser().parse_args(["reproduce", "table3"])

    def test_bad_assignment(self):
        """Test that --set without '=' is a usage error."""
        with pytest.raises(SystemExit) as excinfo:
            build_parser().parse_args(["show-config", "--set", "mitigation.alpha"])

        assert excinfo.value.code == 2

    def test_invalid_choice(self):
        """Test that an unknown clusterer is rejected by the parser."""
        with pytest.raises(SystemExit):
            build_parser().parse_args(["cluster", "--clusterer", "dbscan"])


class TestMain:
    """Test command dispatch and exit codes."""

    def test_show_config_applies_overrides(self, capsys):
        """Test that --set values are parsed as YAML and printed back."""
        code = main(["show-config", "--set", "mitigation.alpha=0.25", "--set", "mitigation.seeds=[1, 2]", "--seed", "9"])

        document = yaml.safe_load(capsys.readouterr().out)
        assert code == 0
        assert document["mitigation"]["alpha"] == 0.25
        assert document["mitigation"]["seeds"] == [1, 2]
        assert document["seed"] == 9

    def test_config_error_exit_code(self, capsys, tmp_path):
        """Test that a missing config file exits with status 2."""
        code = main(["show-config", "--config", str(tmp_path / "absent.yaml")])

        assert code == 2
        assert "config failed" in capsys.readouterr().err

    def test_missing_upstream_names_stage(self, capsys, tmp_path):
        """Test that running embed before ingest exits 2 naming the ingest stage."""
        code = main(["embed", "--artifact-dir", str(tmp_path)])

        err = capsys.readouterr().err
        assert code == 2
        assert "embed failed" in err
        assert "'ingest'" in err

    def test_ingest_synthetic(self, capsys, tmp_path):
        """Test a successful ingest run."""
        code = main([
            "ingest", "--source", "synthetic", "--artifact-dir", str(tmp_path),
            "--set", "data.synthetic_rows=120", "-q",
        ])

        assert code == 0
        assert (tmp_path / "encoded" / "manifest.json").exists()


class TestSetupLogging:
    """Test logging configuration."""

    @pytest.mark.parametrize("verbosity, level", [(-1, logging.WARNING), (0, logging.INFO), (1, logging.DEBUG)])
    def test_levels(self, verbosity, level):
        """Test that verbosity maps to the root level with a single handler."""
        setup_logging(verbosity)

        root = logging.getLogger()
        assert root.level == level
        assert len(root.handlers) == 1
