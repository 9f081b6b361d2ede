"""
Tests for the fbsde CLI: argument parsing, exit codes and the files each command writes.
"""

import copy
import json

import pytest

from fbsde.cli import build_parser
from fbsde.core import (
    CHECKPOINT_FILE, CONVERGENCE_FILE, ERROR_CURVE_FILE, EVENTS_FILE, GENERALIZATION_FILE,
    LOSS_CURVE_FILE, PATH_ERRORS_FILE, RESOLVED_CONFIG_FILE, SAMPLE_PATHS_FILE, TIMINGS_FILE,
    read_csv, read_events,
)


class TestParsing:
    """Argument parsing and dispatch."""

    def test_help(self, run_cli):
        """--help exits 0 and lists the commands."""
        result = run_cli("--help")
        assert result.returncode == 0
        for command in ("train", "evaluate", "generalize", "convergence", "timings"):
            assert command in result.stdout

    def test_no_command_shows_help(self, run_cli):
        """No command prints usage and exits 2."""
        result = run_cli()
        assert result.returncode == 2
        assert "usage:" in result.stdout.lower()

    def test_common_flags(self):
        """--out, --threads and --verbose on every subcommand."""
        args = build_parser().parse_args(["evaluate", "-c", "x.json", "-o", "runs/a", "-j", "3", "-v",
                                          "--checkpoint", "ckpt.json"])
        assert args.command == "evaluate"
        assert args.out == "runs/a"
        assert args.threads == 3
        assert args.verbose
        assert args.checkpoint == "ckpt.json"

    def test_train_requires_config(self, run_cli):
        """argparse rejects train without --config."""
        assert run_cli("train").returncode == 2


class TestConfigErrors:
    """Invalid configs exit 2 before any training."""

    def test_missing_problem_name(self, run_cli, write_config, small_config):
        """problem.name is required."""
        data = copy.deepcopy(small_config)
        del data["problem"]["name"]
        result = run_cli("train", "--config", str(write_config(data)))
        assert result.returncode == 2
        assert "problem.name" in result.stderr

    def test_unknown_key(self, run_cli, write_config, small_config):
        """Unknown keys are named in the error."""
        data = copy.deepcopy(small_config)
        data["training"]["iteratons"] = 5
        result = run_cli("train", "--config", str(write_config(data)))
        assert result.returncode == 2
        assert "training.iteratons" in result.stderr

    def test_missing_config_file(self, run_cli, tmp_path):
        """An unreadable config is a config error."""
        assert run_cli("train", "--config", str(tmp_path / "absent.json")).returncode == 2

    def test_bad_threads(self, run_cli, write_config, small_config):
        """--threads 0 is rejected."""
        assert run_cli("train", "--config", str(write_config(small_config)), "-j", "0").returncode == 2


class TestTrain:
    """fbsde train."""

    def test_writes_run_files(self, run_cli, write_config, small_config, tmp_path):
        """Checkpoint, loss curve, timings, resolved config and events."""
        result = run_cli("train", "--config", str(write_config(small_config)))
        assert result.returncode == 0, result.stderr
        run = tmp_path / "run"
        for name in (CHECKPOINT_FILE, LOSS_CURVE_FILE, TIMINGS_FILE, RESOLVED_CONFIG_FILE, EVENTS_FILE):
            assert (run / name).exists()
        rows = read_csv(run / LOSS_CURVE_FILE)
        assert [int(r["iteration"]) for r in rows] == [0, 1, 2]
        assert all(r["elapsed_seconds"] == "" for r in rows)
        events = read_events(run)
        assert events[0]["type"] == "run_started"
        assert events[-1]["type"] == "run_completed"
        resolved = json.loads((run / RESOLVED_CONFIG_FILE).read_text())
        assert resolved["problem"]["r"] == 0.05

    def test_zero_iterations(self, run_cli, write_config, small_config, tmp_path):
        """iterations = 0 exits 0 with a header-only loss curve."""
        data = copy.deepcopy(small_config)
        data["training"]["iterations"] = 0
        result = run_cli("train", "--config", str(write_config(data)))
        assert result.returncode == 0, result.stderr
        lines = (tmp_path / "run" / LOSS_CURVE_FILE).read_text().splitlines()
        assert lines == ["iteration,level,loss,elapsed_seconds,y0_estimate"]
        assert (tmp_path / "run" / CHECKPOINT_FILE).exists()

    def test_reruns_are_byte_identical(self, run_cli, write_config, small_config, tmp_path):
        """Same config, same seed: identical loss curve and checkpoint."""
        config = write_config(small_config)
        assert run_cli("train", "--config", str(config), "--out", str(tmp_path / "a")).returncode == 0
        assert run_cli("train", "--config", str(config), "--out", str(tmp_path / "b")).returncode == 0
        for name in (LOSS_CURVE_FILE, CHECKPOINT_FILE):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_multilevel(self, run_cli, write_config, small_config, tmp_path):
        """A schedule trains level by level and logs level events."""
        data = copy.deepcopy(small_config)
        data["schedule"] = {"levels": [2, 4], "iterations_per_level": [2, 1]}
        result = run_cli("train", "--config", str(write_config(data)))
        assert result.returncode == 0, result.stderr
        rows = read_csv(tmp_path / "run" / LOSS_CURVE_FILE)
        assert [r["level"] for r in rows] == ["0", "0", "1"]
        levels = [e for e in read_events(tmp_path / "run") if e["type"] == "level_started"]
        assert [e["steps"] for e in levels] == [2, 4]
        timings = read_csv(tmp_path / "run" / TIMINGS_FILE)
        assert timings[0]["mode"] == "multi"

    def test_divergence_exits_4(self, run_cli, write_config, small_config, tmp_path):
        """A loss above the threshold stops the run with exit code 4."""
        data = copy.deepcopy(small_config)
        data["training"]["divergence_threshold"] = 1e-9
        result = run_cli("train", "--config", str(write_config(data)))
        assert result.returncode == 4
        assert "DivergenceError" in result.stderr
        events = read_events(tmp_path / "run")
        assert events[-1]["type"] == "run_failed"
        assert events[-1]["exit_code"] == 4


class TestEvaluate:
    """fbsde evaluate."""

    def test_error_curve_files(self, run_cli, write_config, small_config, tmp_path):
        """Three CSVs with one error-curve row per time step."""
        config = str(write_config(small_config))
        assert run_cli("train", "--config", config).returncode == 0
        result = run_cli("evaluate", "--config", config)
        assert result.returncode == 0, result.stderr
        run = tmp_path / "run"
        rows = read_csv(run / ERROR_CURVE_FILE)
        assert len(rows) == 5
        assert float(rows[0]["mean_plus_2std"]) == float(rows[0]["mean_rel_err"])
        assert len(read_csv(run / PATH_ERRORS_FILE)) == 5 * 8
        assert len(read_csv(run / SAMPLE_PATHS_FILE)) == 2 * 5

    def test_missing_checkpoint(self, run_cli, write_config, small_config):
        """No checkpoint: exit 3."""
        result = run_cli("evaluate", "--config", str(write_config(small_config)))
        assert result.returncode == 3

    def test_width_mismatch(self, run_cli, write_config, small_config):
        """A width-8 checkpoint against a width-16 config names both shapes."""
        assert run_cli("train", "--config", str(write_config(small_config))).returncode == 0
        data = copy.deepcopy(small_config)
        data["network"]["width"] = 16
        result = run_cli("evaluate", "--config", str(write_config(data, "wide.json")))
        assert result.returncode == 3
        assert "(8, 3)" in result.stderr
        assert "(16, 3)" in result.stderr

    def test_allen_cahn_has_no_reference(self, run_cli, write_config, small_config):
        """Evaluating without a reference is a failure, not a crash."""
        data = copy.deepcopy(small_config)
        data["problem"] = {"name": "allen_cahn", "d": 2}
        config = str(write_config(data))
        assert run_cli("train", "--config", config).returncode == 0
        result = run_cli("evaluate", "--config", config)
        assert result.returncode == 1
        assert "ContractError" in result.stderr


class TestGeneralize:
    """fbsde generalize."""

    def test_empty_distances(self, run_cli, write_config, small_config):
        """--distances '' is a config error."""
        config = str(write_config(small_config))
        assert run_cli("train", "--config", config).returncode == 0
        assert run_cli("generalize", "--config", config, "--distances", "").returncode == 2

    def test_zero_distance_matches_evaluate(self, run_cli, write_config, small_config, tmp_path):
        """One row; its error equals the error curve at t = 0."""
        config = str(write_config(small_config))
        assert run_cli("train", "--config", config).returncode == 0
        assert run_cli("evaluate", "--config", config).returncode == 0
        result = run_cli("generalize", "--config", config, "--distances", "0")
        assert result.returncode == 0, result.stderr
        rows = read_csv(tmp_path / "run" / GENERALIZATION_FILE)
        assert len(rows) == 1
        curve = read_csv(tmp_path / "run" / ERROR_CURVE_FILE)
        assert float(rows[0]["mean_rel_err_pct"]) / 100.0 == pytest.approx(
            float(curve[0]["mean_rel_err"]), rel=1e-9)

    def test_default_distances(self, run_cli, write_config, small_config, tmp_path):
        """Without --distances the five configured distances are swept."""
        config = str(write_config(small_config))
        assert run_cli("train", "--config", config).returncode == 0
        assert run_cli("generalize", "--config", config).returncode == 0
        rows = read_csv(tmp_path / "run" / GENERALIZATION_FILE)
        assert [float(r["rel_distance_pct"]) for r in rows] == pytest.approx([0.0, 5.0, 10.0, 15.0, 20.0])
        assert all(r["architecture"] == "fc" for r in rows)

    def test_distance_out_of_range(self, run_cli, write_config, small_config):
        """Distances above 1 are rejected."""
        config = str(write_config(small_config))
        assert run_cli("generalize", "--config", config, "--distances", "0,2").returncode == 2


class TestConvergence:
    """fbsde convergence."""

    def test_default_study(self, run_cli, tmp_path):
        """Four rows; strong order one half."""
        result = run_cli("convergence", "--out", str(tmp_path / "gbm"))
        assert result.returncode == 0, result.stderr
        rows = read_csv(tmp_path / "gbm" / CONVERGENCE_FILE)
        assert [int(r["N"]) for r in rows] == [8, 16, 32, 64]
        assert rows[0]["ratio"] == ""
        for row in rows[1:]:
            assert 1.2 <= float(row["ratio"]) <= 1.7

    def test_zero_volatility(self, run_cli, write_config, tmp_path):
        """sigma = 0 gives first-order ratios near 2."""
        config = write_config({"convergence": {"sigma": 0.0, "paths": 16},
                               "output": {"directory": str(tmp_path / "det")}})
        assert run_cli("convergence", "--config", str(config)).returncode == 0
        rows = read_csv(tmp_path / "det" / CONVERGENCE_FILE)
        for row in rows[1:]:
            assert float(row["ratio"]) == pytest.approx(2.0, rel=0.05)

    def test_invalid_steps(self, run_cli, write_config, tmp_path):
        """Steps that do not divide the finest grid are a config error."""
        config = write_config({"convergence": {"steps": [6, 16]},
                               "output": {"directory": str(tmp_path / "bad")}})
        assert run_cli("convergence", "--config", str(config)).returncode == 2


class TestTimings:
    """fbsde timings."""

    def test_merges_runs_in_order(self, run_cli, write_config, small_config, tmp_path):
        """One row per training run, FC first, then NAIS-Net."""
        for architecture in ("fc", "naisnet"):
            data = copy.deepcopy(small_config)
            data["network"]["architecture"] = architecture
            result = run_cli("train", "--config", str(write_config(data)), "--out", str(tmp_path / architecture))
            assert result.returncode == 0, result.stderr
        result = run_cli("timings", str(tmp_path / "fc"), str(tmp_path / "naisnet"),
                         "--out", str(tmp_path / "compare"))
        assert result.returncode == 0, result.stderr
        rows = read_csv(tmp_path / "compare" / TIMINGS_FILE)
        assert [(r["architecture"], r["mode"]) for r in rows] == [("fc", "single"), ("naisnet", "single")]
        assert all(r["iterations"] == "3" for r in rows)
        assert read_events(tmp_path / "compare")[-1]["type"] == "run_completed"

    def test_missing_run_exits_1(self, run_cli, tmp_path):
        """A run directory without timings.csv is an I/O failure."""
        result = run_cli("timings", str(tmp_path / "absent"), "--out", str(tmp_path / "compare"))
        assert result.returncode == 1
