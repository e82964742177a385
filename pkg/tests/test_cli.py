"""
Unit tests for the command-line entry point and its exit codes.

Run with: pytest tests/test_cli.py -v
"""

import json
import logging
import sys
from pathlib import Path

import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

import main
from config.settings import RUN_DIR_ENV
from src.ablation import AblationResult
from src.gradcheck import GradCheckResult


@pytest.fixture(autouse=True)
def no_env_run_dir(monkeypatch):
    """Keep a developer's SSL_RUN_DIR out of the tests."""
    monkeypatch.delenv(RUN_DIR_ENV, raising=False)


@pytest.fixture(autouse=True)
def reset_logging():
    """main() binds the root logger to the captured stdout; detach it afterwards."""
    yield
    logging.basicConfig(handlers=[logging.NullHandler()], force=True)


@pytest.fixture
def tiny_config_file(tmp_path):
    """Flat YAML config for a 16x16 dataset."""
    path = tmp_path / "tiny.yaml"
    path.write_text(
        f"seed: 2\n"
        f"data_root: {tmp_path / 'data'}\n"
        f"run_dir: {tmp_path / 'run'}\n"
        f"image_size: 16\n"
        f"n_labeled: 2\nn_unlabeled: 2\nn_val: 2\nn_test: 2\n"
    )
    return path


def _result(name: str, fraction_ok: float) -> GradCheckResult:
    return GradCheckResult(name=name, n_coords=10, max_error=1e-6, robust_error=1e-6, fraction_ok=fraction_ok)


class TestUsage:
    """Tests for usage errors (exit code 1)."""

    def test_no_command(self):
        """Test that a bare invocation is a usage error."""
        assert main.main([]) == main.EXIT_USAGE

    def test_missing_required_option(self):
        """Test that score without --pred/--gt is a usage error."""
        assert main.main(["score"]) == main.EXIT_USAGE

    def test_bad_stages(self):
        """Test that --stages outside 1-3 is a usage error."""
        assert main.main(["train", "--stages", "14"]) == main.EXIT_USAGE

    def test_parse_stages(self):
        """Test stage list parsing."""
        assert main.parse_stages("3,1") == [1, 3]
        assert main.parse_stages("123") == [1, 2, 3]
        with pytest.raises(main.UsageError):
            main.parse_stages("x")


class TestDataErrors:
    """Tests for data and configuration errors (exit code 2)."""

    def test_missing_prediction_dir(self, tmp_path):
        """Test that scoring a missing directory exits with 2."""
        code = main.main(["score", "--pred", str(tmp_path / "none"), "--gt", str(tmp_path / "gt")])
        assert code == main.EXIT_DATA

    def test_oracle_refiner_refused(self, tiny_config_file):
        """Test that training with a test-only refiner exits with 2."""
        code = main.main(["train", "--config", str(tiny_config_file), "--set", "refiner=oracle"])
        assert code == main.EXIT_DATA

    def test_malformed_override(self, tiny_config_file):
        """Test that --set without '=' exits with 2."""
        assert main.main(["gen-data", "--config", str(tiny_config_file), "--set", "tau"]) == main.EXIT_DATA

    def test_eval_without_checkpoint(self, tiny_config_file):
        """Test that eval before training names the missing checkpoint and exits with 2."""
        assert main.main(["eval", "--config", str(tiny_config_file), "--phase", "1"]) == main.EXIT_DATA

    def test_stage3_without_phase1(self, tiny_config_file, tmp_path):
        """Test that --stages 3 on a fresh run directory exits with 2."""
        assert main.main(["--quiet", "gen-data", "--config", str(tiny_config_file)]) == main.EXIT_OK
        assert main.main(["train", "--config", str(tiny_config_file), "--stages", "3"]) == main.EXIT_DATA


class TestCommands:
    """Tests for successful subcommands."""

    def test_gen_data_then_self_score(self, tiny_config_file, tmp_path, capsys):
        """Test that ground truth scored against itself is perfect."""
        assert main.main(["--quiet", "gen-data", "--config", str(tiny_config_file)]) == main.EXIT_OK
        data = tmp_path / "data"
        assert (data / "manifest.json").exists()

        out = tmp_path / "score"
        code = main.main(["score", "--pred", str(data), "--gt", str(data), "--split", "test", "--out", str(out)])
        assert code == main.EXIT_OK
        report = json.loads((out / "score.json").read_text())
        assert report["dice_mean"] == pytest.approx(100.0)
        assert report["overall"] == pytest.approx(100.0)
        assert "overall=100.0000" in capsys.readouterr().out

    def test_gen_data_out_option(self, tiny_config_file, tmp_path):
        """Test that --out overrides data_root."""
        target = tmp_path / "elsewhere"
        assert main.main(["--quiet", "gen-data", "--config", str(tiny_config_file), "--out", str(target)]) == 0
        assert (target / "manifest.json").exists()

    def test_refine_writes_audit(self, tiny_config_file, tmp_path):
        """Test batch refinement of a dataset directory."""
        main.main(["--quiet", "gen-data", "--config", str(tiny_config_file)])
        out = tmp_path / "refined"
        code = main.main(["refine", "--pred", str(tmp_path / "data"), "--out", str(out)])
        assert code == main.EXIT_OK
        assert (out / "manifest.json").exists()
        assert (out / "refine_audit.csv").read_text().startswith("sample_id,class")


class TestCheckGrad:
    """Tests for the check-grad exit codes."""

    def test_pass(self, monkeypatch, capsys):
        """Test that passing checks exit with 0 and print the worst error."""
        monkeypatch.setattr(main, "run_gradcheck", lambda seed, coords: [_result("add", 1.0)])
        assert main.main(["check-grad"]) == main.EXIT_OK
        assert "max relative error" in capsys.readouterr().out

    def test_failure_is_numerical(self, monkeypatch):
        """Test that a failing check exits with 3."""
        monkeypatch.setattr(main, "run_gradcheck", lambda seed, coords: [_result("conv2d", 0.5)])
        assert main.main(["check-grad", "--seeds", "2"]) == main.EXIT_NUMERICAL


class TestAblate:
    """Tests for the ablate subcommand wiring."""

    @pytest.fixture
    def recorded(self, monkeypatch, tmp_path):
        """Replace the ablation driver with one that records its arguments."""
        calls = []

        def fake_run_ablation(config, seeds, out_dir=None):
            calls.append((config, list(seeds), out_dir))
            entry = {"variant": "baseline", "macro_f1": 1.0, "dice_mean": 2.0, "nsd_mean": 3.0, "overall": 4.0}
            return AblationResult(summary=[entry], out_dir=out_dir or tmp_path / "abl")

        monkeypatch.setattr(main, "run_ablation", fake_run_ablation)
        return calls

    def test_consecutive_seeds_from_config(self, tiny_config_file, recorded, capsys):
        """Test that --seeds N runs N seeds starting at the config seed."""
        assert main.main(["--quiet", "ablate", "--config", str(tiny_config_file), "--seeds", "3"]) == main.EXIT_OK
        config, seeds, out_dir = recorded[0]
        assert seeds == [2, 3, 4]
        assert out_dir is None
        assert "baseline: macro_f1=1.0000" in capsys.readouterr().out

    def test_explicit_seed_and_out(self, tiny_config_file, recorded, tmp_path):
        """Test --seed and --out."""
        code = main.main(["ablate", "--config", str(tiny_config_file), "--seed", "10", "--seeds", "2",
                          "--out", str(tmp_path / "table")])
        assert code == main.EXIT_OK
        assert recorded[0][1] == [10, 11]
        assert recorded[0][2] == tmp_path / "table"

    def test_zero_seeds_is_usage_error(self, tiny_config_file, recorded):
        """Test that --seeds 0 exits with 1."""
        assert main.main(["ablate", "--config", str(tiny_config_file), "--seeds", "0"]) == main.EXIT_USAGE
        assert recorded == []

    def test_oracle_refused(self, tiny_config_file, recorded):
        """Test that a test-only embedder exits with 2."""
        code = main.main(["ablate", "--config", str(tiny_config_file), "--set", "embedder=oracle"])
        assert code == main.EXIT_DATA
