"""Tests for CLI."""

import json
import subprocess
import sys
import tempfile
import unittest
from pathlib import Path

REPO = Path(__file__).parent.parent.absolute()
TINY = REPO / "configs" / "tiny.json"


def cltools(*args):
    return subprocess.run(
        [sys.executable, "-m", "CLtools.cli", *map(str, args)],
        cwd=REPO,
        capture_output=True,
        text=True,
    )


class test_cli(unittest.TestCase):
    def test_cli_help(self):
        """Tests that every subcommand prints its help."""
        for sub in ("gen-data", "pretrain", "run", "sweep", "plot"):
            res = cltools(sub, "--help")
            self.assertEqual(res.returncode, 0, sub)

    def test_cli_scripts_help(self):
        """Tests that the single-purpose tools print their help."""
        for module in ("do_gen_data", "do_pretrain", "do_run", "do_sweep", "do_plot"):
            res = subprocess.run(
                [sys.executable, "-m", f"CLtools.{module}", "--help"], cwd=REPO
            )
            self.assertEqual(res.returncode, 0, module)

    def test_cli_config_errors(self):
        """Tests that configuration errors exit with code 1."""
        with tempfile.TemporaryDirectory() as tmp:
            bad_mode = Path(tmp) / "bad_mode.json"
            bad_mode.write_text(json.dumps({"mode": "three_task"}))
            res = cltools("gen-data", "--config", bad_mode, "--out", tmp)
            self.assertEqual(res.returncode, 1)
            self.assertIn("Err: mode", res.stderr)

            bad_key = Path(tmp) / "bad_key.json"
            bad_key.write_text(json.dumps({"model": {"layers": 2}}))
            res = cltools("gen-data", "--config", bad_key, "--out", tmp)
            self.assertEqual(res.returncode, 1)
            self.assertIn("unknown key", res.stderr)

            res = cltools("gen-data", "--config", TINY, "--seed-override", "dat=1")
            self.assertEqual(res.returncode, 1)

    def test_cli_usage_errors(self):
        """Tests that argument errors exit with code 1."""
        for args in (
            ("run", "--no-such-flag"),
            ("run", "--mode", "three_task"),
            ("no-such-command",),
        ):
            res = cltools(*args)
            self.assertEqual(res.returncode, 1, args)
        res = subprocess.run(
            [sys.executable, "-m", "CLtools.do_plot"],
            cwd=REPO,
            capture_output=True,
        )
        self.assertEqual(res.returncode, 1)

    def test_cli_io_errors(self):
        """Tests that missing files and occupied directories exit with code 3."""
        with tempfile.TemporaryDirectory() as tmp:
            res = cltools("gen-data", "--config", Path(tmp) / "missing.json")
            self.assertEqual(res.returncode, 3)
            res = cltools("plot", Path(tmp) / "no_run", "--out", Path(tmp) / "plots")
            self.assertEqual(res.returncode, 3)

            self.assertEqual(cltools("gen-data", "--config", TINY, "--out", tmp).returncode, 0)
            self.assertEqual(cltools("gen-data", "--config", TINY, "--out", tmp).returncode, 3)
            res = cltools("gen-data", "--config", TINY, "--out", tmp, "--force")
            self.assertEqual(res.returncode, 0)

    def test_cli_tiny_run_and_plot(self):
        """Tests a full tiny run followed by its plots."""
        with tempfile.TemporaryDirectory() as tmp:
            res = cltools("run", "--config", TINY, "--out", tmp, "--method", "soft_targets")
            self.assertEqual(res.returncode, 0, res.stderr)
            (run,) = (Path(tmp) / "runs").iterdir()
            self.assertTrue(run.name.startswith("continual_soft_targets_"))
            for name in ("config.json", "report.csv", "summary.json", "run_manifest.json"):
                self.assertTrue((run / name).exists(), name)
            self.assertTrue((run / "checkpoints" / "task_5.pt").exists())

            plots = Path(tmp) / "plots"
            self.assertEqual(cltools("plot", run, "--out", plots).returncode, 0)
            for name in (
                "nl_delta_per_task.svg",
                "vl_accuracy_per_task.svg",
                "method_comparison.svg",
                "plot_data.csv",
            ):
                self.assertTrue((plots / name).exists(), name)


if __name__ == "__main__":
    unittest.main()
