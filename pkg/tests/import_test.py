"""Tests for importing modules."""

import unittest


class test_imports(unittest.TestCase):
    def test_imports(self):
        """Tests that package imports are working correctly."""
        modules = [
            "CLtools.cli",
            "CLtools.common",
            "CLtools.do_gen_data",
            "CLtools.do_plot",
            "CLtools.do_pretrain",
            "CLtools.do_run",
            "CLtools.do_sweep",
            "CLutils.util_config",
            "CLutils.util_continual",
            "CLutils.util_data",
            "CLutils.util_eval",
            "CLutils.util_misc",
            "CLutils.util_mitigation",
            "CLutils.util_model",
            "CLutils.util_plot",
            "CLutils.util_testing",
            "CLutils.util_train",
        ]
        for module in modules:
            __import__(module)


if __name__ == "__main__":
    unittest.main()
