#! /usr/bin/env python
"""Library for continual-learning experiments on a toy multimodal LM"""
from importlib.metadata import PackageNotFoundError, version

__all__ = [
    "util_config",
    "util_continual",
    "util_data",
    "util_eval",
    "util_misc",
    "util_mitigation",
    "util_model",
    "util_plot",
    "util_testing",
    "util_train",
]

try:
    __version__ = version("MLLM-CLtools")
except PackageNotFoundError:
    __version__ = "0.0.0"
