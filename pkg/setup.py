#!/usr/bin/env python
# -*- coding: utf-8 -*-

import io
import os

from setuptools import setup

NAME = "MLLM-CLtools"
DESCRIPTION = "Catastrophic-forgetting experiments on a toy multimodal LM"
REQUIRES_PYTHON = ">=3.9.0"
VERSION = "0.1.0"

REQUIRED = [
    "numpy",
    "scipy",
    "matplotlib>=3.4.0",
    "torch>=2.0",
    "tqdm",
]

extras_require = {
    "dev": ["pre-commit", "black", "isort", "pytest"],
}

here = os.path.abspath(os.path.dirname(__file__))

try:
    with io.open(os.path.join(here, "README.md"), encoding="utf-8") as f:
        long_description = "\n" + f.read()
except FileNotFoundError:
    long_description = DESCRIPTION

setup(
    name=NAME,
    version=VERSION,
    description=DESCRIPTION,
    long_description=long_description,
    long_description_content_type="text/markdown",
    python_requires=REQUIRES_PYTHON,
    packages=["CLtools", "CLutils"],
    data_files=[
        (
            "share/mllm-cltools/configs",
            [
                "configs/desk.json",
                "configs/desk_two_task.json",
                "configs/tiny.json",
                "configs/sweep_alpha.json",
                "configs/sweep_lora.json",
            ],
        )
    ],
    entry_points={
        "console_scripts": [
            "cltools=CLtools.cli:main",
            "cltools_gendata=CLtools.do_gen_data:main",
            "cltools_pretrain=CLtools.do_pretrain:main",
            "cltools_run=CLtools.do_run:main",
            "cltools_sweep=CLtools.do_sweep:main",
            "cltools_plot=CLtools.do_plot:main",
        ],
    },
    install_requires=REQUIRED,
    extras_require=extras_require,
    include_package_data=True,
    license="MIT",
    classifiers=[
        "Development Status :: 3 - Alpha",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python",
        "Programming Language :: Python :: 3",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
    test_suite="tests",
)
