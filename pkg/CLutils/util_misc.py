#!/usr/bin/env python
# =============================================================================#
#                                                                             #
# NAME:     util_misc.py                                                      #
#                                                                             #
# PURPOSE:  Miscellaneous helpers shared by the continual-learning tools.     #
#                                                                             #
# REQUIRED: Requires numpy.                                                   #
#                                                                             #
# CONTENTS:                                                                   #
#                                                                             #
#  ConfigError          ... invalid or mismatched configuration               #
#  NumericalError       ... non-finite values during training or inference    #
#  PretrainFloorError   ... base LM did not reach its NL accuracy floor       #
#  canonical_json       ... deterministic JSON text for hashing               #
#  sha256_hex           ... hex digest of a string or bytes object            #
#  to_native            ... convert numpy objects into JSON-friendly types    #
#  write_json           ... write a dictionary to a JSON file                 #
#  read_json            ... read a JSON file                                  #
#  seeded_rng           ... numpy Generator from a tuple of integer keys      #
#  round_half_up        ... round x.5 away from zero                          #
#  prepare_dir          ... create an output directory, honouring --force     #
#  slugify              ... turn a variant label into a directory name        #
#                                                                             #
# =============================================================================#
#                                                                             #
# The MIT License (MIT)                                                       #
#                                                                             #
# Copyright (c) 2026 The MLLM-CLtools developers                              #
#                                                                             #
# =============================================================================#

import hashlib
import json
import math
import re
import shutil
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    """Raised when a configuration is invalid or does not match an artifact."""


class NumericalError(ArithmeticError):
    """Raised when a loss, gradient or activation becomes non-finite."""


class PretrainFloorError(NumericalError):
    """Raised when the base LM cannot reach its NL accuracy floor."""


# -----------------------------------------------------------------------------#
def canonical_json(obj):
    """Return the canonical JSON text of obj (sorted keys, fixed separators)."""
    return json.dumps(to_native(obj), sort_keys=True, separators=(",", ":"))


# -----------------------------------------------------------------------------#
def sha256_hex(data):
    """Return the SHA-256 hex digest of a string or bytes object."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


# -----------------------------------------------------------------------------#
def to_native(obj):
    """Recursively convert numpy scalars/arrays and tuples into plain Python
    objects so they can be written with the json module."""
    if isinstance(obj, dict):
        return {str(k): to_native(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_native(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_native(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


# -----------------------------------------------------------------------------#
def write_json(path, obj):
    """Write obj to path as indented JSON with sorted keys."""
    path = Path(path)
    with open(path, "w") as f:
        json.dump(to_native(obj), f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_json(path):
    """Read a JSON file, raising FileNotFoundError with the path if absent."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    with open(path) as f:
        return json.load(f)


# -----------------------------------------------------------------------------#
def seeded_rng(*keys):
    """Return a numpy Generator seeded from a sequence of non-negative ints.

    Streams for different purposes are separated by extra keys, e.g.
    seeded_rng(seed, task_id, split_code).
    """
    return np.random.default_rng([int(k) for k in keys])


def round_half_up(x):
    """Round to the nearest integer, halves away from zero."""
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


# -----------------------------------------------------------------------------#
def prepare_dir(path, force=False):
    """Create an empty output directory.

    An existing non-empty directory raises FileExistsError unless force is
    set, in which case it is removed first.
    """
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        if not force:
            raise FileExistsError(f"Output exists (use --force to overwrite): {path}")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def slugify(label):
    """Lower-case label with runs of non-alphanumerics replaced by '_'."""
    slug = re.sub(r"[^A-Za-z0-9]+", "_", label).strip("_").lower()
    return slug or "variant"
