"""
core.py - Shared plumbing for ddt-rl.

Constants, configuration loading, the error hierarchy, logging setup and
seeded random streams. No model logic lives here; every other module imports
from this one.
"""

import copy
import json
import logging
import sys
import zlib
from pathlib import Path

import numpy as np


# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

ROOT_DIR = Path(__file__).resolve().parent.parent
DEFAULT_CONFIG_FILE = ROOT_DIR / "default_config.json"
CONFIG_VERSION = 1

SIGMOID_CLAMP = 500.0

RNG_STREAMS = ("env", "init", "sampling", "explore", "data")


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class DdtError(Exception):
    """Base class for every error raised by ddt-rl. Carries a process exit code."""

    exit_code = 1


class ConfigError(DdtError):
    exit_code = 2


class PolicyFormatError(ConfigError):
    """A policy file or policy text could not be read."""


class DivergenceError(DdtError):
    """A gradient or parameter became non-finite; the update was not applied."""

    exit_code = 3


class DegenerateNodeError(DdtError):
    exit_code = 4

    def __init__(self, node_id, message=None):
        self.node_id = node_id
        super().__init__(message or f"node {node_id}: dominant weight is zero, threshold undefined")


class DimensionError(DdtError):
    def __init__(self, what, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected dimension {expected}, got {actual}")


class InvalidInterpretationError(DdtError):
    pass


class UnsupportedShapeError(DdtError):
    pass


class KeyMismatchError(DdtError):
    pass


class NameTableError(DdtError):
    pass


class DatasetError(DdtError):
    pass


class EnvError(DdtError):
    """Environment fault. `step` is the index of the failing step when known."""

    def __init__(self, message, step=None):
        self.step = step
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)


# ---------------------------------------------------------------------------
# Logging
# ---------------------------------------------------------------------------

class _TagFormatter(logging.Formatter):
    """Render records as `[tag] message`, tag being the last logger-name part."""

    def format(self, record):
        record.tag = record.name.rsplit(".", 1)[-1]
        return super().format(record)


def get_logger(tag):
    return logging.getLogger(f"ddt_rl.{tag}")


def setup_logging(verbose=False):
    """Install the stdout handler once. Only entry points call this."""
    root = logging.getLogger("ddt_rl")
    if not root.handlers:
        handler = logging.StreamHandler(sys.stdout)
        handler.setFormatter(_TagFormatter("[%(tag)s] %(message)s"))
        root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    return root


log = get_logger("config")


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

def _deep_merge(base, override):
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _read_json(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e


def load_config(path=None):
    """
    Load the checked-in defaults and deep-merge an optional user file over them.
    Returns a plain nested dict; sections are validated by the typed configs.
    """
    defaults = _read_json(DEFAULT_CONFIG_FILE)
    if defaults.get("version") != CONFIG_VERSION:
        raise ConfigError(f"default config version {defaults.get('version')} != {CONFIG_VERSION}")
    if path is None:
        return defaults
    data = _read_json(path)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    merged = _deep_merge(defaults, data)
    log.debug(f"Loaded from {path}")
    return merged


def save_config(config_data, path):
    """Write config dict to disk."""
    Path(path).write_text(json.dumps(config_data, indent=2, sort_keys=True))


def merge_config(config_data, overrides):
    """Return a copy of `config_data` with `overrides` deep-merged in."""
    return _deep_merge(config_data, overrides)


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------

def make_rng(seed, stream):
    """
    Independent generator for a named stream under one 64-bit seed.
    The spawn key is derived from the stream name, so streams never share state.
    """
    if stream not in RNG_STREAMS:
        raise ConfigError(f"unknown rng stream '{stream}' (known: {', '.join(RNG_STREAMS)})")
    key = zlib.crc32(stream.encode("ascii"))
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(key,))
    return np.random.Generator(np.random.PCG64(ss))


def check_finite(name, values):
    """Raise DivergenceError if any entry of `values` is NaN or infinite."""
    if not np.all(np.isfinite(values)):
        raise DivergenceError(f"non-finite values in {name}")
