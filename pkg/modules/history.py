"""
history.py - Run artifacts: learning curves, result tables, manifests and model files.

Functions accept explicit parameters so this module has no globals and
no imports from ddt_rl.py (avoids circular imports). Floats are written with
repr() and JSON with sorted keys, so identical runs produce identical bytes.
"""

import csv
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

from modules.baselines import MlpPolicy, mlp_from_dict, mlp_to_dict
from modules.core import ConfigError, PolicyFormatError, UnsupportedShapeError, get_logger
from modules.crisp import CrispTree, crisp_from_dict, crisp_to_dict
from modules.ddt import SoftTree, tree_from_dict, tree_to_dict


log = get_logger("history")

CURVE_HEADER = ["episode", "cumulative_reward", "moving_avg_50"]
SWEEP_HEADER = ["arch", "size", "mean", "std", "seeds", "failed"]


def _cell(value):
    if isinstance(value, float):
        return repr(value)
    return value


# ---------------------------------------------------------------------------
# CSV / JSON
# ---------------------------------------------------------------------------

def write_rows(path, header, rows):
    """Write `rows` (sequences) under `header` as CSV."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def write_curve(path, rows):
    """Learning curve: one row per episode, 1-based."""
    write_rows(path, CURVE_HEADER, ([r[k] for k in CURVE_HEADER] for r in rows))


def read_curve(path):
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        return [{"episode": int(r["episode"]),
                 "cumulative_reward": float(r["cumulative_reward"]),
                 "moving_avg_50": float(r["moving_avg_50"])} for r in reader]


def write_points(path, xs, ys, header=("phi", "value")):
    write_rows(path, list(header), ((float(x), float(y)) for x, y in zip(xs, ys)))


def write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e


def write_sweep_table(path, cells):
    """
    `cells` maps (arch, size) to the per-seed results; NaN marks a failed run.
    One row per cell with the mean and population std of the successful runs.
    """
    rows = []
    for (arch, size), values in sorted(cells.items(), key=lambda kv: kv[0][1]):
        ok = [v for v in values if not math.isnan(v)]
        if ok:
            mean = sum(ok) / len(ok)
            std = math.sqrt(sum((v - mean) ** 2 for v in ok) / len(ok))
        else:
            mean = std = math.nan
        rows.append((arch, size, float(mean), float(std), len(values), len(values) - len(ok)))
    write_rows(path, SWEEP_HEADER, rows)
    return rows


# ---------------------------------------------------------------------------
# Run manifest
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    """What a command ran with and what it produced. Only `wall_clock` varies between identical runs."""

    command: str
    config: dict
    seed: int
    version: str
    outputs: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    status: str = "ok"
    wall_clock: float = 0.0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        missing = {"command", "config", "seed", "version"} - set(doc)
        if missing:
            raise ConfigError(f"manifest is missing {sorted(missing)}")
        known = {k: v for k, v in doc.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def write_manifest(manifest, path):
    """Atomic write: temp file in the target directory, then rename over."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=".manifest-", suffix=".json", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    log.debug(f"Manifest written to {path}")
    return path


def read_manifest(path):
    return RunManifest.from_dict(read_json(path))


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

def model_to_dict(policy):
    if isinstance(policy, SoftTree):
        return tree_to_dict(policy)
    if isinstance(policy, MlpPolicy):
        return mlp_to_dict(policy)
    if isinstance(policy, CrispTree):
        return crisp_to_dict(policy)
    raise TypeError(f"cannot serialize {type(policy).__name__}")


_LOADERS = {
    "soft_tree": tree_from_dict,
    "mlp": mlp_from_dict,
    "crisp": crisp_from_dict,
}


def model_from_dict(doc):
    if not isinstance(doc, dict):
        raise PolicyFormatError("model document must be an object")
    kind = doc.get("kind")
    if kind not in _LOADERS:
        raise UnsupportedShapeError(f"unknown model kind '{kind}' (known: {', '.join(_LOADERS)})")
    try:
        return _LOADERS[kind](doc)
    except (KeyError, TypeError, ValueError) as e:
        raise PolicyFormatError(f"malformed {kind} model: {e}") from e


def save_model(policy, path):
    write_json(path, model_to_dict(policy))
    return Path(path)


def load_model(path):
    return model_from_dict(read_json(path))
