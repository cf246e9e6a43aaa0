"""
baselines.py - Comparison models: a small MLP policy, the batch-fit
State-Action DT (greedy Gini CART on logged pairs) and a uniform random policy.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from modules.core import DatasetError, DimensionError, UnsupportedShapeError, get_logger
from modules.crisp import CrispLeaf, CrispNode, CrispTree, eval_crisp
from modules.ddt import GradientBuffer


log = get_logger("baselines")

MLP_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# MLP policy
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MlpPolicy:
    """ReLU hidden layers (width = input dimension) under a softmax head."""

    weights: tuple
    biases: tuple

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise UnsupportedShapeError("mlp needs one bias per weight matrix")
        if len(self.weights) > 3:
            raise UnsupportedShapeError("mlp supports at most 2 hidden layers")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[0] != b.shape[0]:
                raise DimensionError(f"L{i}.b", w.shape[0], b.shape[0])
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise DimensionError(f"L{i}.W inputs", self.weights[i - 1].shape[0], w.shape[1])

    @property
    def d(self):
        return self.weights[0].shape[1]

    @property
    def n_actions(self):
        return self.weights[-1].shape[0]

    @property
    def hidden_layers(self):
        return len(self.weights) - 1


def build_mlp(hidden_layers, d, n_actions, rng):
    sizes = [d] * (hidden_layers + 1) + [n_actions]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpPolicy(tuple(weights), tuple(biases))


def _mlp_activations(policy, x):
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != policy.d:
        raise DimensionError("input", policy.d, x.size)
    inputs, pre = [], []
    h = x
    for i, (w, b) in enumerate(zip(policy.weights, policy.biases)):
        inputs.append(h)
        z = w @ h + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < len(policy.weights) - 1 else z
    e = np.exp(h - np.max(h))
    return inputs, pre, e / e.sum()


def mlp_forward(policy, x):
    return _mlp_activations(policy, x)[2]


def mlp_backward(policy, x, upstream):
    """d<upstream, mlp_forward(policy, x)>/d theta."""
    inputs, pre, p = _mlp_activations(policy, x)
    upstream = np.asarray(upstream, dtype=float).reshape(-1)
    if upstream.size != policy.n_actions:
        raise DimensionError("upstream", policy.n_actions, upstream.size)
    grads = GradientBuffer()
    dz = p * (upstream - float(p @ upstream))
    for i in reversed(range(len(policy.weights))):
        grads[f"L{i}.W"] = np.outer(dz, inputs[i])
        grads[f"L{i}.b"] = dz.copy()
        if i:
            dz = (policy.weights[i].T @ dz) * (pre[i - 1] > 0.0)
    return grads


def mlp_params(policy):
    params = {}
    for i, (w, b) in enumerate(zip(policy.weights, policy.biases)):
        params[f"L{i}.W"] = w.copy()
        params[f"L{i}.b"] = b.copy()
    return params


def mlp_with_params(policy, params):
    n = len(policy.weights)
    return MlpPolicy(
        tuple(np.array(params[f"L{i}.W"], dtype=float) for i in range(n)),
        tuple(np.array(params[f"L{i}.b"], dtype=float) for i in range(n)),
    )


def mlp_to_dict(policy):
    return {
        "kind": "mlp",
        "version": MLP_FORMAT_VERSION,
        "layers": [{"W": w.tolist(), "b": b.tolist()} for w, b in zip(policy.weights, policy.biases)],
    }


def mlp_from_dict(doc):
    if doc.get("version") != MLP_FORMAT_VERSION:
        raise UnsupportedShapeError(f"unsupported mlp format version {doc.get('version')}")
    layers = doc["layers"]
    return MlpPolicy(
        tuple(np.array(layer["W"], dtype=float) for layer in layers),
        tuple(np.array(layer["b"], dtype=float) for layer in layers),
    )


# ---------------------------------------------------------------------------
# Random policy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RandomPolicy:
    n_actions: int

    def distribution(self):
        return np.full(self.n_actions, 1.0 / self.n_actions)


# ---------------------------------------------------------------------------
# State-Action DT
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CartDataset:
    states: np.ndarray
    actions: np.ndarray
    n_actions: int

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        actions = np.asarray(self.actions, dtype=int).reshape(-1)
        if states.ndim != 2:
            states = states.reshape(len(actions), -1)
        if states.shape[0] != actions.shape[0]:
            raise DimensionError("dataset rows", states.shape[0], actions.shape[0])
        if actions.size and (actions.min() < 0 or actions.max() >= self.n_actions):
            raise DatasetError(f"action labels must lie in [0, {self.n_actions})")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)

    def __len__(self):
        return len(self.actions)

    @property
    def d(self):
        return self.states.shape[1]

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow([f"f{j}" for j in range(self.d)] + ["action"])
            for row, a in zip(self.states, self.actions):
                writer.writerow([repr(float(v)) for v in row] + [int(a)])

    @classmethod
    def from_csv(cls, path, n_actions):
        with open(Path(path), encoding="utf-8", newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if not header or header[-1] != "action":
                raise DatasetError(f"{path}: expected header f0,...,action")
            rows = [r for r in reader if r]
        states = np.array([[float(v) for v in r[:-1]] for r in rows]).reshape(len(rows), len(header) - 1)
        return cls(states, np.array([int(r[-1]) for r in rows], dtype=int), n_actions)


def _gini(counts, totals):
    totals = np.maximum(totals, 1)
    frac = counts / totals[:, None]
    return 1.0 - np.sum(frac * frac, axis=1)


def _best_split(states, labels, n_actions):
    """Lowest weighted Gini split as (feature, threshold, impurity); ties keep the lowest feature/threshold."""
    n = len(labels)
    best = (None, None, np.inf)
    onehot = np.eye(n_actions)[labels]
    total = onehot.sum(axis=0)
    for j in range(states.shape[1]):
        order = np.argsort(states[:, j], kind="stable")
        xs = states[order, j]
        below = np.cumsum(onehot[order], axis=0)[:-1]
        valid = xs[:-1] < xs[1:]
        if not valid.any():
            continue
        n_below = np.arange(1, n)
        above = total - below
        impurity = (n_below * _gini(below, n_below) + (n - n_below) * _gini(above, n - n_below)) / n
        impurity = np.where(valid, impurity, np.inf)
        i = int(np.argmin(impurity))
        if impurity[i] < best[2]:
            best = (j, 0.5 * (xs[i] + xs[i + 1]), float(impurity[i]))
    return best


def cart_fit(data, max_depth=6):
    """Greedy binary CART: Gini splits at midpoints, TRUE branch is x_j > t, majority leaves."""
    if len(data) == 0:
        raise DatasetError("cannot fit a tree on an empty dataset")

    def grow(idx, depth):
        labels = data.actions[idx]
        counts = np.bincount(labels, minlength=data.n_actions)
        majority = CrispLeaf(int(np.argmax(counts)))
        if depth >= max_depth or counts.max() == len(labels):
            return majority
        parent = 1.0 - float(np.sum((counts / len(labels)) ** 2))
        j, t, impurity = _best_split(data.states[idx], labels, data.n_actions)
        if j is None or parent - impurity <= 1e-12:
            return majority
        mask = data.states[idx, j] > t
        return CrispNode(j, float(t), grow(idx[mask], depth + 1), grow(idx[~mask], depth + 1))

    tree = CrispTree(grow(np.arange(len(data)), 0), data.d, data.n_actions)
    log.debug(f"fit {tree.count()[0]} decision nodes on {len(data)} pairs")
    return tree


def accuracy(policy, data):
    if len(data) == 0:
        raise DatasetError("empty dataset")
    hits = sum(eval_crisp(policy, s) == a for s, a in zip(data.states, data.actions))
    return hits / len(data)
