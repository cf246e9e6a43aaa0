"""
ddt.py - Differentiable decision trees and rule lists.

Soft trees are immutable: evaluation and backward are pure functions, and
parameter updates build a new tree with `with_params`. Decision nodes are
numbered in preorder (`n0`, `n1`, ...) and leaves left to right (`l0`, ...);
gradient buffers and serialized documents use the same keys.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from modules.core import (
    SIGMOID_CLAMP,
    DimensionError,
    InvalidInterpretationError,
    KeyMismatchError,
    UnsupportedShapeError,
)


POLICY = "policy"
Q = "q"
INTERPRETATIONS = (POLICY, Q)

BALANCED = "balanced"
RULE_LIST = "rule_list"

TREE_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LeafNode:
    w: np.ndarray
    interpretation: str = POLICY

    def __post_init__(self):
        w = np.array(self.w, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise DimensionError("leaf parameters", "a non-empty vector", w.shape)
        if not np.all(np.isfinite(w)):
            raise ValueError("leaf parameters must be finite")
        if self.interpretation not in INTERPRETATIONS:
            raise InvalidInterpretationError(f"unknown interpretation '{self.interpretation}'")
        object.__setattr__(self, "w", w)


@dataclass(frozen=True, eq=False)
class DecisionNode:
    """Soft split. `left` is the TRUE branch, taken with weight mu(x)."""

    alpha: float
    beta: np.ndarray
    phi: float
    left: object
    right: object

    def __post_init__(self):
        beta = np.array(self.beta, dtype=float)
        if beta.ndim != 1:
            raise DimensionError("beta", "a vector", beta.shape)
        if not math.isfinite(self.alpha):
            raise ValueError("alpha must be finite")
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "phi", float(self.phi))
        object.__setattr__(self, "beta", beta)


@dataclass(frozen=True, eq=False)
class SoftTree:
    root: object
    d: int
    n_actions: int
    topology: str = BALANCED
    size: int = 1
    decision_nodes: tuple = field(init=False, repr=False)
    leaves: tuple = field(init=False, repr=False)
    _keys: dict = field(init=False, repr=False)

    def __post_init__(self):
        nodes, leaves, keys = [], [], {}

        def walk(node, depth):
            if id(node) in keys:
                raise UnsupportedShapeError("tree nodes must have exactly one parent")
            if isinstance(node, LeafNode):
                keys[id(node)] = f"l{len(leaves)}"
                leaves.append(node)
                return [depth]
            if not isinstance(node, DecisionNode):
                raise UnsupportedShapeError(f"unexpected node type {type(node).__name__}")
            keys[id(node)] = f"n{len(nodes)}"
            nodes.append(node)
            return walk(node.left, depth + 1) + walk(node.right, depth + 1)

        depths = walk(self.root, 0)
        object.__setattr__(self, "decision_nodes", tuple(nodes))
        object.__setattr__(self, "leaves", tuple(leaves))
        object.__setattr__(self, "_keys", keys)
        self._validate(depths)

    def _validate(self, depths):
        for i, node in enumerate(self.decision_nodes):
            if node.beta.size != self.d:
                raise DimensionError(f"n{i}.beta", self.d, node.beta.size)
        kinds = {leaf.interpretation for leaf in self.leaves}
        if len(kinds) != 1:
            raise InvalidInterpretationError("all leaves must share one interpretation")
        for i, leaf in enumerate(self.leaves):
            if leaf.w.size != self.n_actions:
                raise DimensionError(f"l{i}.w", self.n_actions, leaf.w.size)
        if self.topology == BALANCED:
            if len(set(depths)) != 1 or depths[0] != self.size:
                raise UnsupportedShapeError(f"not a balanced tree of depth {self.size}")
        elif self.topology == RULE_LIST:
            if any(not isinstance(n.left, LeafNode) for n in self.decision_nodes):
                raise UnsupportedShapeError("rule list: every TRUE branch must end in a leaf")
            if len(self.decision_nodes) != self.size:
                raise UnsupportedShapeError(f"not a rule list of length {self.size}")
        else:
            raise UnsupportedShapeError(f"unknown topology '{self.topology}'")

    @property
    def interpretation(self):
        return self.leaves[0].interpretation

    def key(self, node):
        return self._keys[id(node)]


class GradientBuffer(dict):
    """Partials keyed like the tree parameters: n{i}.alpha/.beta/.phi and l{i}.w."""

    @classmethod
    def zeros(cls, tree):
        return cls({k: np.zeros_like(v) if isinstance(v, np.ndarray) else 0.0
                    for k, v in get_params(tree).items()})

    def add(self, other, weight=1.0):
        if set(other) != set(self):
            raise KeyMismatchError("gradient buffers have different keys")
        for k, v in other.items():
            self[k] = self[k] + weight * v

    def scaled(self, factor):
        return GradientBuffer({k: factor * v for k, v in self.items()})

    def all_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.values())


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _as_input(x, d):
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != d:
        raise DimensionError("input", d, x.size)
    return x


def _sigmoid(z):
    z = min(max(z, -SIGMOID_CLAMP), SIGMOID_CLAMP)
    return 1.0 / (1.0 + math.exp(-z))


def split_activation(node, x):
    """mu = 1 / (1 + exp(-alpha (beta.x - phi))), exponent clamped to +-500."""
    x = _as_input(x, node.beta.size)
    return _sigmoid(node.alpha * (float(node.beta @ x) - node.phi))


def _softmax(w):
    e = np.exp(w - np.max(w))
    return e / e.sum()


def leaf_distribution(leaf):
    if leaf.interpretation != POLICY:
        raise InvalidInterpretationError("leaf_distribution needs a POLICY leaf")
    return _softmax(leaf.w)


def leaf_output(leaf):
    if leaf.interpretation == POLICY:
        return _softmax(leaf.w)
    return leaf.w.copy()


def _forward(node, x):
    if isinstance(node, LeafNode):
        return leaf_output(node)
    mu = _sigmoid(node.alpha * (float(node.beta @ x) - node.phi))
    return mu * _forward(node.left, x) + (1.0 - mu) * _forward(node.right, x)


def eval_soft(tree, x):
    """Recursive mixture mu*T_left + (1-mu)*T_right of the leaf outputs."""
    return _forward(tree.root, _as_input(x, tree.d))


def eval_rule_list_soft(tree, x):
    """
    Evaluate a rule list along its FALSE spine. Folding from the last rule
    upward performs the same float operations as the recursive form.
    """
    if tree.topology != RULE_LIST:
        raise UnsupportedShapeError("eval_rule_list_soft needs a RULE_LIST tree")
    x = _as_input(x, tree.d)
    spine, node = [], tree.root
    while isinstance(node, DecisionNode):
        mu = _sigmoid(node.alpha * (float(node.beta @ x) - node.phi))
        spine.append((mu, leaf_output(node.left)))
        node = node.right
    acc = leaf_output(node)
    for mu, taken in reversed(spine):
        acc = mu * taken + (1.0 - mu) * acc
    return acc


def action_distribution(tree, x):
    if tree.interpretation != POLICY:
        raise InvalidInterpretationError("action distribution needs a POLICY tree")
    return eval_soft(tree, x)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def grad_single_node(tree, s, a):
    """
    Closed-form partials of f(s, a) for one decision node over two Q leaves
    with a single feature.
    """
    if len(tree.decision_nodes) != 1 or tree.d != 1:
        raise UnsupportedShapeError("grad_single_node needs one decision node and d=1; use backward")
    if tree.interpretation != Q:
        raise InvalidInterpretationError("grad_single_node differentiates Q leaves")
    node = tree.root
    x = _as_input([s], 1)
    mu = _sigmoid(node.alpha * (float(node.beta @ x) - node.phi))
    diff = float(node.left.w[a] - node.right.w[a])
    common = diff * mu * (1.0 - mu)
    onehot = np.zeros(tree.n_actions)
    onehot[a] = 1.0
    return GradientBuffer({
        "n0.alpha": common * (float(node.beta @ x) - node.phi),
        "n0.beta": common * node.alpha * x,
        "n0.phi": -common * node.alpha,
        "l0.w": mu * onehot,
        "l1.w": (1.0 - mu) * onehot,
    })


def backward(tree, x, upstream):
    """d<upstream, eval_soft(tree, x)>/d theta for every parameter theta."""
    x = _as_input(x, tree.d)
    upstream = np.asarray(upstream, dtype=float).reshape(-1)
    if upstream.size != tree.n_actions:
        raise DimensionError("upstream", tree.n_actions, upstream.size)
    grads = GradientBuffer()

    def visit(node, scale):
        key = tree.key(node)
        if isinstance(node, LeafNode):
            s = scale * upstream
            if node.interpretation == POLICY:
                p = _softmax(node.w)
                grads[f"{key}.w"] = p * (s - float(p @ s))
            else:
                grads[f"{key}.w"] = s
            return
        margin = float(node.beta @ x) - node.phi
        mu = _sigmoid(node.alpha * margin)
        diff = float(upstream @ (_forward(node.left, x) - _forward(node.right, x))) * scale
        g = diff * mu * (1.0 - mu)
        grads[f"{key}.alpha"] = g * margin
        grads[f"{key}.beta"] = g * node.alpha * x
        grads[f"{key}.phi"] = -g * node.alpha
        visit(node.left, scale * mu)
        visit(node.right, scale * (1.0 - mu))

    visit(tree.root, 1.0)
    return grads


def log_prob_grad(tree, x, a):
    """Gradient of log pi(a|x) for a POLICY tree; also returns pi(a|x)."""
    probs = action_distribution(tree, x)
    upstream = np.zeros(tree.n_actions)
    upstream[a] = 1.0 / probs[a]
    return backward(tree, x, upstream), float(probs[a])


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def get_params(tree):
    params = {}
    for i, node in enumerate(tree.decision_nodes):
        params[f"n{i}.alpha"] = node.alpha
        params[f"n{i}.beta"] = node.beta.copy()
        params[f"n{i}.phi"] = node.phi
    for i, leaf in enumerate(tree.leaves):
        params[f"l{i}.w"] = leaf.w.copy()
    return params


def param_kind(key):
    """alpha | beta | phi | leaf"""
    suffix = key.split(".", 1)[1]
    return "leaf" if suffix == "w" else suffix


def with_params(tree, params):
    """A new tree with the same structure and the given parameter values."""
    if set(params) != set(get_params(tree)):
        raise KeyMismatchError("parameter keys do not match the tree")

    def rebuild(node):
        key = tree.key(node)
        if isinstance(node, LeafNode):
            return LeafNode(np.array(params[f"{key}.w"], dtype=float), node.interpretation)
        return DecisionNode(
            alpha=float(params[f"{key}.alpha"]),
            beta=np.array(params[f"{key}.beta"], dtype=float),
            phi=float(params[f"{key}.phi"]),
            left=rebuild(node.left),
            right=rebuild(node.right),
        )

    return SoftTree(rebuild(tree.root), tree.d, tree.n_actions, tree.topology, tree.size)


def canonical_signs(tree):
    """
    Same soft function, every balanced-tree split written with its largest
    |beta| entry positive: beta and phi are negated and the children swapped,
    since sigma(-z) = 1 - sigma(z). Rule lists keep their leaf on the TRUE side
    and are returned unchanged.
    """
    if tree.topology == RULE_LIST:
        return tree

    def rebuild(node):
        if isinstance(node, LeafNode):
            return LeafNode(node.w.copy(), node.interpretation)
        left, right = rebuild(node.left), rebuild(node.right)
        if node.beta[int(np.argmax(np.abs(node.beta)))] >= 0.0:
            return DecisionNode(node.alpha, node.beta.copy(), node.phi, left, right)
        return DecisionNode(node.alpha, -node.beta, -node.phi, right, left)

    return SoftTree(rebuild(tree.root), tree.d, tree.n_actions, tree.topology, tree.size)


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def _init_node(d, rng, left, right, alpha):
    return DecisionNode(alpha, rng.uniform(-1.0, 1.0, d), float(rng.uniform(-1.0, 1.0)), left, right)


def _init_leaf(n_actions, rng, interpretation):
    return LeafNode(rng.uniform(-0.1, 0.1, n_actions), interpretation)


def build_balanced(depth, d, n_actions, rng, interpretation=POLICY, alpha=1.0):
    """Perfectly balanced tree with 2**depth leaves, randomly initialized."""
    if depth < 1:
        raise UnsupportedShapeError("balanced tree depth must be >= 1")

    def grow(level):
        if level == depth:
            return _init_leaf(n_actions, rng, interpretation)
        left = grow(level + 1)
        right = grow(level + 1)
        return _init_node(d, rng, left, right, alpha)

    return SoftTree(grow(0), d, n_actions, BALANCED, depth)


def build_rule_list(length, d, n_actions, rng, interpretation=POLICY, alpha=1.0):
    """Rule list with `length` decision nodes and `length + 1` leaves."""
    if length < 1:
        raise UnsupportedShapeError("rule list length must be >= 1")
    leaves = [_init_leaf(n_actions, rng, interpretation) for _ in range(length + 1)]
    node = leaves[-1]
    for i in reversed(range(length)):
        node = _init_node(d, rng, leaves[i], node, alpha)
    return SoftTree(node, d, n_actions, RULE_LIST, length)


def single_node_tree(alpha, beta, phi, w_true, w_false, interpretation=POLICY):
    """One decision node over two leaves (a balanced tree of depth 1)."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    root = DecisionNode(alpha, beta, phi, LeafNode(w_true, interpretation), LeafNode(w_false, interpretation))
    return SoftTree(root, beta.size, len(w_true), BALANCED, 1)


def parse_arch(arch):
    """
    'tree:L' -> (BALANCED, depth) for L leaves, a power of two.
    'list:R' -> (RULE_LIST, R) for R rules, so R + 1 leaves with the default.
    'mlp:H' -> ('mlp', H hidden layers).
    """
    kind, _, size = arch.partition(":")
    try:
        size = int(size)
    except ValueError:
        raise UnsupportedShapeError(f"bad architecture '{arch}' (expected tree:L, list:R or mlp:H)") from None
    if kind == "tree":
        depth = size.bit_length() - 1
        if size < 2 or 2 ** depth != size:
            raise UnsupportedShapeError(f"tree leaf count must be a power of two >= 2, got {size}")
        return BALANCED, depth
    if kind == "list":
        if size < 1:
            raise UnsupportedShapeError(f"rule list needs >= 1 rule, got {size}")
        return RULE_LIST, size
    if kind == "mlp":
        if not 0 <= size <= 2:
            raise UnsupportedShapeError(f"mlp supports 0-2 hidden layers, got {size}")
        return "mlp", size
    raise UnsupportedShapeError(f"unknown architecture family '{kind}'")


def build_from_arch(arch, d, n_actions, rng, interpretation=POLICY):
    topology, size = parse_arch(arch)
    if topology == BALANCED:
        return build_balanced(size, d, n_actions, rng, interpretation)
    if topology == RULE_LIST:
        return build_rule_list(size, d, n_actions, rng, interpretation)
    raise UnsupportedShapeError(f"'{arch}' is not a tree architecture")


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def tree_to_dict(tree):
    nodes = []
    for i, node in enumerate(tree.decision_nodes):
        nodes.append({
            "id": f"n{i}",
            "alpha": node.alpha,
            "beta": [float(b) for b in node.beta],
            "phi": node.phi,
            "left": tree.key(node.left),
            "right": tree.key(node.right),
        })
    return {
        "kind": "soft_tree",
        "version": TREE_FORMAT_VERSION,
        "topology": tree.topology,
        "size": tree.size,
        "d": tree.d,
        "n_actions": tree.n_actions,
        "interpretation": tree.interpretation,
        "nodes": nodes,
        "leaves": [{"id": f"l{i}", "w": [float(v) for v in leaf.w]} for i, leaf in enumerate(tree.leaves)],
    }


def tree_from_dict(doc):
    if doc.get("version") != TREE_FORMAT_VERSION:
        raise UnsupportedShapeError(f"unsupported tree format version {doc.get('version')}")
    interpretation = doc["interpretation"]
    nodes = {n["id"]: n for n in doc["nodes"]}
    leaves = {leaf["id"]: leaf for leaf in doc["leaves"]}

    def build(ref):
        if ref in leaves:
            return LeafNode(np.array(leaves[ref]["w"], dtype=float), interpretation)
        n = nodes[ref]
        return DecisionNode(n["alpha"], np.array(n["beta"], dtype=float), n["phi"], build(n["left"]), build(n["right"]))

    root_ref = "n0" if nodes else "l0"
    return SoftTree(build(root_ref), int(doc["d"]), int(doc["n_actions"]), doc["topology"], int(doc["size"]))

