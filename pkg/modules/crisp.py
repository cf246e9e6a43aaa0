"""
crisp.py - Discrete single-feature decision trees and rule lists.

A crisp node tests `x[feature] > threshold`; TRUE goes left. Policies are
frozen dataclasses, so two policies compare equal exactly when they have the
same structure, features, thresholds and actions.

TEXT format (2-space indentation, leaves inline after the colon):

    if pole_angle > 0.01:
      if pole_angular_velocity > -0.4: right
      else: left
    elif pole_angular_velocity > 0.3: right
    else: left

A FALSE branch that is itself a test is written as `elif`.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from modules.core import (
    ConfigError,
    DegenerateNodeError,
    DimensionError,
    NameTableError,
    PolicyFormatError,
    UnsupportedShapeError,
    get_logger,
)
from modules.ddt import BALANCED, POLICY, RULE_LIST, DecisionNode, LeafNode, SoftTree


log = get_logger("crisp")

TREE = "tree"
RULE_LIST_KIND = "rule_list"
CRISP_FORMAT_VERSION = 1
INDENT = "  "


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CrispLeaf:
    action: int


@dataclass(frozen=True)
class CrispNode:
    feature: int
    threshold: float
    left: object
    right: object


@dataclass(frozen=True)
class CrispTree:
    root: object
    d: int
    n_actions: int
    topology: str = field(default=TREE, compare=False)

    def __post_init__(self):
        for node in iter_nodes(self.root):
            if isinstance(node, CrispLeaf):
                if not 0 <= node.action < self.n_actions:
                    raise DimensionError("leaf action", f"index < {self.n_actions}", node.action)
            elif not 0 <= node.feature < self.d:
                raise DimensionError("node feature", f"index < {self.d}", node.feature)
        if self.topology == RULE_LIST_KIND and not is_rule_list(self.root):
            raise UnsupportedShapeError("rule list: every TRUE branch must end in a leaf")

    def count(self):
        """(decision nodes, leaves)"""
        nodes = list(iter_nodes(self.root))
        leaves = sum(isinstance(n, CrispLeaf) for n in nodes)
        return len(nodes) - leaves, leaves


CrispRuleList = CrispTree


def iter_nodes(node):
    """Preorder traversal."""
    stack = [node]
    while stack:
        node = stack.pop()
        yield node
        if isinstance(node, CrispNode):
            stack.append(node.right)
            stack.append(node.left)


def is_rule_list(node):
    while isinstance(node, CrispNode):
        if not isinstance(node.left, CrispLeaf):
            return False
        node = node.right
    return True


# ---------------------------------------------------------------------------
# Discretization
# ---------------------------------------------------------------------------

def _discretize_node(soft, node):
    if isinstance(node, LeafNode):
        return CrispLeaf(int(np.argmax(node.w)))
    key = soft.key(node)
    j = int(np.argmax(node.beta))
    bj = float(node.beta[j])
    if bj == 0.0:
        raise DegenerateNodeError(key)
    if bj < 0.0:
        log.warning(f"{key}: dominant weight {bj:.4g} is negative; exported test reads x{j} > {node.phi / bj:.4g}")
    return CrispNode(j, node.phi / bj, _discretize_node(soft, node.left), _discretize_node(soft, node.right))


def discretize_tree(soft):
    """
    Per node: feature = argmax of the raw weights (lowest index on ties) and
    threshold = phi / beta_j. Per leaf: the argmax action.
    """
    if soft.interpretation != POLICY:
        log.debug("discretizing Q leaves by their greedy action")
    kind = RULE_LIST_KIND if soft.topology == RULE_LIST else TREE
    return CrispTree(_discretize_node(soft, soft.root), soft.d, soft.n_actions, kind)


def discretize_rule_list(soft):
    if soft.topology != RULE_LIST and len(soft.decision_nodes) != 1:
        raise UnsupportedShapeError("discretize_rule_list needs a rule list")
    return CrispTree(_discretize_node(soft, soft.root), soft.d, soft.n_actions, RULE_LIST_KIND)


def to_soft(policy, alpha=1e6):
    """
    Lift a crisp policy back to a soft tree: one-hot weights, phi = threshold,
    one-hot leaf parameters. Requires a balanced or rule-list shape.
    """
    def lift(node):
        if isinstance(node, CrispLeaf):
            w = np.zeros(policy.n_actions)
            w[node.action] = 1.0
            return LeafNode(w, POLICY)
        beta = np.zeros(policy.d)
        beta[node.feature] = 1.0
        return DecisionNode(alpha, beta, node.threshold, lift(node.left), lift(node.right))

    n_nodes, n_leaves = policy.count()
    if policy.topology == RULE_LIST_KIND:
        return SoftTree(lift(policy.root), policy.d, policy.n_actions, RULE_LIST, n_nodes)
    depth = n_leaves.bit_length() - 1
    return SoftTree(lift(policy.root), policy.d, policy.n_actions, BALANCED, depth)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def eval_crisp(policy, x):
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != policy.d:
        raise DimensionError("input", policy.d, x.size)
    node = policy.root
    while isinstance(node, CrispNode):
        node = node.left if x[node.feature] > node.threshold else node.right
    return node.action


# ---------------------------------------------------------------------------
# Pruning
# ---------------------------------------------------------------------------

def _prune_node(node, bounds):
    """`bounds` maps feature -> (lo, hi): the path guarantees lo < x_j <= hi."""
    while isinstance(node, CrispNode):
        lo, hi = bounds.get(node.feature, (-np.inf, np.inf))
        if lo >= node.threshold:
            node = node.left
        elif hi <= node.threshold:
            node = node.right
        else:
            break
    if isinstance(node, CrispLeaf):
        return node
    j, t = node.feature, node.threshold
    lo, hi = bounds.get(j, (-np.inf, np.inf))
    left = _prune_node(node.left, {**bounds, j: (max(lo, t), hi)})
    right = _prune_node(node.right, {**bounds, j: (lo, min(hi, t))})
    if left == right:
        return left
    return CrispNode(j, t, left, right)


def prune(policy):
    """
    Remove unreachable tests (per-feature interval analysis) and tests whose
    two subtrees are the same policy, until nothing changes.
    """
    root = policy.root
    while True:
        pruned = _prune_node(root, {})
        if pruned == root:
            break
        root = pruned
    result = CrispTree(root, policy.d, policy.n_actions, policy.topology)
    before, after = policy.count(), result.count()
    if before != after:
        log.debug(f"pruned {before[0]} -> {after[0]} decision nodes")
    return result


# ---------------------------------------------------------------------------
# Export / parse
# ---------------------------------------------------------------------------

def _name_tables(policy, feature_names, action_names):
    features = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(policy.d)]
    actions = list(action_names) if action_names is not None else [f"a{k}" for k in range(policy.n_actions)]
    if len(features) != policy.d:
        raise NameTableError(f"{len(features)} feature names for {policy.d} features")
    if len(actions) != policy.n_actions:
        raise NameTableError(f"{len(actions)} action names for {policy.n_actions} actions")
    if len(set(features)) != len(features) or len(set(actions)) != len(actions):
        raise NameTableError("name tables must not contain duplicates")
    return features, actions


def _text_lines(node, features, actions, depth):
    pad = INDENT * depth
    if isinstance(node, CrispLeaf):
        return [pad + actions[node.action]]
    lines = []
    keyword = "if"
    while isinstance(node, CrispNode):
        head = f"{pad}{keyword} {features[node.feature]} > {node.threshold!r}:"
        if isinstance(node.left, CrispLeaf):
            lines.append(f"{head} {actions[node.left.action]}")
        else:
            lines.append(head)
            lines.extend(_text_lines(node.left, features, actions, depth + 1))
        keyword = "elif"
        node = node.right
    lines.append(f"{pad}else: {actions[node.action]}")
    return lines


def export_text(policy, feature_names=None, action_names=None):
    features, actions = _name_tables(policy, feature_names, action_names)
    return "\n".join(_text_lines(policy.root, features, actions, 0)) + "\n"


def export_dot(policy, feature_names=None, action_names=None):
    features, actions = _name_tables(policy, feature_names, action_names)
    lines = ["digraph policy {", '  node [fontname="Helvetica"];']
    counters = {"n": 0, "l": 0}

    def emit(node):
        if isinstance(node, CrispLeaf):
            ref = f"l{counters['l']}"
            counters["l"] += 1
            lines.append(f'  {ref} [label="{actions[node.action]}", shape=ellipse];')
            return ref
        ref = f"n{counters['n']}"
        counters["n"] += 1
        lines.append(f'  {ref} [label="{features[node.feature]} > {node.threshold!r}", shape=box];')
        left = emit(node.left)
        right = emit(node.right)
        lines.append(f'  {ref} -> {left} [label="true"];')
        lines.append(f'  {ref} -> {right} [label="false"];')
        return ref

    emit(policy.root)
    lines.append("}")
    return "\n".join(lines) + "\n"


def export(policy, fmt="text", feature_names=None, action_names=None):
    fmt = fmt.lower()
    if fmt == "text":
        return export_text(policy, feature_names, action_names)
    if fmt == "dot":
        return export_dot(policy, feature_names, action_names)
    raise ConfigError(f"unknown export format '{fmt}' (text or dot)")


class _Lines:
    def __init__(self, text):
        self.items = [line for line in text.splitlines() if line.strip()]
        self.pos = 0

    def peek(self):
        return self.items[self.pos] if self.pos < len(self.items) else None

    def take(self):
        line = self.peek()
        if line is None:
            raise PolicyFormatError("unexpected end of policy text")
        self.pos += 1
        return line


def _indent_of(line):
    stripped = line.lstrip(" ")
    return (len(line) - len(stripped)) // len(INDENT), stripped


def parse_text(text, d, n_actions, feature_names=None, action_names=None, topology=TREE):
    """Inverse of export_text for the same name tables."""
    blank = CrispTree(CrispLeaf(0), d, n_actions)
    features, actions = _name_tables(blank, feature_names, action_names)
    feature_index = {name: j for j, name in enumerate(features)}
    action_index = {name: k for k, name in enumerate(actions)}
    lines = _Lines(text)

    def leaf(name):
        if name not in action_index:
            raise PolicyFormatError(f"unknown action '{name}'")
        return CrispLeaf(action_index[name])

    def test(cond):
        name, sep, threshold = cond.rpartition(" > ")
        if not sep or name not in feature_index:
            raise PolicyFormatError(f"bad test '{cond}'")
        try:
            return feature_index[name], float(threshold)
        except ValueError:
            raise PolicyFormatError(f"bad threshold in '{cond}'") from None

    def body(rest, depth):
        if rest:
            return leaf(rest)
        return block(depth + 1)

    def block(depth):
        level, stripped = _indent_of(lines.take())
        if level != depth:
            raise PolicyFormatError(f"expected indentation level {depth}: '{stripped}'")
        if not stripped.startswith("if "):
            return leaf(stripped)
        chain = []
        while True:
            keyword, _, rest = stripped.partition(" ")
            cond, _, after = rest.partition(":")
            j, t = test(cond)
            chain.append((j, t, body(after.strip(), depth)))
            level, stripped = _indent_of(lines.take())
            if level != depth:
                raise PolicyFormatError(f"expected indentation level {depth}: '{stripped}'")
            if stripped.startswith("elif "):
                continue
            if stripped.startswith("else:"):
                node = leaf(stripped[len("else:"):].strip())
                break
            raise PolicyFormatError(f"expected elif/else: '{stripped}'")
        for j, t, taken in reversed(chain):
            node = CrispNode(j, t, taken, node)
        return node

    root = block(0)
    if lines.peek() is not None:
        raise PolicyFormatError(f"trailing text: '{lines.peek().strip()}'")
    return CrispTree(root, d, n_actions, topology)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _node_to_dict(node):
    if isinstance(node, CrispLeaf):
        return {"action": node.action}
    return {
        "feature": node.feature,
        "threshold": node.threshold,
        "true": _node_to_dict(node.left),
        "false": _node_to_dict(node.right),
    }


def _node_from_dict(doc):
    if "action" in doc:
        return CrispLeaf(int(doc["action"]))
    return CrispNode(int(doc["feature"]), float(doc["threshold"]),
                     _node_from_dict(doc["true"]), _node_from_dict(doc["false"]))


def crisp_to_dict(policy):
    return {
        "kind": "crisp",
        "version": CRISP_FORMAT_VERSION,
        "topology": policy.topology,
        "d": policy.d,
        "n_actions": policy.n_actions,
        "root": _node_to_dict(policy.root),
    }


def crisp_from_dict(doc):
    if doc.get("version") != CRISP_FORMAT_VERSION:
        raise UnsupportedShapeError(f"unsupported crisp format version {doc.get('version')}")
    return CrispTree(_node_from_dict(doc["root"]), int(doc["d"]), int(doc["n_actions"]), doc.get("topology", TREE))


def save_crisp(policy, path):
    Path(path).write_text(json.dumps(crisp_to_dict(policy), indent=2))


def load_crisp(path):
    return crisp_from_dict(json.loads(Path(path).read_text()))
