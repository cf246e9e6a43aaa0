import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modules.core import (
    DimensionError,
    InvalidInterpretationError,
    KeyMismatchError,
    UnsupportedShapeError,
    make_rng,
)
from modules.ddt import (
    BALANCED,
    POLICY,
    Q,
    RULE_LIST,
    DecisionNode,
    GradientBuffer,
    LeafNode,
    SoftTree,
    backward,
    build_balanced,
    build_rule_list,
    canonical_signs,
    eval_rule_list_soft,
    eval_soft,
    get_params,
    grad_single_node,
    leaf_distribution,
    log_prob_grad,
    param_kind,
    parse_arch,
    single_node_tree,
    split_activation,
    tree_from_dict,
    tree_to_dict,
    with_params,
)


def _random_tree(seed, depth, d=3, n_actions=3, interpretation=POLICY):
    return build_balanced(depth, d, n_actions, np.random.default_rng(seed), interpretation)


def _numeric_grad(tree, x, upstream, h=1e-6):
    params = get_params(tree)
    out = {}
    for key, value in params.items():
        arr = np.atleast_1d(np.array(value, dtype=float))
        grad = np.zeros_like(arr)
        for i in range(arr.size):
            for sign in (1.0, -1.0):
                bumped = arr.copy()
                bumped[i] += sign * h
                p = dict(params)
                p[key] = bumped if np.ndim(value) else float(bumped[0])
                grad[i] += sign * float(upstream @ eval_soft(with_params(tree, p), x))
            grad[i] /= 2 * h
        out[key] = grad if np.ndim(value) else float(grad[0])
    return out


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), depth=st.integers(1, 4))
def test_policy_tree_output_is_a_distribution(seed, depth):
    tree = _random_tree(seed, depth)
    x = np.random.default_rng(seed + 1).uniform(-3, 3, tree.d)
    p = eval_soft(tree, x)
    assert np.all(p >= 0)
    assert p.sum() == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), depth=st.integers(1, 3))
def test_q_tree_output_stays_within_leaf_range(seed, depth):
    tree = _random_tree(seed, depth, interpretation=Q)
    x = np.random.default_rng(seed + 7).uniform(-3, 3, tree.d)
    q = eval_soft(tree, x)
    leaves = np.array([leaf.w for leaf in tree.leaves])
    assert np.all(q >= leaves.min(axis=0) - 1e-12)
    assert np.all(q <= leaves.max(axis=0) + 1e-12)


def test_leaf_distribution_is_softmax():
    p = leaf_distribution(LeafNode([0.0, np.log(3.0)]))
    assert np.allclose(p, [0.25, 0.75])
    with pytest.raises(InvalidInterpretationError):
        leaf_distribution(LeafNode([0.0, 1.0], Q))


def test_single_node_mixture():
    tree = single_node_tree(2.0, [1.0], 0.5, [1.0, 3.0], [5.0, -1.0], Q)
    mu = 1.0 / (1.0 + np.exp(-2.0 * (1.5 - 0.5)))
    assert np.allclose(eval_soft(tree, [1.5]), mu * np.array([1.0, 3.0]) + (1 - mu) * np.array([5.0, -1.0]))


def test_split_activation_is_clamped():
    node = DecisionNode(1e9, [1.0], 0.0, LeafNode([0.0, 1.0]), LeafNode([1.0, 0.0]))
    assert split_activation(node, [1.0]) == 1.0
    assert split_activation(node, [-1.0]) == pytest.approx(0.0, abs=1e-200)


def test_split_activation_value():
    node = DecisionNode(10.0, [1.0], 2.5, LeafNode([0.0, 1.0]), LeafNode([1.0, 0.0]))
    assert split_activation(node, [3.0]) == pytest.approx(0.993307, abs=1e-6)
    assert split_activation(node, [2.0]) == pytest.approx(1.0 - 0.993307, abs=1e-6)


def test_boundary_input_splits_evenly():
    tree = single_node_tree(50.0, [1.0], 2.0, [1.0, 0.0], [0.0, 1.0], Q)
    assert np.allclose(eval_soft(tree, [2.0]), [0.5, 0.5])


def test_rule_list_matches_recursive_evaluation():
    rng = np.random.default_rng(3)
    tree = build_rule_list(5, 4, 3, rng)
    for _ in range(20):
        x = rng.uniform(-2, 2, 4)
        assert np.array_equal(eval_rule_list_soft(tree, x), eval_soft(tree, x))


def test_rule_list_eval_rejects_balanced_tree():
    with pytest.raises(UnsupportedShapeError):
        eval_rule_list_soft(_random_tree(0, 2), np.zeros(3))


def test_input_dimension_is_checked():
    with pytest.raises(DimensionError) as err:
        eval_soft(_random_tree(0, 1), np.zeros(2))
    assert err.value.expected == 3
    assert err.value.actual == 2


def test_mixed_interpretations_are_rejected():
    root = DecisionNode(1.0, [1.0], 0.0, LeafNode([0.0, 0.0], POLICY), LeafNode([0.0, 0.0], Q))
    with pytest.raises(InvalidInterpretationError):
        SoftTree(root, 1, 2, BALANCED, 1)


def test_unbalanced_shape_is_rejected():
    inner = DecisionNode(1.0, [1.0], 0.0, LeafNode([0.0]), LeafNode([0.0]))
    root = DecisionNode(1.0, [1.0], 0.0, inner, LeafNode([0.0]))
    with pytest.raises(UnsupportedShapeError):
        SoftTree(root, 1, 1, BALANCED, 2)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("depth", [1, 2, 3, 4])
@pytest.mark.parametrize("interpretation", [POLICY, Q])
def test_backward_matches_finite_differences(depth, interpretation):
    rng = make_rng(depth, "init")
    worst = 0.0
    for case in range(25):
        tree = build_balanced(depth, 3, 3, rng, interpretation)
        x = rng.uniform(-1.5, 1.5, 3)
        upstream = rng.normal(size=3)
        analytic = backward(tree, x, upstream)
        numeric = _numeric_grad(tree, x, upstream)
        for key in analytic:
            a = np.atleast_1d(analytic[key])
            n = np.atleast_1d(numeric[key])
            err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-4)
            worst = max(worst, float(err.max()))
    assert worst < 1e-4


def test_backward_keys_follow_preorder():
    tree = _random_tree(1, 2)
    grads = backward(tree, np.zeros(3), np.ones(3))
    assert set(grads) == set(get_params(tree))
    assert {"n0.phi", "n1.phi", "n2.phi", "l0.w", "l3.w"} <= set(grads)


def test_single_node_closed_form_matches_backward_exactly():
    rng = np.random.default_rng(11)
    for _ in range(50):
        tree = single_node_tree(rng.uniform(0.5, 10), [rng.uniform(-2, 2)], rng.uniform(-3, 3),
                                rng.normal(size=2), rng.normal(size=2), Q)
        s = float(rng.uniform(-4, 4))
        a = int(rng.integers(2))
        onehot = np.eye(2)[a]
        closed = grad_single_node(tree, s, a)
        general = backward(tree, [s], onehot)
        for key in closed:
            assert np.array_equal(np.atleast_1d(closed[key]), np.atleast_1d(general[key])), key
        mu = split_activation(tree.root, [s])
        assert closed["l0.w"][a] == mu
        assert closed["l1.w"][a] == 1.0 - mu


def test_grad_single_node_needs_single_node_tree():
    with pytest.raises(UnsupportedShapeError):
        grad_single_node(_random_tree(0, 2, d=1, interpretation=Q), 0.0, 0)


def test_log_prob_grad_scales_upstream_by_inverse_probability():
    tree = _random_tree(5, 2)
    x = np.array([0.3, -0.2, 0.9])
    grads, p = log_prob_grad(tree, x, 1)
    assert p == pytest.approx(eval_soft(tree, x)[1])
    direct = backward(tree, x, np.array([0.0, 1.0 / p, 0.0]))
    for key in grads:
        assert np.allclose(grads[key], direct[key])


@settings(max_examples=1000, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), action=st.integers(0, 1))
def test_log_prob_grad_matches_finite_differences_of_log_policy(seed, action):
    rng = np.random.default_rng(seed)
    tree = build_balanced(1, 2, 2, rng)
    x = rng.uniform(-2.0, 2.0, 2)
    grads, _ = log_prob_grad(tree, x, action)
    params = get_params(tree)
    h = 1e-6
    for key, value in params.items():
        arr = np.atleast_1d(np.array(value, dtype=float))
        analytic = np.atleast_1d(grads[key])
        for i in range(arr.size):
            logs = []
            for sign in (1.0, -1.0):
                bumped = arr.copy()
                bumped[i] += sign * h
                p = dict(params)
                p[key] = bumped if np.ndim(value) else float(bumped[0])
                logs.append(np.log(eval_soft(with_params(tree, p), x)[action]))
            numeric = (logs[0] - logs[1]) / (2 * h)
            assert abs(analytic[i] - numeric) <= 1e-5 * max(1.0, abs(numeric)), (key, i)


def test_gradient_buffer_add_requires_same_keys():
    a = GradientBuffer({"n0.phi": 1.0})
    with pytest.raises(KeyMismatchError):
        a.add(GradientBuffer({"n1.phi": 1.0}))
    a.add(GradientBuffer({"n0.phi": 2.0}), weight=0.5)
    assert a["n0.phi"] == 2.0


# ---------------------------------------------------------------------------
# Parameters, builders, files
# ---------------------------------------------------------------------------

def test_param_kind():
    assert param_kind("n3.alpha") == "alpha"
    assert param_kind("n0.beta") == "beta"
    assert param_kind("n1.phi") == "phi"
    assert param_kind("l2.w") == "leaf"


def test_with_params_rejects_foreign_keys():
    tree = _random_tree(0, 1)
    params = get_params(tree)
    params["n9.phi"] = 0.0
    with pytest.raises(KeyMismatchError):
        with_params(tree, params)


def test_canonical_signs_keeps_the_soft_function():
    rng = make_rng(7, "init")
    for depth in (1, 2, 3):
        tree = build_balanced(depth, 4, 2, rng)
        flipped = canonical_signs(tree)
        for _ in range(50):
            x = rng.uniform(-3.0, 3.0, 4)
            assert np.allclose(eval_soft(flipped, x), eval_soft(tree, x), atol=1e-12)
        for node in flipped.decision_nodes:
            assert node.beta[np.argmax(np.abs(node.beta))] > 0.0


def test_canonical_signs_swaps_children_of_negative_splits():
    tree = single_node_tree(3.0, [-2.0, 0.5], -1.0, [1.0, 0.0], [0.0, 1.0])
    flipped = canonical_signs(tree)
    assert list(flipped.root.beta) == [2.0, -0.5]
    assert flipped.root.phi == 1.0
    assert list(flipped.root.left.w) == [0.0, 1.0]
    assert list(tree.root.beta) == [-2.0, 0.5]


def test_canonical_signs_leaves_rule_lists_alone():
    rules = build_rule_list(3, 2, 2, np.random.default_rng(4))
    assert canonical_signs(rules) is rules


def test_with_params_leaves_original_untouched():
    tree = _random_tree(0, 1)
    params = get_params(tree)
    params["n0.phi"] = params["n0.phi"] + 1.0
    moved = with_params(tree, params)
    assert moved.root.phi == tree.root.phi + 1.0
    assert tree.root.phi == get_params(tree)["n0.phi"]


@pytest.mark.parametrize("arch, expected", [
    ("tree:2", (BALANCED, 1)),
    ("tree:8", (BALANCED, 3)),
    ("list:1", (RULE_LIST, 1)),
    ("list:2", (RULE_LIST, 2)),
    ("list:8", (RULE_LIST, 8)),
    ("mlp:0", ("mlp", 0)),
    ("mlp:2", ("mlp", 2)),
])
def test_parse_arch(arch, expected):
    assert parse_arch(arch) == expected


@pytest.mark.parametrize("arch", ["tree:6", "tree:1", "list:0", "mlp:3", "forest:4", "tree:x"])
def test_parse_arch_rejects(arch):
    with pytest.raises(UnsupportedShapeError):
        parse_arch(arch)


def test_builders_produce_requested_shapes():
    rng = np.random.default_rng(0)
    tree = build_balanced(3, 2, 4, rng)
    assert len(tree.decision_nodes) == 7 and len(tree.leaves) == 8
    rules = build_rule_list(4, 2, 4, rng)
    assert len(rules.decision_nodes) == 4 and len(rules.leaves) == 5
    assert all(isinstance(n.left, LeafNode) for n in rules.decision_nodes)


def test_tree_document_preserves_evaluation():
    tree = build_rule_list(3, 2, 3, np.random.default_rng(2), Q)
    doc = tree_to_dict(tree)
    assert doc["kind"] == "soft_tree"
    loaded = tree_from_dict(doc)
    x = np.array([0.4, -1.1])
    assert np.array_equal(eval_soft(loaded, x), eval_soft(tree, x))
    assert loaded.topology == RULE_LIST and loaded.interpretation == Q
