from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import interp_tree, logistic, tree_spec
from smoothsr.encoding import (CONST, ConfigError, CrispTree, Leaf, StructureError, TreeConfig, build_layout,
                               decode, encode_crisp, eval_smooth, operator_mix_weights, predict,
                               predict_one_position, random_crisp_tree)

OPS4 = ("add", "mul", "sub", "div")


@pytest.mark.parametrize("d", range(1, 8))
@pytest.mark.parametrize("k", [2, 3, 4])
def test_dimension_law(d, k):
    for n in range(1, 21):
        lay = build_layout(TreeConfig(d, n, OPS4[:k]))
        assert lay.total_dim == (2**d - 1) * (k - 1) + 2 ** (d - 1) * (n + 1)
        lin = build_layout(TreeConfig(d, n, OPS4[:k], "linear"))
        assert lin.num_op_weights == (2 ** (d - 1) - 1) * (k - 1)
        for layout in (lay, lin):
            used = np.concatenate([layout.op_slots.ravel(), layout.var_slots.ravel()])
            assert np.array_equal(np.sort(used), np.arange(layout.total_dim))


@pytest.mark.parametrize("args,ops,var,total", [
    ((5, 10), ("add", "mul"), 176, 207),
    ((1, 1), ("add", "mul"), 2, 3),
    ((3, 4), ("add", "mul", "sub"), 20, 34),
])
def test_layout_examples(args, ops, var, total):
    lay = build_layout(TreeConfig(*args, ops))
    assert (lay.num_var_weights, lay.total_dim) == (var, total)
    assert lay.num_op_weights == total - var


@pytest.mark.parametrize("kwargs", [
    dict(depth=0, num_vars=3), dict(depth=2, num_vars=0), dict(depth=2, num_vars=2, operators=("add", "add")),
    dict(depth=2, num_vars=2, operators=("add",)), dict(depth=2, num_vars=2, operators=("add", "pow")),
    dict(depth=2, num_vars=2, leaf_mode="tree"),
])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        TreeConfig(**kwargs)


def test_mix_weight_examples():
    assert operator_mix_weights([0.0]).tolist() == [0.5, 0.5]
    w = operator_mix_weights([20.0])
    assert w[0] >= 1 - 1e-8 and w[1] <= 1e-8
    assert operator_mix_weights([0.0, 0.0]).tolist() == [0.5, 0.25, 0.25]


def test_mix_weights_match_scalar_formula():
    rng = np.random.default_rng(3)
    for _ in range(200):
        raw = rng.normal(0, 3, size=3)
        s = [logistic(r) for r in raw]
        expect = [s[0], s[1] * (1 - s[0]), s[2] * (1 - s[0]) * (1 - s[1]), (1 - s[0]) * (1 - s[1]) * (1 - s[2])]
        assert np.allclose(operator_mix_weights(raw), expect, rtol=1e-12, atol=1e-15)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=3))
def test_simplex_property(raw):
    w = operator_mix_weights(raw)
    assert (w >= 0).all()
    assert abs(w.sum() - 1) <= 1e-12


def _const_leaf_genotype(layout, values, root_raw):
    g = np.zeros(layout.total_dim)
    g[layout.op_slots[0]] = root_raw
    for node in range(1, layout.op_slots.shape[0]):
        g[layout.op_slots[node]] = 40.0  # leaves fold with "add"
    for slots, v in zip(layout.var_slots, values):
        g[slots[-1]] = v
    return g


def test_half_mix_example():
    lay = build_layout(TreeConfig(2, 1))
    g = _const_leaf_genotype(lay, [2.0, 3.0], 0.0)
    assert eval_smooth(g, lay, [0.7]) == pytest.approx(5.5, abs=1e-12)


def test_constant_leaf_is_row_independent():
    lay = build_layout(TreeConfig(1, 3))
    g = np.zeros(lay.total_dim)
    g[lay.op_slots[0]] = 40.0
    g[lay.var_slots[0][-1]] = -1.75
    X = np.random.default_rng(0).normal(size=(50, 3))
    assert np.all(predict(g, lay, X) == -1.75)


@pytest.mark.parametrize("ops", [("add", "mul"), ("add", "mul", "sub"), OPS4])
@pytest.mark.parametrize("mode", ["op_fold", "linear"])
def test_one_hot_matches_interpreter(ops, mode):
    rng = np.random.default_rng(11)
    for _ in range(40):
        cfg = TreeConfig(int(rng.integers(1, 6)), int(rng.integers(1, 11)), ops, mode)
        lay = build_layout(cfg)
        tree = random_crisp_tree(cfg, rng, max_terms=3)
        g = encode_crisp(tree, lay)
        X = rng.uniform(-1, 1, size=(30, cfg.num_vars))
        got = predict(g, lay, X)
        ops_, leaves = tree_spec(tree)
        want = np.array([interp_tree(ops_, leaves, row) for row in X])
        assert np.all(np.abs(got - want) <= 1e-9 * (1 + np.abs(want)))


def test_crisp_evaluate_matches_interpreter():
    rng = np.random.default_rng(2)
    cfg = TreeConfig(4, 5, OPS4)
    for _ in range(20):
        tree = random_crisp_tree(cfg, rng, max_terms=3, leaf_ops=OPS4)
        X = rng.uniform(-1, 1, size=(20, 5))
        ops_, leaves = tree_spec(tree)
        assert np.allclose(tree.evaluate(X), [interp_tree(ops_, leaves, r) for r in X], rtol=1e-12)


def test_batch_equals_rowwise():
    lay = build_layout(TreeConfig(4, 3, ("add", "mul", "sub")))
    rng = np.random.default_rng(5)
    G = rng.normal(size=(4, lay.total_dim))
    X = rng.uniform(-1, 1, size=(7, 3))
    batch = predict(G, lay, X)
    assert batch.shape == (4, 7)
    for i in range(4):
        for j in range(7):
            assert batch[i, j] == pytest.approx(eval_smooth(G[i], lay, X[j]), rel=1e-12, abs=1e-14)


def test_continuity_probe():
    lay = build_layout(TreeConfig(3, 3))
    rng = np.random.default_rng(9)
    ratios = []
    for _ in range(50):
        g = rng.normal(0, 0.5, lay.total_dim)
        row = rng.uniform(-1, 1, 3)
        d = rng.uniform(-1, 1, lay.total_dim) * 1e-6
        f0 = eval_smooth(g, lay, row)
        full = abs(eval_smooth(g + d, lay, row) - f0)
        half = abs(eval_smooth(g + d / 2, lay, row) - f0)
        assert full <= 1e3 * np.abs(d).max()
        if full > 1e-12:
            ratios.append(full / half / 2)
    ratios = np.array(ratios)
    assert ratios.size > 40
    assert np.all((ratios >= 0.25) & (ratios <= 4))


def test_overflow_propagates_without_raising():
    lay = build_layout(TreeConfig(3, 1, leaf_mode="linear"))
    g = np.zeros(lay.total_dim)
    g[lay.op_slots.ravel()] = -40.0  # pick "mul" everywhere
    g[lay.var_slots[:, 0]] = 1e100
    out = predict(g, lay, np.ones((2, 1)))
    assert not np.isfinite(out).any()


def test_decode_product_example():
    lay = build_layout(TreeConfig(2, 2))
    tree = CrispTree(2, ("mul",), (Leaf(((0, 1.0),)), Leaf(((1, 1.0),))))
    assert decode(encode_crisp(tree, lay), lay).render() == "(1·x1) * (1·x2)"


def test_decode_threshold_example():
    lay = build_layout(TreeConfig(1, 2, leaf_mode="linear"))
    t = decode(np.array([0.9, 0.06, 0.04]), lay, 0.05)
    assert t.leaves[0].variables == {0, 1}
    assert [v for v, _ in t.leaves[0].terms] == [0, 1]


def test_decode_keeps_largest_when_nothing_passes():
    lay = build_layout(TreeConfig(1, 9, leaf_mode="linear"))
    g = np.full(lay.total_dim, 0.1)
    g[3] = 0.11
    t = decode(g, lay, 0.5)
    assert t.leaves[0].terms == ((3, 0.11),)


def test_decode_ties_and_zero_leaf():
    lay = build_layout(TreeConfig(2, 2))
    t = decode(np.zeros(lay.total_dim), lay)
    assert t.ops == ("add",)
    assert all(lf.terms == ((CONST, 0.0),) for lf in t.leaves)
    assert len(t.warnings) == 2


@pytest.mark.parametrize("tau", [0.0, 1.0, 1.5, -0.1])
def test_decode_rejects_threshold(tau):
    lay = build_layout(TreeConfig(2, 2))
    with pytest.raises(ValueError):
        decode(np.zeros(lay.total_dim), lay, tau)


@pytest.mark.parametrize("mode", ["op_fold", "linear"])
def test_round_trip(mode):
    rng = np.random.default_rng(21)
    for _ in range(1000):
        cfg = TreeConfig(int(rng.integers(1, 6)), int(rng.integers(1, 11)), ("add", "mul", "sub"), mode)
        lay = build_layout(cfg)
        tree = random_crisp_tree(cfg, rng, max_terms=3)
        back = decode(encode_crisp(tree, lay), lay)
        assert back.ops == tree.ops
        for a, b in zip(tree.leaves, back.leaves):
            mass = sum(abs(c) for _, c in a.terms)
            kept = {v for v, c in a.terms if abs(c) / mass >= 0.05}
            assert {v for v, _ in b.terms} == kept
            assert a.op == b.op


def test_decode_is_deterministic_across_threads():
    lay = build_layout(TreeConfig(5, 10))
    g = np.random.default_rng(4).normal(size=lay.total_dim)
    with ThreadPoolExecutor(4) as pool:
        out = set(pool.map(lambda _: decode(g, lay).render(), range(16)))
    assert len(out) == 1


def test_encode_examples():
    lay = build_layout(TreeConfig(2, 2))
    tree = CrispTree(2, ("add",), (Leaf(((0, 1.0),)), Leaf(((1, 1.0),))))
    X = np.random.default_rng(0).uniform(-1, 1, size=(100, 2))
    assert np.allclose(predict(encode_crisp(tree, lay), lay, X), X[:, 0] + X[:, 1], rtol=0, atol=1e-8)

    one = build_layout(TreeConfig(1, 3))
    const = CrispTree(1, (), (Leaf(((CONST, 3.5),)),))
    assert np.allclose(predict(encode_crisp(const, one), one, X[:, [0, 1, 1]]), 3.5, rtol=1e-9, atol=0)

    g = encode_crisp(tree, lay, saturation=20)
    assert operator_mix_weights(g[lay.op_slots])[:, 0].min() >= 1 - 1e-8


def test_encode_errors():
    lay = build_layout(TreeConfig(2, 2))
    tree = CrispTree(2, ("add",), (Leaf(((0, 1.0),)), Leaf(((1, 1.0),))))
    with pytest.raises(ValueError):
        encode_crisp(tree, lay, saturation=5)
    with pytest.raises(StructureError):
        encode_crisp(tree, build_layout(TreeConfig(3, 2)))
    with pytest.raises(StructureError):
        encode_crisp(CrispTree(2, ("div",), tree.leaves), lay)
    with pytest.raises(StructureError):
        encode_crisp(CrispTree(2, ("add",), (Leaf(((5, 1.0),)), tree.leaves[1])), lay)
    with pytest.raises(StructureError):
        CrispTree(2, ("add", "mul"), tree.leaves)


def test_render_digits():
    leaf = Leaf(((0, 1.23456789), (CONST, -0.5)))
    assert leaf.render() == "(1.23457·x1 + -0.5)"


@pytest.mark.parametrize("cfg", [
    TreeConfig(5, 10), TreeConfig(3, 3, leaf_mode="linear"), TreeConfig(4, 4, ("add", "mul", "sub")),
    TreeConfig(1, 2), TreeConfig(3, 2, OPS4),
])
def test_one_position_matches_full(cfg):
    lay = build_layout(cfg)
    rng = np.random.default_rng(1)
    g = rng.normal(size=lay.total_dim)
    X = rng.uniform(-1, 1, size=(40, cfg.num_vars))
    pos = rng.integers(0, lay.total_dim, size=60)
    vals = rng.normal(size=60)
    got = predict_one_position(g, lay, X, pos, vals)
    G = np.repeat(g[None], 60, axis=0)
    G[np.arange(60), pos] = vals
    want = predict(G, lay, X)
    assert np.allclose(got, want, rtol=1e-10, atol=1e-12)


def test_thread_safety():
    lay = build_layout(TreeConfig(5, 10))
    rng = np.random.default_rng(8)
    G = rng.normal(size=(32, lay.total_dim))
    X = rng.uniform(-1, 1, size=(100, 10))
    serial = [predict(g, lay, X) for g in G]
    with ThreadPoolExecutor(4) as pool:
        threaded = list(pool.map(lambda g: predict(g, lay, X), G))
    assert all(np.array_equal(a, b) for a, b in zip(serial, threaded))
