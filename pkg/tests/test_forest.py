import numpy as np
import pytest
from hypothesis import given, strategies as st

from confbal.data import standardize_pair
from confbal.errors import EmptyChild, ForestFormatError
from confbal.forest import (Forest, ForestParams, Tree, grow_forest, grow_tree,
                            grow_uniform_partition_tree, leaf_id, load_forest, save_forest,
                            split_loss)

# -- independent oracles --------------------------------------------------------


def joint_sse(Y, A):
    return np.sum((Y - Y.mean()) ** 2) + np.sum((A - A.mean()) ** 2)


def reference_tree(X, Y, A, min_node, max_depth=None):
    """Plain recursive grower using split_loss over every feature and midpoint.

    Returns leaf membership of each row as a list of index arrays in
    left-first depth-first order.
    """
    leaves = []

    def grow(rows, depth):
        if rows.size < 2 * min_node or (max_depth is not None and depth == max_depth):
            leaves.append(rows)
            return
        best = (1e-12, None, None)
        for j in range(X.shape[1]):
            vals = np.unique(X[rows, j])
            for lo, hi in zip(vals[:-1], vals[1:]):
                thr = 0.5 * (lo + hi)
                if thr <= lo:
                    thr = hi
                nl = int((X[rows, j] < thr).sum())
                if nl < min_node or rows.size - nl < min_node:
                    continue
                loss = split_loss(rows, j, thr, Y, A, X)
                bar = best[0] if best[1] is None else best[0] * (1 + 1e-9)
                if loss > bar:
                    best = (loss, j, thr)
        if best[1] is None:
            leaves.append(rows)
            return
        _, j, thr = best
        go_left = X[rows, j] < thr
        grow(rows[go_left], depth + 1)
        grow(rows[~go_left], depth + 1)

    grow(np.arange(X.shape[0]), 0)
    return leaves


def _full_params(p, min_node=1, max_depth=None, seed=0):
    return ForestParams(m=1, mtry=p, min_node=min_node, max_depth=max_depth,
                        subsample_fraction=1.0, seed=seed)


def _leaf_groups(tree, X):
    ids = np.array([leaf_id(tree, x) for x in X])
    return [np.flatnonzero(ids == k) for k in range(tree.n_leaves)]


# -- split_loss ----------------------------------------------------------------

@given(st.integers(4, 40), st.integers(0, 10 ** 6))
def test_split_loss_equals_sse_drop(n, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 2))
    Y, A = rng.standard_normal(n), rng.integers(0, 2, n).astype(float)
    rows = np.arange(n)
    thr = np.sort(X[:, 1])[rng.integers(1, n)]
    if thr <= X[:, 1].min():
        return
    L = split_loss(rows, 1, thr, Y, A, X)
    left = X[:, 1] < thr
    drop = joint_sse(Y, A) - joint_sse(Y[left], A[left]) - joint_sse(Y[~left], A[~left])
    assert n * L == pytest.approx(drop, abs=1e-9)
    assert L >= -1e-12


def test_split_loss_empty_child():
    X = np.array([[0.0], [1.0], [2.0]])
    with pytest.raises(EmptyChild):
        split_loss([0, 1, 2], 0, 5.0, np.zeros(3), np.zeros(3), X)
    with pytest.raises(EmptyChild):
        split_loss([0, 1, 2], 0, -1.0, np.zeros(3), np.zeros(3), X)


def test_split_loss_threshold_equal_value_goes_right():
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    Y = np.array([0.0, 0.0, 1.0, 1.0])
    assert split_loss(range(4), 0, 2.0, Y, Y, X) == pytest.approx(0.5)


# -- tree growing ----------------------------------------------------------------

def test_step_functions_split_at_half():
    x = np.linspace(0.05, 0.95, 10)
    X = x[:, None]
    step = (x > 0.5).astype(float)
    pair = standardize_pair(step + 0.0, step.astype(int))
    tree = grow_tree(X, pair.Y_tilde, pair.A_tilde, _full_params(1), 0)
    # exhaustive scan of midpoints picks the one adjacent to 0.5
    mids = 0.5 * (x[:-1] + x[1:])
    losses = [split_loss(np.arange(10), 0, t, pair.Y_tilde, pair.A_tilde, X) for t in mids]
    assert tree.feature[0] == 0
    assert tree.threshold[0] == pytest.approx(mids[int(np.argmax(losses))])
    assert tree.threshold[0] == pytest.approx(0.5)


def test_min_node_equal_n_single_leaf():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((12, 3))
    tree = grow_tree(X, rng.standard_normal(12), rng.standard_normal(12),
                     ForestParams(m=1, min_node=12, subsample_fraction=1.0), 0)
    assert tree.n_leaves == 1


def test_identical_seeds_identical_trees():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((50, 4))
    Y, A = rng.standard_normal(50), rng.standard_normal(50)
    params = ForestParams(m=1, mtry=2, min_node=3, seed=9)
    a, b = grow_tree(X, Y, A, params, 4), grow_tree(X, Y, A, params, 4)
    for f in ("feature", "threshold", "left", "right", "leaf", "subsample"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


@given(st.integers(6, 40), st.integers(1, 3), st.integers(1, 4), st.integers(0, 10 ** 6))
def test_tree_matches_reference_grower(n, p, min_node, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    Y = rng.standard_normal(n)
    A = (rng.random(n) < 0.5).astype(float)
    tree = grow_tree(X, Y, A, _full_params(p, min_node), 0)
    ref = reference_tree(X, Y, A, min_node)
    got = _leaf_groups(tree, X)
    assert len(got) == len(ref)
    for g, r in zip(got, ref):
        np.testing.assert_array_equal(g, np.sort(r))


def test_tree_respects_max_depth_and_min_node():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((200, 3))
    Y, A = rng.standard_normal(200), rng.standard_normal(200)
    tree = grow_tree(X, Y, A, _full_params(3, min_node=7, max_depth=3), 0)
    assert tree.depth() <= 3
    sizes = np.bincount([leaf_id(tree, x) for x in X], minlength=tree.n_leaves)
    assert sizes.min() >= 7
    ref = reference_tree(X, Y, A, 7, max_depth=3)
    assert len(ref) == tree.n_leaves


def test_leaf_ids_contiguous_and_binary():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((80, 2))
    tree = grow_tree(X, rng.standard_normal(80), rng.standard_normal(80), _full_params(2, 2), 0)
    leaves = tree.leaf[tree.feature < 0]
    assert sorted(leaves) == list(range(tree.n_leaves))
    internal = tree.feature >= 0
    assert np.all(tree.left[internal] >= 0) and np.all(tree.right[internal] >= 0)
    assert tree.n_nodes == 2 * tree.n_leaves - 1


@given(st.floats(0.1, 50), st.floats(-100, 100), st.integers(0, 1000))
def test_affine_response_invariance(c, shift, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((60, 3))
    Y = rng.standard_normal(60)
    A = np.r_[np.zeros(30, int), np.ones(30, int)]
    params = ForestParams(m=3, mtry=2, min_node=3, seed=seed)
    p1 = standardize_pair(Y, A)
    p2 = standardize_pair(c * Y + shift, A)
    f1 = grow_forest(X, p1.Y_tilde, p1.A_tilde, params)
    f2 = grow_forest(X, p2.Y_tilde, p2.A_tilde, params)
    np.testing.assert_array_equal(f1.apply(X), f2.apply(X))


# -- routing -----------------------------------------------------------------------

def _stump(thr=0.5):
    return Tree(np.array([0, -1, -1]), np.array([thr, 0.0, 0.0]), np.array([1, -1, -1]),
                np.array([2, -1, -1]), np.array([-1, 0, 1]))


def test_leaf_id_single_leaf():
    t = Tree(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]), np.array([0]))
    assert leaf_id(t, [3.0, -1.0]) == 0


def test_leaf_id_depth_one():
    t = _stump()
    assert leaf_id(t, [0.2]) == 0
    assert leaf_id(t, [0.9]) == 1
    assert leaf_id(t, [0.5]) == 1


def test_every_probe_in_exactly_one_leaf_box():
    rng = np.random.default_rng(5)
    X = rng.uniform(0, 1, (150, 2))
    f = grow_forest(X, rng.standard_normal(150), rng.standard_normal(150),
                    ForestParams(m=5, mtry=2, min_node=4, seed=1))
    g = np.linspace(-0.2, 1.2, 25)
    probes = np.array([[a, b] for a in g for b in g])
    ids = f.apply(probes)
    big = 1e9
    for t, tree in enumerate(f.trees):
        boxes = tree.leaf_boxes([-big, -big], [big, big])
        for x, k in zip(probes, ids[:, t]):
            inside = [np.all(lo <= x) and np.all(x < hi) for lo, hi in boxes]
            assert sum(inside) == 1
            assert inside[k]
            assert leaf_id(tree, x) == k


def test_apply_matches_leaf_id_loop():
    rng = np.random.default_rng(6)
    X = rng.standard_normal((40, 3))
    f = grow_forest(X, rng.standard_normal(40), rng.standard_normal(40),
                    ForestParams(m=7, min_node=2, seed=2))
    Z = rng.standard_normal((30, 3))
    loop = np.array([[leaf_id(t, z) for t in f.trees] for z in Z])
    np.testing.assert_array_equal(f.apply(Z), loop)


# -- uniform random partition -----------------------------------------------------

def test_uniform_k1_p1():
    t = grow_uniform_partition_tree([[0.0, 1.0]], 1, 0, seed=3)
    assert t.n_leaves == 2 and t.feature[0] == 0
    assert 0.0 <= t.threshold[0] <= 1.0


@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 10 ** 6))
def test_uniform_leaf_count_and_tiling(k, p, seed):
    ranges = np.column_stack([np.zeros(p), np.arange(1, p + 1, dtype=float)])
    t = grow_uniform_partition_tree(ranges, k, seed)
    assert t.n_leaves == 2 ** k
    assert t.depth() == k
    boxes = t.leaf_boxes(ranges[:, 0], ranges[:, 1])
    vol = sum(np.prod(hi - lo) for lo, hi in boxes)
    assert vol == pytest.approx(np.prod(ranges[:, 1] - ranges[:, 0]), rel=1e-9)
    # no overlap: pairwise intersections have zero volume
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            lo = np.maximum(boxes[i][0], boxes[j][0])
            hi = np.minimum(boxes[i][1], boxes[j][1])
            assert np.any(hi <= lo)


def test_uniform_determinism_and_mode():
    a = grow_uniform_partition_tree([[0, 1], [0, 2]], 3, 5, seed=1)
    b = grow_uniform_partition_tree([[0, 1], [0, 2]], 3, 5, seed=1)
    np.testing.assert_array_equal(a.threshold, b.threshold)
    X = np.random.default_rng(0).uniform(0, 1, (30, 2))
    f = grow_forest(X, params=ForestParams(m=4, mode="uniform", k=3, seed=2))
    assert np.all(f.n_leaves() == 8)


def test_uniform_rejects_bad_input():
    with pytest.raises(ValueError):
        grow_uniform_partition_tree([[0, 1]], 0, 0)
    with pytest.raises(ValueError):
        grow_uniform_partition_tree([[1, 1]], 2, 0)


# -- forest ---------------------------------------------------------------------

def test_params_validation():
    with pytest.raises(ValueError):
        ForestParams(m=0)
    with pytest.raises(ValueError):
        ForestParams(min_node=0)
    with pytest.raises(ValueError):
        ForestParams(mode="uniform")
    with pytest.raises(ValueError):
        ForestParams(mtry=5).resolve_mtry(3)
    assert ForestParams().resolve_mtry(10) == 4


def test_m1_forest_wraps_grow_tree():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((40, 2))
    Y, A = rng.standard_normal(40), rng.standard_normal(40)
    params = ForestParams(m=1, min_node=3, seed=11)
    f = grow_forest(X, Y, A, params)
    t = grow_tree(X, Y, A, params, 0)
    assert f.m == 1
    np.testing.assert_array_equal(f.trees[0].threshold, t.threshold)


def test_forest_deterministic_and_thread_independent():
    rng = np.random.default_rng(8)
    X = rng.standard_normal((80, 5))
    Y, A = rng.standard_normal(80), rng.standard_normal(80)
    params = ForestParams(m=20, min_node=3, seed=4)
    a = grow_forest(X, Y, A, params, threads=1)
    b = grow_forest(X, Y, A, params, threads=3)
    np.testing.assert_array_equal(a.apply(X), b.apply(X))
    assert all(t.subsample.size == round(0.632 * 80) for t in a.trees)
    assert all(np.unique(t.subsample).size == t.subsample.size for t in a.trees)


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    X = rng.standard_normal((60, 3))
    f = grow_forest(X, rng.standard_normal(60), rng.standard_normal(60),
                    ForestParams(m=6, min_node=2, seed=5, max_depth=4))
    path = tmp_path / "f.bin"
    save_forest(f, path)
    g = load_forest(path)
    assert g.params == f.params
    np.testing.assert_array_equal(g.apply(X), f.apply(X))
    for a, b in zip(f.trees, g.trees):
        np.testing.assert_array_equal(a.subsample, b.subsample)
        assert a.theta == b.theta


def test_load_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a forest")
    with pytest.raises(ForestFormatError):
        load_forest(path)


def test_forest_requires_matching_m():
    t = _stump()
    with pytest.raises(ValueError):
        Forest([t], ForestParams(m=2), [[0, 1]])
