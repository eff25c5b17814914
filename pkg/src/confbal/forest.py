"""Bivariate-response regression forests and uniform random partition forests.

Trees in the data-adaptive mode split on the joint standardized response
``(Y_tilde, A_tilde)`` so that cuts concentrate where covariates predict both
treatment and outcome. The uniform mode ignores the data apart from the
bounding box and exists mainly to test kernel properties that are known to
hold for it.
"""

import ast
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from . import _trees
from .errors import EmptyChild, ForestFormatError

ADAPTIVE = "adaptive"
UNIFORM = "uniform"

_MAGIC = b"CONFBAL-FOREST\x00"
_FORMAT_VERSION = 1
_MIN_GAIN = 1e-12


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("CONFBAL_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class ForestParams:
    """Forest configuration.

    ``mtry=None`` resolves to ``ceil(sqrt(p))`` and ``max_depth=None`` means
    unbounded. ``mode="uniform"`` grows data-independent trees of depth ``k``.
    """

    m: int = 1000
    mtry: Optional[int] = None
    min_node: int = 5
    max_depth: Optional[int] = None
    subsample_fraction: float = 0.632
    replace: bool = False
    mode: str = ADAPTIVE
    k: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.min_node < 1:
            raise ValueError("min_node must be >= 1")
        if not 0.0 < self.subsample_fraction <= 1.0:
            raise ValueError("subsample_fraction must lie in (0, 1]")
        if self.mode not in (ADAPTIVE, UNIFORM):
            raise ValueError(f"unknown forest mode {self.mode!r}")
        if self.mode == UNIFORM and (self.k is None or self.k < 1):
            raise ValueError("uniform partition mode needs k >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")

    def resolve_mtry(self, p: int) -> int:
        mtry = self.mtry if self.mtry is not None else int(math.ceil(math.sqrt(p)))
        if not 1 <= mtry <= p:
            raise ValueError(f"mtry must lie in [1, {p}], got {mtry}")
        return mtry


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf: np.ndarray
    theta: int = 0
    subsample: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    def depth(self) -> int:
        best, stack = 0, [(0, 0)]
        while stack:
            k, d = stack.pop()
            if self.feature[k] < 0:
                best = max(best, d)
            else:
                stack.extend([(self.left[k], d + 1), (self.right[k], d + 1)])
        return best

    def leaf_boxes(self, lower, upper):
        """Axis-aligned box of every leaf, clipped to ``[lower, upper]``.

        Returns a list indexed by leaf id of ``(lo, hi)`` arrays; a point lies in
        a box when ``lo <= x < hi`` coordinatewise.
        """
        boxes = [None] * self.n_leaves
        stack = [(0, np.array(lower, float), np.array(upper, float))]
        while stack:
            k, lo, hi = stack.pop()
            if self.feature[k] < 0:
                boxes[self.leaf[k]] = (lo, hi)
                continue
            j, thr = self.feature[k], self.threshold[k]
            l_hi, r_lo = hi.copy(), lo.copy()
            l_hi[j] = min(hi[j], thr)
            r_lo[j] = max(lo[j], thr)
            stack.append((self.left[k], lo, l_hi))
            stack.append((self.right[k], r_lo, hi))
        return boxes


def _tree_rng(seed: int, tree_index: int) -> np.random.Generator:
    # counter-based: the stream of tree t depends only on (seed, t)
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(tree_index,)))


def split_loss(node_rows, j, x, Y_tilde, A_tilde, X) -> float:
    """Joint split score of cutting feature ``j`` at ``x`` within a node.

    Parent squared error minus the squared error of the two children (each
    predicting its own mean standardized outcome and treatment), every term
    divided by the parent node size.
    """
    rows = np.asarray(node_rows)
    Yn = np.asarray(Y_tilde, float)[rows]
    An = np.asarray(A_tilde, float)[rows]
    xj = np.asarray(X, float)[rows, j]
    lo = xj < x
    hi = ~lo
    if not lo.any() or not hi.any():
        raise EmptyChild(f"threshold {x} on feature {j} leaves a child empty")
    N = rows.shape[0]
    parent = np.sum((Yn - Yn.mean()) ** 2 + (An - An.mean()) ** 2) / N
    left = np.sum((Yn[lo] - Yn[lo].mean()) ** 2 + (An[lo] - An[lo].mean()) ** 2) / N
    right = np.sum((Yn[hi] - Yn[hi].mean()) ** 2 + (An[hi] - An[hi].mean()) ** 2) / N
    return float(parent - left - right)


def _draw_subsample(rng, n_fit, params):
    size = max(1, int(math.floor(params.subsample_fraction * n_fit + 0.5)))
    if params.replace:
        return np.sort(rng.integers(0, n_fit, size=size))
    return np.sort(rng.choice(n_fit, size=size, replace=False))


def grow_response_tree(X, R, params: ForestParams, tree_seed: int) -> Tree:
    """Grow one data-adaptive tree on an arbitrary response matrix ``R``."""
    X = np.ascontiguousarray(X, dtype=float)
    R = np.ascontiguousarray(np.asarray(R, dtype=float).reshape(X.shape[0], -1))
    rng = _tree_rng(params.seed, tree_seed)
    mtry = params.resolve_mtry(X.shape[1])
    sub = _draw_subsample(rng, X.shape[0], params)
    U = rng.random((2 * sub.shape[0] + 1, mtry))
    max_depth = -1 if params.max_depth is None else params.max_depth
    feature, threshold, left, right = _trees.build_tree(
        X, R, sub.astype(np.int64), mtry, params.min_node, max_depth, U, _MIN_GAIN)
    leaf = _trees.number_leaves(feature, left, right)
    return Tree(feature, threshold, left, right, leaf, tree_seed, sub)


def grow_tree(X, Y_tilde, A_tilde, params: ForestParams, tree_seed: int) -> Tree:
    """Grow one tree on the joint standardized response ``(Y_tilde, A_tilde)``.

    At each node ``mtry`` features are drawn without replacement; candidate
    thresholds are midpoints between consecutive distinct values; the best
    split maximizes :func:`split_loss` with ties going to the lowest feature
    index and then the lowest threshold. A node is left unsplit when it has
    fewer than ``2 * min_node`` rows, sits at ``max_depth``, or no admissible
    split has positive score.
    """
    R = np.column_stack([np.asarray(Y_tilde, float), np.asarray(A_tilde, float)])
    return grow_response_tree(X, R, params, tree_seed)


def grow_uniform_partition_tree(feature_ranges, k: int, tree_seed: int, seed: int = 0) -> Tree:
    """Data-independent tree with ``k`` levels of uniformly random cuts.

    Every node picks a feature uniformly among all ``p`` and a threshold
    uniformly on the node's current interval for that feature.
    """
    ranges = np.asarray(feature_ranges, dtype=float)
    if k < 1:
        raise ValueError("k must be >= 1")
    if not np.all(ranges[:, 1] > ranges[:, 0]):
        raise ValueError("every feature range needs max > min")
    rng = _tree_rng(seed, tree_seed)
    p = ranges.shape[0]
    n_nodes = 2 ** (k + 1) - 1
    feature = np.full(n_nodes, -1, dtype=np.int64)
    threshold = np.zeros(n_nodes)
    left = np.full(n_nodes, -1, dtype=np.int64)
    right = np.full(n_nodes, -1, dtype=np.int64)

    count = 1
    stack = [(0, ranges[:, 0].copy(), ranges[:, 1].copy(), 0)]
    while stack:
        node, lo, hi, depth = stack.pop()
        if depth == k:
            continue
        j = int(rng.integers(p))
        thr = lo[j] + rng.random() * (hi[j] - lo[j])
        feature[node], threshold[node] = j, thr
        left[node], right[node] = count, count + 1
        count += 2
        l_hi, r_lo = hi.copy(), lo.copy()
        l_hi[j] = thr
        r_lo[j] = thr
        stack.append((right[node], r_lo, hi, depth + 1))
        stack.append((left[node], lo, l_hi, depth + 1))
    leaf = _trees.number_leaves(feature, left, right)
    return Tree(feature, threshold, left, right, leaf, tree_seed)


class Forest:
    """A fitted collection of trees sharing one set of parameters."""

    def __init__(self, trees: List[Tree], params: ForestParams, feature_ranges):
        if len(trees) != params.m:
            raise ValueError("number of trees does not match params.m")
        self.trees = list(trees)
        self.params = params
        self.feature_ranges = np.asarray(feature_ranges, dtype=float)
        self._packed = None

    @property
    def m(self) -> int:
        return len(self.trees)

    @property
    def p(self) -> int:
        return self.feature_ranges.shape[0]

    def _pack(self):
        if self._packed is None:
            sizes = np.array([t.n_nodes for t in self.trees], dtype=np.int64)
            offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
            self._packed = (
                np.concatenate([t.feature for t in self.trees]).astype(np.int64),
                np.concatenate([t.threshold for t in self.trees]).astype(float),
                np.concatenate([t.left for t in self.trees]).astype(np.int64),
                np.concatenate([t.right for t in self.trees]).astype(np.int64),
                np.concatenate([t.leaf for t in self.trees]).astype(np.int64),
                offsets,
            )
        return self._packed

    def apply(self, X) -> np.ndarray:
        """Leaf ids, shape ``(n, m)``."""
        X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=float)))
        if X.shape[1] != self.p:
            raise ValueError(f"expected {self.p} covariates, got {X.shape[1]}")
        out = np.empty((X.shape[0], self.m), dtype=np.int64)
        return _trees.route(X, *self._pack(), out)

    def n_leaves(self) -> np.ndarray:
        return np.array([t.n_leaves for t in self.trees])

    def subset(self, m: int) -> "Forest":
        """The first ``m`` trees, as a forest of their own (nested tree sets)."""
        return Forest(self.trees[:m], replace(self.params, m=m), self.feature_ranges)


def grow_forest(X, Y_tilde=None, A_tilde=None, params: ForestParams = ForestParams(),
                threads: Optional[int] = None, responses=None) -> Forest:
    """Grow ``params.m`` trees.

    Tree ``t`` draws its randomness from ``(params.seed, t)`` alone, so the
    forest does not depend on ``threads`` or scheduling. ``responses`` replaces
    the joint standardized pair with an arbitrary response matrix (used by the
    propensity forest).
    """
    X = np.ascontiguousarray(X, dtype=float)
    ranges = np.column_stack([X.min(axis=0), X.max(axis=0)])
    threads = threads or default_threads()

    if params.mode == UNIFORM:
        def one(t):
            return grow_uniform_partition_tree(ranges, params.k, t, params.seed)
    else:
        if responses is None:
            responses = np.column_stack([np.asarray(Y_tilde, float), np.asarray(A_tilde, float)])
        R = np.ascontiguousarray(np.asarray(responses, float).reshape(X.shape[0], -1))

        def one(t):
            return grow_response_tree(X, R, params, t)

    if threads > 1 and params.m > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trees = list(pool.map(one, range(params.m)))
    else:
        trees = [one(t) for t in range(params.m)]
    return Forest(trees, params, ranges)


def leaf_id(tree: Tree, x) -> int:
    """Route a single point down ``tree`` (``x[j] >= threshold`` goes right)."""
    x = np.asarray(x, dtype=float).ravel()
    k = 0
    while tree.feature[k] >= 0:
        k = tree.left[k] if x[tree.feature[k]] < tree.threshold[k] else tree.right[k]
    return int(tree.leaf[k])


# -- serialization ------------------------------------------------------------

def save_forest(forest: Forest, path):
    """Write a forest as a magic header followed by an ``.npz`` payload."""
    p = forest.params
    feature, threshold, left, right, leaf, offsets = forest._pack()
    sub_sizes = np.array([t.subsample.shape[0] for t in forest.trees], dtype=np.int64)
    payload = io.BytesIO()
    np.savez(
        payload,
        version=np.array(_FORMAT_VERSION),
        feature=feature, threshold=threshold, left=left, right=right, leaf=leaf,
        offsets=offsets,
        theta=np.array([t.theta for t in forest.trees], dtype=np.int64),
        subsample=np.concatenate([t.subsample for t in forest.trees]).astype(np.int64),
        subsample_sizes=sub_sizes,
        feature_ranges=forest.feature_ranges,
        params=np.array([repr(_params_dict(p))]),
    )
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(payload.getvalue())


def _params_dict(p: ForestParams) -> dict:
    return dict(m=p.m, mtry=p.mtry, min_node=p.min_node, max_depth=p.max_depth,
                subsample_fraction=p.subsample_fraction, replace=p.replace,
                mode=p.mode, k=p.k, seed=p.seed)


def load_forest(path) -> Forest:
    with open(path, "rb") as fh:
        head = fh.read(len(_MAGIC))
        if head != _MAGIC:
            raise ForestFormatError(f"{path}: not a forest file")
        data = np.load(io.BytesIO(fh.read()), allow_pickle=False)
    if int(data["version"]) != _FORMAT_VERSION:
        raise ForestFormatError(f"{path}: unsupported format version {int(data['version'])}")
    params = ForestParams(**ast.literal_eval(str(data["params"][0])))
    offsets = data["offsets"]
    sub_off = np.concatenate([[0], np.cumsum(data["subsample_sizes"])])
    trees = []
    for t in range(offsets.shape[0] - 1):
        s = slice(offsets[t], offsets[t + 1])
        trees.append(Tree(data["feature"][s].copy(), data["threshold"][s].copy(),
                          data["left"][s].copy(), data["right"][s].copy(),
                          data["leaf"][s].copy(), int(data["theta"][t]),
                          data["subsample"][sub_off[t]:sub_off[t + 1]].copy()))
    return Forest(trees, params, data["feature_ranges"])
