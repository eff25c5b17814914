"""Co-leaf random forest kernel, Gaussian comparator kernel and Gram utilities."""

import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.spatial.distance import cdist, pdist

from .errors import DegenerateData, InvalidBandwidth
from .forest import Forest, leaf_id

RANDOM_FOREST = "random_forest"
GAUSSIAN = "gaussian"

_GRAM_MAGIC = b"CONFBAL-GRAM\x00"


@dataclass(frozen=True)
class GramMatrix:
    values: np.ndarray
    source: str = RANDOM_FOREST
    bandwidth: Optional[float] = None

    @property
    def n(self) -> int:
        return self.values.shape[0]


def rf_kernel(forest: Forest, x1, x2) -> float:
    """Fraction of trees in which ``x1`` and ``x2`` land in the same leaf."""
    same = sum(leaf_id(t, x1) == leaf_id(t, x2) for t in forest.trees)
    return same / forest.m


def co_leaf_counts(leaves: np.ndarray) -> np.ndarray:
    """Integer matrix counting, for each pair of rows, the trees they share a leaf in.

    ``leaves`` is the ``(n, m)`` output of :meth:`Forest.apply`. Each tree's
    leaf ids become one block of columns in a sparse 0/1 membership matrix
    ``Z``; the counts are ``Z @ Z.T``.
    """
    n, m = leaves.shape
    width = leaves.max(axis=0) + 1
    offsets = np.concatenate([[0], np.cumsum(width)[:-1]])
    cols = (leaves + offsets[None, :]).ravel()
    rows = np.repeat(np.arange(n), m)
    Z = sparse.csr_matrix((np.ones(n * m, dtype=np.int64), (rows, cols)),
                          shape=(n, int(width.sum())))
    return (Z @ Z.T).toarray()


def rf_gram(forest: Forest, X_eval) -> GramMatrix:
    """Gram matrix of the co-leaf kernel over the rows of ``X_eval``.

    Counts are accumulated as integers and divided by ``m`` once, so the result
    is exactly symmetric with unit diagonal and does not depend on tree order.
    """
    leaves = forest.apply(X_eval)
    K = co_leaf_counts(leaves) / forest.m
    return GramMatrix(K, RANDOM_FOREST)


def gaussian_gram(X, bandwidth: float) -> GramMatrix:
    """``exp(-||x_i - x_j||^2 / (2 * bandwidth^2))``."""
    if not (np.isfinite(bandwidth) and bandwidth > 0):
        raise InvalidBandwidth(f"bandwidth must be positive and finite, got {bandwidth}")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    d2 = cdist(X, X, "sqeuclidean")
    K = np.exp(-d2 / (2.0 * bandwidth ** 2))
    K = 0.5 * (K + K.T)
    np.fill_diagonal(K, 1.0)
    return GramMatrix(K, GAUSSIAN, float(bandwidth))


def median_heuristic(X, max_rows: int = 2000, seed: int = 0) -> float:
    """Median pairwise Euclidean distance, on a seeded row subsample above ``max_rows``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] < 2:
        raise DegenerateData("need at least two rows")
    if X.shape[0] > max_rows:
        rows = np.random.default_rng(seed).choice(X.shape[0], size=max_rows, replace=False)
        X = X[np.sort(rows)]
    med = float(np.median(pdist(X)))
    if med == 0.0:
        raise DegenerateData("median pairwise distance is zero")
    return med


def psd_check(g, tol: float = 1e-8):
    """Return ``(passes, lambda_min)``; passes when ``lambda_min >= -tol * max(lambda_max, 0)``.

    ``tol`` is relative to the largest eigenvalue (absolute when that is not
    positive).
    """
    K = g.values if isinstance(g, GramMatrix) else np.asarray(g, dtype=float)
    eig = np.linalg.eigvalsh(0.5 * (K + K.T))
    lam_min, lam_max = float(eig[0]), float(eig[-1])
    scale = lam_max if lam_max > 0 else 1.0
    return lam_min >= -tol * scale, lam_min


# -- export / cache -----------------------------------------------------------

def write_gram_csv(g: GramMatrix, path):
    np.savetxt(path, g.values, delimiter=",", fmt="%.17g")


def forest_hash(forest: Forest) -> str:
    h = hashlib.sha256()
    for arr in forest._pack():
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(np.ascontiguousarray(forest.feature_ranges).tobytes())
    return h.hexdigest()


def gram_cache_key(forest: Forest, X_eval) -> str:
    h = hashlib.sha256(forest_hash(forest).encode())
    h.update(np.ascontiguousarray(np.asarray(X_eval, dtype=float)).tobytes())
    return h.hexdigest()


def save_gram_cache(g: GramMatrix, key: str, path):
    with open(path, "wb") as fh:
        fh.write(_GRAM_MAGIC)
        fh.write(key.encode("ascii").ljust(64))
        np.save(fh, g.values, allow_pickle=False)


def load_gram_cache(path, key: str) -> Optional[GramMatrix]:
    """Cached Gram for ``key``, or ``None`` when the file is absent or stale."""
    try:
        with open(path, "rb") as fh:
            if fh.read(len(_GRAM_MAGIC)) != _GRAM_MAGIC:
                return None
            if fh.read(64).decode("ascii").strip() != key:
                return None
            return GramMatrix(np.load(fh, allow_pickle=False), RANDOM_FOREST)
    except FileNotFoundError:
        return None
