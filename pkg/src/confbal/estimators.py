"""Weighted ATE estimation and the comparator weighting methods."""

import csv
import enum
import os
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import expit

from .data import Dataset, split_sample, standardize_pair
from .errors import DegenerateWeights, NotConvergedWarning
from .forest import ForestParams, grow_forest
from .kernel import gaussian_gram, median_heuristic, rf_gram
from .weights import BalancingProblem, WeightSolution, default_lambda, solve_weights


class Method(str, enum.Enum):
    RF_KERNEL_MMD = "rf-kernel-mmd"
    GAUSSIAN_MMD = "gaussian-mmd"
    LOGISTIC_IPW = "logistic-ipw"
    RF_IPW = "rf-ipw"

    def __str__(self):
        return self.value


ALL_METHODS = tuple(Method)

# Leaf size of the kernel forest. Leaves of a handful of rows make the
# co-leaf kernel close to diagonal on the evaluation half, and the balancing
# weights then chase noise; 30 keeps neighbourhoods wide enough to pool both arms.
KERNEL_MIN_NODE = 30


@dataclass(frozen=True)
class EstimateConfig:
    """Settings shared by every method.

    ``forest`` configures the kernel forest and ``propensity_forest`` the
    forest behind rf-ipw. ``lam=None`` uses :func:`default_lambda` of ``n`` with
    ``n`` the number of rows being weighted. ``bandwidth=None`` applies the
    median heuristic to the (column standardized) covariates.
    """

    forest: ForestParams = field(default_factory=lambda: ForestParams(min_node=KERNEL_MIN_NODE))
    propensity_forest: ForestParams = field(default_factory=ForestParams)
    lam: Optional[float] = None
    nonneg: bool = True
    fit_fraction: float = 0.5
    seed: int = 0
    bandwidth: Optional[float] = None
    scale_gaussian: bool = True
    clip: tuple = (0.01, 0.99)
    threads: Optional[int] = None
    max_iter: int = 50000
    record_trace: bool = False

    def with_seed(self, seed: int) -> "EstimateConfig":
        return replace(self, seed=int(seed))


@dataclass
class AteEstimate:
    """Result of :func:`estimate_ate`.

    ``weights`` has one entry per row of the input; rows that were only used to
    fit the forest (rf-kernel-mmd) carry weight 0 and are marked ``False`` in
    ``eval_mask``.
    """

    tau_hat: float
    method: Method
    weights: np.ndarray
    eval_mask: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    solution: Optional[WeightSolution] = field(default=None, repr=False)


def weighted_ate(d: Dataset, w) -> float:
    """Hajek weighted difference in means."""
    w = np.asarray(w, dtype=float)
    if w.shape[0] != d.n:
        raise ValueError("need one weight per unit")
    t = d.A == 1
    s1, s0 = w[t].sum(), w[~t].sum()
    if not (s1 > 0 and s0 > 0):
        raise DegenerateWeights(f"group weight sums must be positive (treated {s1}, control {s0})")
    return float(w[t] @ d.Y[t] / s1 - w[~t] @ d.Y[~t] / s0)


def fit_logistic_propensity(d: Dataset, max_iter: int = 100, tol: float = 1e-8,
                            ridge: float = 1e-6) -> np.ndarray:
    """Main-effects logistic regression fitted by iteratively reweighted least squares.

    A fixed ``ridge`` is added to the Hessian so separated data still give
    finite coefficients; in that case the iteration cap is hit and a
    :class:`NotConvergedWarning` is issued.
    """
    Z = np.column_stack([np.ones(d.n), d.X])
    a = d.A.astype(float)
    beta = np.zeros(Z.shape[1])
    p0 = a.mean()
    beta[0] = np.log(p0 / (1 - p0))
    converged = False
    for _ in range(max_iter):
        pi = expit(Z @ beta)
        W = pi * (1 - pi)
        H = (Z * W[:, None]).T @ Z + ridge * np.eye(Z.shape[1])
        step = np.linalg.solve(H, Z.T @ (a - pi))
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            converged = True
            break
    if not converged:
        warnings.warn("logistic propensity model did not converge; using last iterate",
                      NotConvergedWarning, stacklevel=2)
    return expit(Z @ beta)


def fit_rf_propensity(d: Dataset, params: ForestParams = ForestParams(),
                      clip=(0.01, 0.99), threads=None) -> np.ndarray:
    """Out-of-bag regression-forest estimate of P(A = 1 | X), clipped to ``clip``.

    Each unit is predicted only by trees whose subsample excluded it; units
    that are in every subsample fall back to the all-tree average.
    """
    a = d.A.astype(float)
    forest = grow_forest(d.X, params=params, responses=a[:, None], threads=threads)
    leaves = forest.apply(d.X)
    total = np.zeros(d.n)
    count = np.zeros(d.n)
    every = np.zeros(d.n)
    for t, tree in enumerate(forest.trees):
        sub = tree.subsample
        L = tree.n_leaves
        s = np.bincount(leaves[sub, t], weights=a[sub], minlength=L)
        c = np.bincount(leaves[sub, t], minlength=L)
        value = np.divide(s, c, out=np.full(L, a.mean()), where=c > 0)
        pred = value[leaves[:, t]]
        oob = np.ones(d.n, dtype=bool)
        oob[sub] = False
        total[oob] += pred[oob]
        count[oob] += 1
        every += pred
    pi = np.where(count > 0, total / np.maximum(count, 1), every / forest.m)
    return np.clip(pi, *clip)


def ipw_weights(pi_hat, A) -> np.ndarray:
    """Inverse propensity weights rescaled so each arm's weights sum to its size."""
    pi_hat = np.asarray(pi_hat, dtype=float)
    A = np.asarray(A)
    w = np.where(A == 1, 1.0 / pi_hat, 1.0 / (1.0 - pi_hat))
    for a in (0, 1):
        g = A == a
        if g.any():
            w[g] *= g.sum() / w[g].sum()
    return w


def limiting_weights(pi, A) -> np.ndarray:
    """Normalized inverse-propensity weights that balancing weights approach as n grows.

    ``w*_i = A_i * pbar / pi_i + (1 - A_i) * (1 - pbar) / (1 - pi_i)`` with
    ``pbar = n_1 / n`` estimated from ``A``.
    """
    pi = np.asarray(pi, dtype=float)
    A = np.asarray(A)
    pbar = A.mean()
    return np.where(A == 1, pbar / pi, (1.0 - pbar) / (1.0 - pi))


def _derived_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([int(seed), stream]).generate_state(1)[0])


def rf_kernel_weights(d: Dataset, config: EstimateConfig):
    """Split, grow the joint forest on the fit part, balance the evaluation part."""
    split = split_sample(d, config.fit_fraction, config.seed)
    fit = d.subset(split.fit_indices)
    pair = standardize_pair(fit.Y, fit.A)
    params = replace(config.forest, seed=_derived_seed(config.seed, 1))
    forest = grow_forest(fit.X, pair.Y_tilde, pair.A_tilde, params, threads=config.threads)
    ev = split.eval_indices
    gram = rf_gram(forest, d.X[ev])
    lam = config.lam if config.lam is not None else default_lambda(ev.shape[0])
    sol = solve_weights(BalancingProblem(gram, d.A[ev], lam, config.nonneg), max_iter=config.max_iter,
                       record_trace=config.record_trace)
    w = np.zeros(d.n)
    w[ev] = sol.w
    mask = np.zeros(d.n, dtype=bool)
    mask[ev] = True
    return w, mask, sol, {"forest": forest, "split": split, "lambda": lam, "gram": gram}


def gaussian_kernel_weights(d: Dataset, config: EstimateConfig):
    X = d.X
    if config.scale_gaussian:
        sd = X.std(axis=0, ddof=1)
        X = (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    bw = config.bandwidth if config.bandwidth is not None else median_heuristic(X, seed=config.seed)
    gram = gaussian_gram(X, bw)
    lam = config.lam if config.lam is not None else default_lambda(d.n)
    sol = solve_weights(BalancingProblem(gram, d.A, lam, config.nonneg), max_iter=config.max_iter,
                       record_trace=config.record_trace)
    return sol.w, np.ones(d.n, dtype=bool), sol, {"bandwidth": bw, "lambda": lam, "gram": gram}


def estimate_ate(d: Dataset, method, config: EstimateConfig = EstimateConfig()) -> AteEstimate:
    """Run one weighting method end to end and return the Hajek ATE estimate."""
    method = Method(method)
    d.require_both_groups()
    start = time.perf_counter()
    sol = None
    if method is Method.RF_KERNEL_MMD:
        w, mask, sol, extra = rf_kernel_weights(d, config)
    elif method is Method.GAUSSIAN_MMD:
        w, mask, sol, extra = gaussian_kernel_weights(d, config)
    elif method is Method.LOGISTIC_IPW:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", NotConvergedWarning)
            pi = fit_logistic_propensity(d)
        for c in caught:
            warnings.warn(c.message, c.category, stacklevel=2)
        w, mask = ipw_weights(pi, d.A), np.ones(d.n, dtype=bool)
        extra = {"propensity": pi, "converged": not caught}
    else:
        params = replace(config.propensity_forest, seed=_derived_seed(config.seed, 2))
        pi = fit_rf_propensity(d, params, config.clip, threads=config.threads)
        w, mask = ipw_weights(pi, d.A), np.ones(d.n, dtype=bool)
        extra = {"propensity": pi}
    tau = weighted_ate(d, w)
    extra["runtime"] = time.perf_counter() - start
    return AteEstimate(tau, method, w, mask, extra, sol)


RESULT_COLUMNS = ("method", "tau_hat", "n", "p", "seed", "runtime")


def append_result_row(path, est: AteEstimate, d: Dataset, seed: int):
    """Append ``method, tau_hat, n, p, seed, runtime`` to ``path`` (header on first write)."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        if new:
            out.writerow(RESULT_COLUMNS)
        out.writerow([str(est.method), format(est.tau_hat, ".17g"), d.n, d.p, int(seed),
                      format(est.diagnostics.get("runtime", float("nan")), ".6g")])
