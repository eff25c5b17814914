"""Kernel MMD balancing weights.

The weights minimize

    MMD^2(F_{n,1,w}, F_n) + MMD^2(F_{n,0,w}, F_n) + (lam / 2) * ||w||^2

subject to ``sum_{i in S_a} w_i = n_a`` for both arms (and ``w >= 0`` unless
disabled). The objective splits into one convex quadratic per arm, which the
solver exploits by only ever multiplying with the within-arm Gram blocks.
"""

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import InvariantError, NotConvergedWarning, SingularSystem
from .kernel import GramMatrix


def _values(gram):
    return gram.values if isinstance(gram, GramMatrix) else np.asarray(gram, dtype=float)


@dataclass(frozen=True)
class BalancingProblem:
    gram: np.ndarray
    A: np.ndarray
    lam: float
    nonneg: bool = True

    def __post_init__(self):
        K = _values(self.gram)
        A = np.asarray(self.A).astype(np.int64).ravel()
        if K.ndim != 2 or K.shape[0] != K.shape[1] or K.shape[0] != A.shape[0]:
            raise InvariantError("gram must be square with one row per unit")
        if not np.all((A == 0) | (A == 1)):
            raise InvariantError("treatment must be coded 0/1")
        if A.sum() == 0 or A.sum() == A.shape[0]:
            raise InvariantError("both treatment groups must be nonempty")
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise InvariantError("lambda must be finite and >= 0")
        object.__setattr__(self, "gram", K)
        object.__setattr__(self, "A", A)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def groups(self):
        """``[(indices, n_a)]`` for a = 0, 1."""
        out = []
        for a in (0, 1):
            idx = np.flatnonzero(self.A == a)
            out.append((idx, idx.shape[0]))
        return out

    def quadratic(self):
        """``(H, c, const)`` with objective ``0.5 w'Hw + c'w + const``."""
        K, n = self.gram, self.n
        H = self.lam * np.eye(n)
        c = np.zeros(n)
        rows = K.sum(axis=1)
        for idx, na in self.groups():
            H[np.ix_(idx, idx)] += 2.0 * K[np.ix_(idx, idx)] / na ** 2
            c[idx] = -2.0 * rows[idx] / (na * n)
        const = 2.0 * K.sum() / n ** 2
        return H, c, const


@dataclass
class WeightSolution:
    w: np.ndarray
    objective: float
    constraint_residual: float
    kkt_residual: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list, repr=False)


def mmd_squared(gram, w, a, A) -> float:
    """Squared MMD between the weighted arm ``a`` and the full sample.

    Evaluates the three double sums of the quadratic expansion as written:
    cross term, weighted within-arm term, full-sample term.
    """
    K = _values(gram)
    w = np.asarray(w, dtype=float)
    ind = (np.asarray(A) == a).astype(float)
    n = K.shape[0]
    na = ind.sum()
    wi = w * ind
    cross = -2.0 / (na * n) * np.sum(wi[:, None] * K)
    within = np.sum(np.outer(wi, wi) * K) / na ** 2
    full = np.sum(K) / n ** 2
    return float(cross + within + full)


def objective(problem: BalancingProblem, w) -> float:
    w = np.asarray(w, dtype=float)
    return (mmd_squared(problem.gram, w, 1, problem.A)
            + mmd_squared(problem.gram, w, 0, problem.A)
            + 0.5 * problem.lam * float(w @ w))


def project_group_simplex(v, total: float) -> np.ndarray:
    """Euclidean projection onto ``{u >= 0, sum(u) = total}`` (sort and threshold)."""
    if not total > 0:
        raise ValueError("total must be positive")
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - total
    k = np.arange(1, v.shape[0] + 1)
    rho = np.flatnonzero(u - css / k > 0)[-1]
    theta = css[rho] / (rho + 1.0)
    out = np.maximum(v - theta, 0.0)
    s = out.sum()
    if s > 0:
        out *= total / s
    return out


def project_group_affine(v, total: float) -> np.ndarray:
    """Euclidean projection onto the hyperplane ``sum(u) = total``."""
    v = np.asarray(v, dtype=float)
    return v - (v.sum() - total) / v.shape[0]


def kkt_solve_equality(problem: BalancingProblem) -> np.ndarray:
    """Equality-constrained minimizer from the dense KKT system.

    Solves ``[[H, C'], [C, 0]] [w; mu] = [-c; b]`` where ``C`` holds the two arm
    indicator rows and ``b = (n_1, n_0)``. Ignores ``problem.nonneg``.
    """
    H, c, _ = problem.quadratic()
    n = problem.n
    C = np.vstack([(problem.A == 1).astype(float), (problem.A == 0).astype(float)])
    b = C.sum(axis=1)
    M = np.zeros((n + 2, n + 2))
    M[:n, :n] = H
    M[:n, n:] = C.T
    M[n:, :n] = C
    rhs = np.concatenate([-c, b])
    try:
        with warnings.catch_warnings():
            # singularity is detected from the pivots below
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            lu, piv = scipy.linalg.lu_factor(M, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SingularSystem(str(exc)) from exc
    diag = np.abs(np.diag(lu))
    if diag.min() <= 1e-13 * max(diag.max(), 1.0):
        raise SingularSystem("KKT matrix is numerically singular (is lambda > 0?)")
    return scipy.linalg.lu_solve((lu, piv), rhs)[:n]


class _ArmQuadratic:
    """One arm's share of the objective: w'Kw/na^2 - 2 w'r/(na n) + (lam/2)||w||^2."""

    def __init__(self, K_aa, r_a, na, n, lam, nonneg):
        self.K = np.ascontiguousarray(K_aa)
        self.lin = -2.0 * r_a / (na * n)
        self.q = 1.0 / na ** 2
        self.na = float(na)
        self.lam = lam
        self.project = project_group_simplex if nonneg else project_group_affine

    def value(self, w, Kw):
        return float(self.q * (w @ Kw) + self.lin @ w + 0.5 * self.lam * (w @ w))

    def grad(self, w, Kw):
        return 2.0 * self.q * Kw + self.lin + self.lam * w

    def curvature(self, d, Kd):
        return float(2.0 * self.q * (d @ Kd) + self.lam * (d @ d))


def solve_weights(problem: BalancingProblem, max_iter: int = 50000, tol: float = 1e-16,
                  gtol: float = 1e-10, record_trace: bool = False,
                  w0: Optional[np.ndarray] = None) -> WeightSolution:
    """Projected gradient descent with spectral steps and backtracking.

    Each iteration takes a gradient step, projects each arm onto its constraint
    set (scaled simplex with ``nonneg``, hyperplane otherwise) and halves the
    step until the projected-gradient sufficient decrease condition holds, so
    the objective never increases. The next trial step is the Barzilai-Borwein
    ratio ``s's / s'y``.

    Iteration stops when the stationarity residual ``||w - P(w - grad)||_inf``
    drops to ``gtol``, or when the relative objective decrease has stayed below
    ``tol`` for 25 consecutive iterations, or at ``max_iter``.
    """
    K, n = problem.gram, problem.n
    rows = K.sum(axis=1)
    arms, idxs = [], []
    for idx, na in problem.groups():
        arms.append(_ArmQuadratic(K[np.ix_(idx, idx)], rows[idx], na, n, problem.lam, problem.nonneg))
        idxs.append(idx)
    const = 2.0 * K.sum() / n ** 2

    if w0 is None:
        ws = [np.ones(idx.shape[0]) for idx in idxs]
    else:
        w0 = np.asarray(w0, dtype=float)
        ws = [arm.project(w0[idx], arm.na) for arm, idx in zip(arms, idxs)]
    Kws = [arm.K @ w for arm, w in zip(arms, ws)]

    # Gershgorin bound on the Hessian, used for the first and fallback steps
    L = max(2.0 * arm.q * np.abs(arm.K).sum(axis=1).max() + arm.lam for arm in arms)
    L = L if L > 0 else 1.0

    def total(ws_, Kws_):
        return sum(arm.value(w, Kw) for arm, w, Kw in zip(arms, ws_, Kws_)) + const

    def stationarity(ws_, gs_):
        return max(float(np.max(np.abs(w - arm.project(w - g, arm.na))))
                   for arm, w, g in zip(arms, ws_, gs_))

    f = total(ws, Kws)
    gs = [arm.grad(w, Kw) for arm, w, Kw in zip(arms, ws, Kws)]
    kkt = stationarity(ws, gs)
    trace = []
    if record_trace:
        trace.append((0, f, _constraint_residual(ws, arms), kkt))
    step = 1.0 / L
    small = 0
    converged = kkt <= gtol
    it = 0
    while not converged and it < max_iter:
        it += 1
        while True:
            new_ws = [arm.project(w - step * g, arm.na) for arm, w, g in zip(arms, ws, gs)]
            ds = [nw - w for nw, w in zip(new_ws, ws)]
            Kds = [arm.K @ d for arm, d in zip(arms, ds)]
            gd = sum(float(g @ d) for g, d in zip(gs, ds))
            dd = sum(float(d @ d) for d in ds)
            curv = sum(arm.curvature(d, Kd) for arm, d, Kd in zip(arms, ds, Kds))
            decrease = gd + 0.5 * curv
            if dd == 0.0 or decrease <= gd + dd / (2.0 * step) or step < 1e-20:
                break
            step *= 0.5
        if dd == 0.0:
            converged = True
            break
        ws = new_ws
        if it % 200 == 0:
            Kws = [arm.K @ w for arm, w in zip(arms, ws)]
        else:
            Kws = [Kw + Kd for Kw, Kd in zip(Kws, Kds)]
        # the exact quadratic decrease stays accurate below the rounding level of f
        rel = -decrease / max(abs(f), 1e-300)
        f = total(ws, Kws)
        gs = [arm.grad(w, Kw) for arm, w, Kw in zip(arms, ws, Kws)]
        kkt = stationarity(ws, gs)
        if record_trace:
            trace.append((it, f, _constraint_residual(ws, arms), kkt))
        step = dd / curv if curv > 0 else 1.0 / L
        small = small + 1 if rel < tol else 0
        if kkt <= gtol or small >= 25:
            converged = True

    w = np.empty(n)
    for idx, wa in zip(idxs, ws):
        w[idx] = wa
    if not converged:
        warnings.warn(f"weight solver stopped after {max_iter} iterations "
                      f"(stationarity residual {kkt:.3g})", NotConvergedWarning, stacklevel=2)
    return WeightSolution(w, objective(problem, w), _constraint_residual(ws, arms), kkt,
                          it, converged, trace)


def _constraint_residual(ws, arms):
    return max(abs(float(w.sum()) - arm.na) for w, arm in zip(ws, arms))


# Ridge penalty used when none is given, as a multiple of 1 / n.
DEFAULT_LAMBDA_SCALE = 1e-2


def default_lambda(n: int) -> float:
    """``DEFAULT_LAMBDA_SCALE / n``: vanishes with ``n`` but keeps weights from overfitting the Gram."""
    return DEFAULT_LAMBDA_SCALE / n


# -- export -------------------------------------------------------------------

def write_weights_csv(path, w, A, rows=None):
    """Columns ``row, treatment, weight``; ``rows`` defaults to 0..n-1."""
    w = np.asarray(w, dtype=float)
    rows = np.arange(w.shape[0]) if rows is None else np.asarray(rows)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["row", "treatment", "weight"])
        for r, a, wi in zip(rows, np.asarray(A), w):
            out.writerow([int(r), int(a), format(wi, ".17g")])


def read_weights_csv(path, n=None):
    """Read a file written by :func:`write_weights_csv`.

    Returns ``(w, mask)`` of length ``n`` (default: largest row index + 1);
    rows absent from the file get weight 0 and ``mask`` False.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        pairs = [(int(r["row"]), float(r["weight"])) for r in reader]
    if n is None:
        n = max((r for r, _ in pairs), default=-1) + 1
    w = np.zeros(n)
    mask = np.zeros(n, dtype=bool)
    for r, wi in pairs:
        if not 0 <= r < n:
            raise ValueError(f"weight file row {r} out of range for {n} rows")
        w[r] = wi
        mask[r] = True
    return w, mask


def write_trace_csv(path, trace):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["iteration", "objective", "constraint_residual", "kkt_residual"])
        for it, f, cres, kkt in trace:
            out.writerow([it, format(f, ".17g"), format(cres, ".17g"), format(kkt, ".17g")])
