"""Covariate balance, univariate association statistics and bootstrap standard errors."""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import stats

from .data import Dataset
from .errors import DegenerateWeights, ResampleDegenerate, ZeroPooledSd
from .estimators import EstimateConfig, estimate_ate

CONTINUOUS = "continuous"
DISCRETE = "discrete"

#: written into output metadata so readers know which SMD convention was used
SMD_CONVENTION = ("|weighted treated mean - weighted control mean| / "
                  "sqrt((s1^2 + s0^2) / 2), unweighted group variances (ddof=1)")

_MAX_REDRAWS = 100


def covariate_names(d: Dataset):
    if d.covariate_names:
        return list(d.covariate_names)
    return [f"x{j + 1}" for j in range(d.p)]


# -- standardized mean differences --------------------------------------------

def smd(x_col, A, w=None) -> float:
    """Absolute standardized mean difference of one covariate.

    Group means use the weights ``w`` when given; the denominator always uses
    the unweighted group variances so values before and after weighting share
    a yardstick.
    """
    x = np.asarray(x_col, dtype=float)
    t = np.asarray(A) == 1
    if not t.any() or t.all():
        raise ValueError("both treatment groups must be nonempty")
    w = np.ones_like(x) if w is None else np.asarray(w, dtype=float)
    s1, s0 = w[t].sum(), w[~t].sum()
    if not (s1 > 0 and s0 > 0):
        raise DegenerateWeights("group weight sums must be positive")
    diff = w[t] @ x[t] / s1 - w[~t] @ x[~t] / s0
    v1 = x[t].var(ddof=1) if t.sum() > 1 else 0.0
    v0 = x[~t].var(ddof=1) if (~t).sum() > 1 else 0.0
    pooled = np.sqrt((v1 + v0) / 2.0)
    if pooled == 0.0:
        raise ZeroPooledSd("both group variances are zero")
    return float(abs(diff) / pooled)


@dataclass
class BalanceReport:
    """Per-covariate SMD before and after weighting, sorted by reduction (descending).

    Covariates whose pooled sd is zero get NaN entries and sort last.
    """

    rows: list = field(default_factory=list)

    def column(self, key) -> np.ndarray:
        return np.array([r[key] for r in self.rows], dtype=float)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, ["name", "smd_before", "smd_after", "reduction"])
            wr.writeheader()
            for r in self.rows:
                wr.writerow({k: _fmt(v) for k, v in r.items()})

    def write_love_plot_csv(self, path):
        """Long format ``covariate, phase, smd`` with phase in {before, after}."""
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["covariate", "phase", "smd"])
            for r in self.rows:
                wr.writerow([r["name"], "before", _fmt(r["smd_before"])])
                wr.writerow([r["name"], "after", _fmt(r["smd_after"])])


def balance_report(d: Dataset, w, mask=None) -> BalanceReport:
    """SMD of every covariate before and after weighting by ``w``.

    ``mask`` restricts both phases to the rows that were weighted (the
    evaluation half for rf-kernel-mmd), so the reduction reflects the weights
    and not a change of sample.
    """
    w = np.asarray(w, dtype=float)
    rows_idx = np.arange(d.n) if mask is None else np.flatnonzero(mask)
    A = d.A[rows_idx]
    wm = w[rows_idx]
    rows = []
    for j, name in enumerate(covariate_names(d)):
        x = d.X[rows_idx, j]
        try:
            before, after = smd(x, A), smd(x, A, wm)
        except ZeroPooledSd:
            before = after = float("nan")
        rows.append({"name": name, "smd_before": before, "smd_after": after,
                     "reduction": before - after})
    order = sorted(range(len(rows)),
                   key=lambda i: (np.isnan(rows[i]["reduction"]), -np.nan_to_num(rows[i]["reduction"])))
    return BalanceReport([rows[i] for i in order])


# -- association statistics ---------------------------------------------------

@dataclass
class AssociationReport:
    """Per-covariate association with treatment and with outcome.

    ``stat_*`` are absolute Welch t statistics (continuous covariates) or
    square roots of chi-square statistics (discrete covariates). Rows where a
    test is undefined carry NaN.
    """

    rows: list = field(default_factory=list)

    def column(self, key) -> np.ndarray:
        return np.array([r[key] for r in self.rows], dtype=float)

    def write_csv(self, path):
        keys = ["name", "kind", "stat_treatment", "p_treatment", "stat_outcome", "p_outcome"]
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, keys)
            wr.writeheader()
            for r in self.rows:
                wr.writerow({k: _fmt(r[k]) for k in keys})


def _binary_outcome(Y) -> np.ndarray:
    vals = np.unique(Y)
    if vals.size == 2:
        return (Y == vals[1]).astype(np.int64)
    return (Y > np.median(Y)).astype(np.int64)


def _welch(x, g):
    a, b = x[g == 1], x[g == 0]
    if a.size < 2 or b.size < 2:
        return float("nan"), float("nan")
    if a.var() == 0 and b.var() == 0:
        if a[0] == b[0]:
            return 0.0, 1.0
        return float("nan"), float("nan")
    res = stats.ttest_ind(a, b, equal_var=False)
    return float(abs(res.statistic)), float(res.pvalue)


def _chi2(x, g):
    levels, codes = np.unique(x, return_inverse=True)
    table = np.zeros((levels.size, 2))
    np.add.at(table, (codes, g), 1)
    if levels.size < 2 or (table.sum(axis=0) == 0).any():
        return float("nan"), float("nan")
    chi2, pval, _, _ = stats.chi2_contingency(table, correction=False)
    return float(np.sqrt(chi2)), float(pval)


def association_stats(d: Dataset, discrete_threshold: int = 10) -> AssociationReport:
    """Univariate tests of each covariate against treatment and against outcome.

    A covariate with at most ``discrete_threshold`` distinct values is tested
    with a chi-square test of independence (no continuity correction);
    otherwise with Welch's two-sample t test. A non-binary outcome is split at
    its median to form the outcome grouping.
    """
    A = d.A.astype(np.int64)
    B = _binary_outcome(d.Y)
    rows = []
    for j, name in enumerate(covariate_names(d)):
        x = d.X[:, j]
        discrete = np.unique(x).size <= discrete_threshold
        test = _chi2 if discrete else _welch
        st, pt = test(x, A)
        so, po = test(x, B)
        rows.append({"name": name, "kind": DISCRETE if discrete else CONTINUOUS,
                     "stat_treatment": st, "p_treatment": pt,
                     "stat_outcome": so, "p_outcome": po})
    return AssociationReport(rows)


# -- bootstrap ----------------------------------------------------------------

@dataclass
class BootstrapResult:
    se: float
    estimates: np.ndarray
    method: str


def _resample(d: Dataset, rng: np.random.Generator) -> np.ndarray:
    for _ in range(_MAX_REDRAWS):
        idx = rng.integers(0, d.n, size=d.n)
        n1 = int(d.A[idx].sum())
        if 0 < n1 < d.n:
            return idx
    raise ResampleDegenerate(f"{_MAX_REDRAWS} consecutive resamples missed a treatment group")


def bootstrap_se(d: Dataset, method, B: int = 200, base_seed: int = 0,
                 config: EstimateConfig = EstimateConfig(),
                 resample_indices: Optional[Callable[[int], np.ndarray]] = None,
                 threads: int = 1) -> BootstrapResult:
    """Nonparametric bootstrap standard error of one method's ATE estimate.

    Every resample reruns the whole pipeline (split, forest, weights) with a
    seed derived from ``(base_seed, b)``. ``resample_indices(b)`` overrides the
    row draw, mainly for tests.
    """
    if B < 2:
        raise ValueError("B must be >= 2")

    def one(b):
        seed = int(np.random.SeedSequence([int(base_seed), b]).generate_state(1)[0])
        if resample_indices is not None:
            idx = np.asarray(resample_indices(b))
        else:
            idx = _resample(d, np.random.default_rng(seed))
        return estimate_ate(d.subset(idx), method, config.with_seed(seed)).tau_hat

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            est = list(ex.map(one, range(B)))
    else:
        est = [one(b) for b in range(B)]
    est = np.asarray(est, dtype=float)
    return BootstrapResult(float(est.std(ddof=1)), est, str(method))


def _fmt(v):
    if isinstance(v, float):
        return "NA" if np.isnan(v) else repr(v)
    return v
