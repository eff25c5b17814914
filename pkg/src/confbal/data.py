"""Observed data, response standardization, CSV ingestion and sample splitting."""

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateSplit, InvariantError, ParseError, SchemaError, ZeroVariance

_MISSING = {"", "na", "nan", "null", "none", "."}


@dataclass(frozen=True)
class Dataset:
    """Observed sample ``{(X_i, A_i, Y_i)}``.

    Parameters
    ----------
    X : ndarray of shape (n, p)
        Covariates.
    A : ndarray of shape (n,)
        Binary treatment indicator (1 = treated).
    Y : ndarray of shape (n,)
        Outcome.
    covariate_names, outcome_name, treatment_name : optional
        Column labels carried through to reports and CSV output.
    """

    X: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    covariate_names: tuple = ()
    outcome_name: str = "y"
    treatment_name: str = "a"

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        A = np.asarray(self.A, dtype=float).ravel()
        Y = np.asarray(self.Y, dtype=float).ravel()
        if X.ndim != 2:
            raise InvariantError("X must be a 2-d array")
        n, p = X.shape
        if n < 2 or p < 1:
            raise InvariantError(f"need n >= 2 and p >= 1, got n={n}, p={p}")
        if A.shape[0] != n or Y.shape[0] != n:
            raise InvariantError("X, A and Y must have the same number of rows")
        for name, arr in (("X", X), ("A", A), ("Y", Y)):
            if not np.all(np.isfinite(arr)):
                raise InvariantError(f"non-finite entries in {name}")
        if not np.all((A == 0) | (A == 1)):
            raise InvariantError("treatment must be coded 0/1")
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(p))
        if len(names) != p:
            raise InvariantError("covariate_names must have one entry per column")
        for arr in (X, A, Y):
            arr.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "A", A.astype(np.int64))
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def group_sizes(self):
        """Return ``(n_0, n_1)``."""
        n1 = int(self.A.sum())
        return self.n - n1, n1

    def require_both_groups(self):
        n0, n1 = self.group_sizes()
        if n0 < 1 or n1 < 1:
            raise InvariantError(f"both treatment groups must be nonempty (n0={n0}, n1={n1})")

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.X[rows], self.A[rows], self.Y[rows],
                       self.covariate_names, self.outcome_name, self.treatment_name)


@dataclass(frozen=True)
class StandardizedPair:
    Y_tilde: np.ndarray
    A_tilde: np.ndarray
    y_center: float
    y_scale: float
    a_center: float
    a_scale: float


@dataclass(frozen=True)
class SampleSplit:
    fit_indices: np.ndarray
    eval_indices: np.ndarray
    seed: int = field(default=0)


def standardize(v):
    """Center and scale a vector to sample mean 0 and sample variance 1.

    The variance uses the ``n - 1`` denominator. Returns
    ``(standardized, center, scale)`` with ``v == scale * standardized + center``.
    """
    v = np.asarray(v, dtype=float).ravel()
    if v.size < 2:
        raise ZeroVariance("need at least two values to standardize")
    center = float(v.mean())
    scale = float(v.std(ddof=1))
    if not scale > 0.0:
        raise ZeroVariance("cannot standardize a constant vector")
    return (v - center) / scale, center, scale


def standardize_pair(Y, A) -> StandardizedPair:
    y_t, y_c, y_s = standardize(Y)
    a_t, a_c, a_s = standardize(A)
    return StandardizedPair(y_t, a_t, y_c, y_s, a_c, a_s)


def _parse_cell(text, column, lineno):
    s = text.strip()
    if s.lower() in _MISSING:
        raise InvariantError(f"line {lineno}: missing value in column {column!r}")
    try:
        value = float(s)
    except ValueError:
        raise ParseError(f"line {lineno}: non-numeric value {s!r} in column {column!r}") from None
    if not math.isfinite(value):
        raise InvariantError(f"line {lineno}: non-finite value in column {column!r}")
    return value


def load_csv(path, outcome: str, treatment: str,
             covariates: Optional[Sequence[str]] = None) -> Dataset:
    """Read a header-first, comma separated file into a :class:`Dataset`.

    ``covariates=None`` (or ``"rest"``) uses every column other than the outcome
    and treatment, in file order. Otherwise the declared order is kept.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise ParseError(f"{path}: duplicate column names in header")
    body = rows[1:]
    if not body:
        raise ParseError(f"{path}: header but no data rows")

    if covariates is None or covariates == "rest" or list(covariates) == ["rest"]:
        covariates = [h for h in header if h not in (outcome, treatment)]
    covariates = list(covariates)
    for col in [outcome, treatment, *covariates]:
        if col not in header:
            raise SchemaError(f"column {col!r} not found in {path}")
    if not covariates:
        raise SchemaError("at least one covariate column is required")

    pos = {h: i for i, h in enumerate(header)}
    cols = [outcome, treatment, *covariates]
    values = np.empty((len(body), len(cols)))
    for r, row in enumerate(body):
        lineno = r + 2
        if len(row) != len(header):
            raise ParseError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        for c, col in enumerate(cols):
            values[r, c] = _parse_cell(row[pos[col]], col, lineno)

    A = values[:, 1]
    if not np.all((A == 0) | (A == 1)):
        raise InvariantError(f"treatment column {treatment!r} must contain only 0 and 1")
    return Dataset(values[:, 2:], A, values[:, 0], tuple(covariates), outcome, treatment)


def write_csv(d: Dataset, path):
    """Write a dataset as outcome, treatment, covariates with 17 significant digits."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([d.outcome_name, d.treatment_name, *d.covariate_names])
        for i in range(d.n):
            w.writerow([format(d.Y[i], ".17g"), str(int(d.A[i])),
                        *(format(v, ".17g") for v in d.X[i])])


def split_sample(d: Dataset, fit_fraction: float = 0.5, seed: int = 0,
                 max_draws: int = 100) -> SampleSplit:
    """Randomly partition rows into a forest-fitting part and an evaluation part.

    The fit part has ``round(n * fit_fraction)`` rows. Draws are repeated (at most
    ``max_draws`` times) until the evaluation part contains both treatment
    groups; when both groups have at least two members the fit part is also
    required to contain both.
    """
    if not 0.0 < fit_fraction < 1.0:
        raise ValueError("fit_fraction must lie in (0, 1)")
    n = d.n
    n_fit = int(math.floor(n * fit_fraction + 0.5))
    n_eval = n - n_fit
    n0, n1 = d.group_sizes()
    if n_fit < 2 or n_eval < 2:
        raise DegenerateSplit(f"split sizes ({n_fit}, {n_eval}) leave fewer than 2 rows on a side")
    if n0 < 1 or n1 < 1:
        raise DegenerateSplit("both treatment groups are needed in the evaluation part")
    want_fit_both = n0 >= 2 and n1 >= 2 and n_fit >= 2

    rng = np.random.default_rng(seed)
    A = d.A
    for _ in range(max_draws):
        perm = rng.permutation(n)
        fit, ev = np.sort(perm[:n_fit]), np.sort(perm[n_fit:])
        s_eval = A[ev].sum()
        if s_eval == 0 or s_eval == n_eval:
            continue
        if want_fit_both:
            s_fit = A[fit].sum()
            if s_fit == 0 or s_fit == n_fit:
                continue
        return SampleSplit(fit, ev, seed)
    raise DegenerateSplit(f"no admissible split found in {max_draws} draws")


def bundled_csv_path() -> str:
    """Path of the bundled synthetic observational CSV (outcome ``y``, treatment ``a``).

    600 rows and 20 covariates drawn from :func:`confbal.simulation.generate_labeled`
    with a binary outcome; column name prefixes give each covariate's role.
    """
    from importlib import resources
    return str(resources.files("confbal") / "datasets" / "synthetic_observational.csv")
