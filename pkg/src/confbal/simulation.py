"""Data-generating processes and replicated simulation experiments.

Four designs are provided: the two-covariate toy design used to compare
balance of the outcome function, and three ATE designs (smooth nonlinear,
discontinuous/high order, linear). Covariates are AR(1) Gaussian throughout.
"""

import csv
import enum
import functools
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
from scipy.special import expit

from .data import Dataset
from .errors import ConfbalError, DimensionTooSmall
from .estimators import ALL_METHODS, EstimateConfig, Method, estimate_ate


class Model(str, enum.Enum):
    TOY = "toy"
    MODEL1 = "model1"
    MODEL2 = "model2"
    MODEL3 = "model3"

    def __str__(self):
        return self.value


MIN_DIM = {Model.TOY: 2, Model.MODEL1: 2, Model.MODEL2: 10, Model.MODEL3: 30}
DEFAULT_RHO = {Model.TOY: -0.25, Model.MODEL1: 0.25, Model.MODEL2: 0.25, Model.MODEL3: 0.25}

#: ATE quoted for the smooth nonlinear design; superseded by :func:`model1_true_tau`
MODEL1_TAU_QUOTED = 1.82


@dataclass(frozen=True)
class DgpSpec:
    model: Model
    n: int
    p: int
    rho: Optional[float] = None
    seed: int = 0
    clamp: tuple = (0.01, 0.99)

    def __post_init__(self):
        object.__setattr__(self, "model", Model(self.model))
        if self.rho is None:
            object.__setattr__(self, "rho", DEFAULT_RHO[self.model])
        if self.p < MIN_DIM[self.model]:
            raise DimensionTooSmall(f"{self.model} needs p >= {MIN_DIM[self.model]}, got {self.p}")
        if self.n < 2:
            raise ValueError("n must be >= 2")


@dataclass
class SimulatedSample:
    dataset: Dataset
    true_pi: np.ndarray
    true_mu1: np.ndarray
    true_mu0: np.ndarray
    true_tau: float


def sample_ar1_gaussian(n: int, p: int, rho: float, seed=0) -> np.ndarray:
    """Rows i.i.d. N(0, S) with ``S[j, k] = rho ** |j - k|``, via the AR(1) recursion."""
    if not abs(rho) < 1:
        raise ValueError("|rho| must be < 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    Z = rng.standard_normal((n, p))
    X = np.empty_like(Z)
    X[:, 0] = Z[:, 0]
    c = math.sqrt(1.0 - rho * rho)
    for j in range(1, p):
        X[:, j] = rho * X[:, j - 1] + c * Z[:, j]
    return X


# -- mean and propensity functions ---------------------------------------------

def _ind(cond):
    return cond.astype(float)


def toy_pi(X):
    # propensity is the logistic function of the indicator, so 0.5 or about 0.731
    return expit(_ind(X[:, 0] > 0.5))


def toy_mu(X):
    return 0.5 * _ind(X[:, 0] > 0.5) + 0.5 * _ind(X[:, 1] > 0.5)


def model1_pi(X, clamp=(0.01, 0.99)):
    x = X[:, 0]
    return np.clip(0.25 * (1.0 + x ** 2 * (1.0 - x) ** 4), *clamp)


def _model1_effect(x1, x2):
    return (1.0 + expit(20.0 * (x1 - 1.0 / 3.0))) * (1.0 + expit(20.0 * (x2 - 1.0 / 3.0)))


def model1_mu(X, a):
    return 2.0 * (X[:, 0] - 1.0) + 0.5 * (2 * a - 1) * _model1_effect(X[:, 0], X[:, 1])


def model2_pi(X):
    x = [None] + [X[:, j] for j in range(10)]  # 1-based
    eta = (_ind(x[1] > 0) + _ind(x[2] < -0.5) - 0.5 * _ind((x[3] > 0) & (x[4] < 0))
           + 2 * _ind((x[4] > 0.5) & (x[5] < -0.5)) - 2 * _ind((x[1] > 0.5) & (x[2] < 0.5))
           + 0.5 * x[4] - 0.5 * x[5] ** 2
           - 0.5 * x[6] * _ind(x[7] > 0) + 0.5 * x[8] + 0.25 * x[9] ** 2 - 0.25 * x[10] ** 2)
    return expit(eta)


def model2_mu(X):
    x = [None] + [X[:, j] for j in range(10)]
    return (5 * _ind(x[1] > 0) + 5 * _ind(x[2] < -0.5) - 5 * _ind((x[3] > 0) & (x[4] < 0))
            + 0.5 * x[4] - x[5] ** 2
            + 5 * _ind((x[4] > 0.5) & (x[5] < -0.5)) - 5 * _ind((x[1] > 0.5) & (x[2] < 0.5))
            - 5 * x[6] * (_ind(x[7] > 0) + 0.5 * x[7]) + 0.5 * x[8]
            + 0.5 * x[9] ** 2 - 0.5 * x[10] ** 2)


def model3_pi(X):
    return expit(0.25 * X[:, 0:10].sum(axis=1) + 0.25 * X[:, 20:30].sum(axis=1))


def model3_mu(X):
    return X[:, 0:20].sum(axis=1)


@functools.lru_cache(maxsize=None)
def model1_true_tau(rho: float = 0.25, grid: int = 4001, half_width: float = 9.0) -> float:
    """E[mu_1(X) - mu_0(X)] for the smooth nonlinear design, by 2-d quadrature.

    Only the first two covariates enter the contrast; the integral over their
    bivariate normal density is taken with the trapezoid rule on a fine grid.
    """
    t = np.linspace(-half_width, half_width, grid)
    h = t[1] - t[0]
    s = 1.0 + expit(20.0 * (t - 1.0 / 3.0))
    x1, x2 = t[:, None], t[None, :]
    det = 1.0 - rho * rho
    dens = np.exp(-(x1 ** 2 - 2 * rho * x1 * x2 + x2 ** 2) / (2 * det)) / (2 * math.pi * math.sqrt(det))
    wts = np.full(grid, h)
    wts[[0, -1]] = h / 2
    return float(wts @ (dens * s[:, None] * s[None, :]) @ wts)


def model1_true_tau_mc(rho: float = 0.25, draws: int = 10 ** 7, seed: int = 0,
                       chunk: int = 10 ** 6):
    """Monte-Carlo estimate of the same contrast; returns ``(mean, standard_error)``."""
    rng = np.random.default_rng(seed)
    total = total2 = 0.0
    done = 0
    while done < draws:
        k = min(chunk, draws - done)
        X = sample_ar1_gaussian(k, 2, rho, rng)
        v = _model1_effect(X[:, 0], X[:, 1])
        total += v.sum()
        total2 += (v * v).sum()
        done += k
    mean = total / draws
    var = (total2 / draws - mean ** 2) * draws / (draws - 1)
    return mean, math.sqrt(var / draws)


def generate(spec: DgpSpec) -> SimulatedSample:
    """Draw one sample from ``spec``; all randomness comes from ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    X = sample_ar1_gaussian(spec.n, spec.p, spec.rho, rng)
    m = spec.model
    if m is Model.TOY:
        pi = toy_pi(X)
        mu1 = mu0 = toy_mu(X)
        noise_sd, tau = math.sqrt(2.0), 0.0
    elif m is Model.MODEL1:
        pi = model1_pi(X, spec.clamp)
        mu1, mu0 = model1_mu(X, 1), model1_mu(X, 0)
        noise_sd, tau = 1.0, model1_true_tau(spec.rho)
    elif m is Model.MODEL2:
        pi = model2_pi(X)
        mu1 = mu0 = model2_mu(X)
        noise_sd, tau = 1.0, 0.0
    else:
        pi = model3_pi(X)
        mu1 = mu0 = model3_mu(X)
        noise_sd, tau = 1.0, 0.0
    A = (rng.random(spec.n) < pi).astype(np.int64)
    Y = np.where(A == 1, mu1, mu0) + noise_sd * rng.standard_normal(spec.n)
    return SimulatedSample(Dataset(X, A, Y), pi, mu1, mu0, tau)


def generate_two_covariate_logistic(n: int, seed=0, beta=(0.8, -0.6)) -> SimulatedSample:
    """Two independent standard normal covariates, logistic propensity, linear outcome.

    ``pi(x) = expit(beta . x)``, ``Y = x1 + x2 + A + N(0, 1)``, so ``tau = 1``.
    Used to check that balancing weights approach the normalized inverse
    propensity as ``n`` grows.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    X = rng.standard_normal((n, 2))
    pi = expit(X @ np.asarray(beta, dtype=float))
    A = (rng.random(n) < pi).astype(np.int64)
    mu0 = X[:, 0] + X[:, 1]
    Y = mu0 + A + rng.standard_normal(n)
    return SimulatedSample(Dataset(X, A, Y), pi, mu0 + 1.0, mu0, 1.0)


def generate_labeled(n: int, p: int = 40, seed: int = 0, binary_outcome: bool = True):
    """Synthetic design with known covariate roles, for the diagnostics workflow.

    Columns come in four equal blocks: confounders (drive treatment and
    outcome), instruments (treatment only), precision variables (outcome only)
    and null variables. Within a block the effect strengths decay so that the
    association statistics spread out. Every fourth covariate is dichotomized
    to exercise the discrete code path. Returns ``(Dataset, roles)``.
    """
    if p < 4:
        raise DimensionTooSmall("need p >= 4")
    rng = np.random.default_rng(seed)
    X = sample_ar1_gaussian(n, p, 0.0, rng)
    for j in range(3, p, 4):
        X[:, j] = (X[:, j] > 0).astype(float)
    block = p // 4
    roles = np.array(["null"] * p, dtype=object)
    roles[:block] = "confounder"
    roles[block:2 * block] = "instrument"
    roles[2 * block:3 * block] = "precision"
    strength = np.linspace(1.0, 0.2, block)
    Xs = (X - X.mean(axis=0)) / X.std(axis=0)
    conf, inst, prec = slice(0, block), slice(block, 2 * block), slice(2 * block, 3 * block)
    eta_t = 0.6 * (Xs[:, conf] @ strength) + 0.6 * (Xs[:, inst] @ strength)
    eta_y = 0.6 * (Xs[:, conf] @ strength) + 0.6 * (Xs[:, prec] @ strength)
    A = (rng.random(n) < expit(eta_t / math.sqrt(block / 2))).astype(np.int64)
    eta_y = eta_y / math.sqrt(block / 2) + 0.5 * A
    if binary_outcome:
        Y = (rng.random(n) < expit(eta_y)).astype(float)
    else:
        Y = eta_y + rng.standard_normal(n)
    names = tuple(f"{r[:4]}{j + 1}" for j, r in enumerate(roles))
    return Dataset(X, A, Y, names, "y", "a"), roles


# -- experiments --------------------------------------------------------------

BALANCE_COLUMNS = ("pop_mean", "treatment_mean", "control_mean")


@dataclass
class SimulationReport:
    """Tidy replicate results plus per-method summaries."""

    rows: list = field(default_factory=list)

    def errors(self, method) -> np.ndarray:
        method = str(Method(method))
        return np.array([r["error"] for r in self.rows
                         if r["method"] == method and r["ok"]], dtype=float)

    def methods(self):
        seen = []
        for r in self.rows:
            if r["method"] not in seen:
                seen.append(r["method"])
        return seen

    def summary(self) -> Dict[str, dict]:
        out = {}
        for m in self.methods():
            e = self.errors(m)
            fails = sum(1 for r in self.rows if r["method"] == m and not r["ok"])
            if e.size == 0:
                out[m] = {"reps": 0, "failed": fails}
                continue
            sd = float(e.std(ddof=1)) if e.size > 1 else 0.0
            q1, med, q3 = np.percentile(e, [25, 50, 75])
            out[m] = {
                "reps": int(e.size), "failed": fails,
                "mean_bias": float(e.mean()), "abs_mean_bias": float(abs(e.mean())),
                "sd": sd, "mc_se": sd / math.sqrt(e.size),
                "rmse": float(np.sqrt(np.mean(e ** 2))),
                "q1": float(q1), "median": float(med), "q3": float(q3),
            }
        return out

    def write_csv(self, path):
        cols = ["model", "n", "p", "method", "replicate", "seed", "estimate", "truth", "error", "ok"]
        if any(BALANCE_COLUMNS[0] in r for r in self.rows):
            cols += list(BALANCE_COLUMNS)
        real = ["estimate", "truth", "error", *BALANCE_COLUMNS]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore", lineterminator="\n",
                               restval="NA")
            w.writeheader()
            for r in self.rows:
                w.writerow({**r, **{k: format(r[k], ".17g") for k in real if k in r},
                            "ok": int(r["ok"])})

    def write_summary_csv(self, path):
        cols = ["method", "reps", "failed", "mean_bias", "abs_mean_bias", "sd", "mc_se",
                "rmse", "q1", "median", "q3"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n", restval="")
            w.writeheader()
            for m, s in self.summary().items():
                w.writerow({"method": m, **{k: (format(v, ".10g") if isinstance(v, float) else v)
                                            for k, v in s.items()}})

    def summary_text(self) -> str:
        lines = [f"{'method':<16}{'reps':>6}{'mean bias':>12}{'sd':>10}{'mc se':>10}{'rmse':>10}"]
        for m, s in self.summary().items():
            if s["reps"] == 0:
                lines.append(f"{m:<16}{0:>6}{'failed':>12}")
                continue
            lines.append(f"{m:<16}{s['reps']:>6}{s['mean_bias']:>12.4f}{s['sd']:>10.4f}"
                         f"{s['mc_se']:>10.4f}{s['rmse']:>10.4f}")
        return "\n".join(lines)


def run_experiment(spec: DgpSpec, methods: Sequence = ALL_METHODS, reps: int = 200,
                   base_seed: int = 0, config: EstimateConfig = EstimateConfig(),
                   progress=None, balance: bool = False) -> SimulationReport:
    """Replicate ``spec`` ``reps`` times and record ``tau_hat - tau`` per method.

    Replicate ``r`` (1-based) uses data seed ``base_seed + r`` and the same
    seed for the methods' own randomness, so replicates are independent of
    each other and of execution order. Failures are recorded as ``ok=False``
    rows rather than aborting the run. With ``balance=True`` each row also
    carries the balance triple (``pop_mean``, ``treatment_mean``,
    ``control_mean``) of ``mu_1`` under that method's weights.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    methods = [Method(m) for m in methods]
    report = SimulationReport()
    for r in range(1, reps + 1):
        seed = base_seed + r
        sample = generate(DgpSpec(spec.model, spec.n, spec.p, spec.rho, seed, spec.clamp))
        for m in methods:
            ok, est, extra = True, float("nan"), {}
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    fit = estimate_ate(sample.dataset, m, config.with_seed(seed))
                est = fit.tau_hat
                if balance:
                    row = balance_table(sample, {str(m): fit.weights}, {str(m): fit.eval_mask})[0]
                    extra = {k: row[k] for k in BALANCE_COLUMNS}
            except (ConfbalError, np.linalg.LinAlgError, FloatingPointError):
                ok = False
            report.rows.append({
                "model": str(spec.model), "n": spec.n, "p": spec.p, "method": str(m),
                "replicate": r, "seed": seed, "estimate": est, "truth": sample.true_tau,
                "error": est - sample.true_tau, "ok": ok and math.isfinite(est), **extra,
            })
        if progress is not None:
            progress(r, reps)
    return report


def balance_table(sample: SimulatedSample, weights: Dict[str, np.ndarray],
                  masks: Optional[Dict[str, np.ndarray]] = None):
    """Weighted arm means of the treated mean function, one row per method.

    Each row reports the mean of ``mu_1`` over the rows a method weights
    (``masks``; all rows by default) next to the weighted treated and control
    means of ``mu_1``.
    """
    d = sample.dataset
    mu = sample.true_mu1
    rows = []
    for name, w in weights.items():
        w = np.asarray(w, dtype=float)
        mask = np.ones(d.n, bool) if masks is None or name not in masks else np.asarray(masks[name])
        t = (d.A == 1) & mask
        c = (d.A == 0) & mask
        pop = float(mu[mask].mean())
        treat = float(w[t] @ mu[t] / w[t].sum())
        ctrl = float(w[c] @ mu[c] / w[c].sum())
        rows.append({"method": name, "pop_mean": pop, "treatment_mean": treat,
                     "control_mean": ctrl,
                     "imbalance": 0.5 * (abs(treat - pop) + abs(ctrl - pop))})
    return rows
