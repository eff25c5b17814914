"""Covariate balancing weights from a joint outcome/treatment random forest kernel.

A forest is grown on the standardized pair (outcome, treatment) of a fitting
half of the sample; the share of trees in which two units fall in the same
leaf defines a kernel on covariate space. Weights for the remaining half
minimize the kernel MMD between each weighted arm and the whole sample, and
feed a weighted difference-in-means estimate of the average treatment effect.
"""

__version__ = "0.1.0"

from .data import Dataset, load_csv, split_sample, standardize_pair, write_csv
from .diagnostics import association_stats, balance_report, bootstrap_se, smd
from .errors import ConfbalError, NotConvergedWarning
from .estimators import ALL_METHODS, AteEstimate, EstimateConfig, Method, estimate_ate, weighted_ate
from .forest import Forest, ForestParams, grow_forest, load_forest, save_forest
from .kernel import GramMatrix, gaussian_gram, median_heuristic, rf_gram
from .simulation import DgpSpec, Model, generate, generate_labeled, run_experiment
from .weights import BalancingProblem, WeightSolution, solve_weights

__all__ = [
    "ALL_METHODS", "AteEstimate", "BalancingProblem", "ConfbalError", "Dataset", "DgpSpec",
    "EstimateConfig", "Forest", "ForestParams", "GramMatrix", "Method", "Model",
    "NotConvergedWarning", "WeightSolution", "association_stats", "balance_report",
    "bootstrap_se", "estimate_ate", "gaussian_gram", "generate", "generate_labeled",
    "grow_forest", "load_csv", "load_forest", "median_heuristic", "rf_gram", "run_experiment",
    "save_forest", "smd", "solve_weights", "split_sample", "standardize_pair", "weighted_ate",
    "write_csv",
]
