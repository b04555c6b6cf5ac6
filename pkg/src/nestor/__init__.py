"""Conditional dependency networks for count data with unobserved actors."""

__version__ = "0.1.0"

from .exceptions import (
    ConfigurationError,
    DegeneracyError,
    InvalidInputError,
    NestorError,
    SamplerError,
    TemperingError,
)
from .initialization import InitState, candidate_cliques, init_params, resample_cliques
from .metrics import EvalReport, auc_edges, hidden_correlation, hidden_link_pr
from .model_select import (
    CrossValConfig,
    SelectionResult,
    TreeSample,
    TreeSampler,
    pcl_score,
    sample_tree,
    select_r,
)
from .pipeline import (
    FitConfig,
    NetworkFit,
    aggregate_reports,
    benchmark,
    evaluate_replicate,
    fit_network,
)
from .pln import CountDataset, PlnFit, bivariate_pln_logpdf, fit_pln
from .simulate import SimReplicate, make_null_counts, make_replicate
from .tree_algebra import (
    EdgeWeightMatrix,
    edge_marginals,
    log_partition,
    log_spanning_tree_count,
    max_weight_tree,
)
from .vem import VemConfig, VemState, alpha_upper_bound, run_vem

__all__ = [
    "ConfigurationError",
    "CountDataset",
    "CrossValConfig",
    "DegeneracyError",
    "EdgeWeightMatrix",
    "EvalReport",
    "FitConfig",
    "InitState",
    "InvalidInputError",
    "NestorError",
    "NetworkFit",
    "PlnFit",
    "SamplerError",
    "SelectionResult",
    "SimReplicate",
    "TemperingError",
    "TreeSample",
    "TreeSampler",
    "VemConfig",
    "VemState",
    "__version__",
    "aggregate_reports",
    "alpha_upper_bound",
    "auc_edges",
    "benchmark",
    "bivariate_pln_logpdf",
    "candidate_cliques",
    "edge_marginals",
    "evaluate_replicate",
    "fit_network",
    "fit_pln",
    "hidden_correlation",
    "hidden_link_pr",
    "init_params",
    "log_partition",
    "log_spanning_tree_count",
    "make_null_counts",
    "make_replicate",
    "max_weight_tree",
    "pcl_score",
    "resample_cliques",
    "run_vem",
    "sample_tree",
    "select_r",
]
