"""Gaussian latent tree models: semialgebraic membership and tetrad tests."""

from .geometry import (
    MembershipVerdict,
    SymMatrix,
    T_compatible,
    corr_from_tree,
    in_M_T,
    in_PO,
    in_PO_T,
    is_tree_metric,
    reconstruct_tree,
    tree_compatible,
)
from .inference import (
    BayesReport,
    ExploratoryReport,
    TestReport,
    bayes_compatibility,
    confirmatory_test,
    exploratory_scan,
    quartet_screen,
    quartet_test,
    tetrad_statistic,
)
from .numerics import NumericalError
from .trees import (
    Quartet,
    QuartetSet,
    Tree,
    enumerate_binary_trees,
    minimal_determining_quartets,
    parse_newick,
    serialize_newick,
    testing_quartets,
)
from .wishart import cov_Q, cov_S2, cov_W2, minor_estimator

__version__ = "0.1.0"

__all__ = [
    "bayes_compatibility",
    "BayesReport",
    "confirmatory_test",
    "corr_from_tree",
    "cov_Q",
    "cov_S2",
    "cov_W2",
    "enumerate_binary_trees",
    "exploratory_scan",
    "ExploratoryReport",
    "in_M_T",
    "in_PO",
    "in_PO_T",
    "is_tree_metric",
    "MembershipVerdict",
    "minimal_determining_quartets",
    "minor_estimator",
    "NumericalError",
    "parse_newick",
    "Quartet",
    "quartet_screen",
    "quartet_test",
    "QuartetSet",
    "reconstruct_tree",
    "serialize_newick",
    "SymMatrix",
    "T_compatible",
    "testing_quartets",
    "TestReport",
    "tetrad_statistic",
    "Tree",
    "tree_compatible",
]
