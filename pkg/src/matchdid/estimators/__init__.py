"""Point estimators for matched difference-in-differences.

Layout:
    reports.py   EstimateReport, DecompositionReport and friends (pydantic)
    twfe.py      weighted 2WFE, its 2x2 decomposition, pooled matched 2WFE
    pairwise.py  pairwise, bias-corrected and without-replacement estimators
    discrete.py  exact-cell estimator
    registry.py  name -> runner table used by the CLI
"""

from matchdid.estimators.discrete import discrete_did
from matchdid.estimators.pairwise import (
    bias_corrected_pairwise,
    matching_bias,
    no_replacement_did,
    pairwise_estimate,
    pairwise_matched_did,
)
from matchdid.estimators.registry import (
    EstimateOptions,
    EstimatorRegistry,
    get_registry,
    reset_registry,
)
from matchdid.estimators.reports import (
    DecompositionReport,
    EstimandTarget,
    EstimateReport,
    MatchDiagnostics,
    TwoByTwoComponent,
    build_report,
)
from matchdid.estimators.twfe import (
    WeightVector,
    decompose_weighted_2wfe,
    pooled_matched_2wfe,
    weighted_2wfe,
)

__all__ = [
    # Reports
    "DecompositionReport",
    "EstimandTarget",
    "EstimateReport",
    "MatchDiagnostics",
    "TwoByTwoComponent",
    "build_report",
    # 2WFE
    "WeightVector",
    "decompose_weighted_2wfe",
    "pooled_matched_2wfe",
    "weighted_2wfe",
    # Pairwise
    "bias_corrected_pairwise",
    "matching_bias",
    "no_replacement_did",
    "pairwise_estimate",
    "pairwise_matched_did",
    # Discrete
    "discrete_did",
    # Registry
    "EstimateOptions",
    "EstimatorRegistry",
    "get_registry",
    "reset_registry",
]
