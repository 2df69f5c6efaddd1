"""Registry of estimator runners used by the CLI.

Each runner takes a panel, a period selector and ``EstimateOptions`` and returns
one report per estimated cohort. The CLI looks runners up by name instead of
branching on the estimator choice.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

from matchdid.estimators.discrete import discrete_did
from matchdid.estimators.pairwise import (
    bias_corrected_pairwise,
    no_replacement_did,
    pairwise_matched_did,
)
from matchdid.estimators.reports import EstimateReport
from matchdid.estimators.twfe import pooled_matched_2wfe
from matchdid.matching import (
    MatchSpec,
    Replacement,
    Scaling,
    match,
    match_all_cohorts,
    match_cells,
)
from matchdid.panel import (
    NEVER_TREATED,
    CohortLabel,
    PanelDataset,
    PeriodSelector,
    is_never_treated,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EstimateOptions:
    """Options shared by the estimator runners.

    Attributes:
        cohort: Target cohort; None runs every finite cohort treated before the
            comparison cohort.
        comparison: Comparison cohort.
        M: Neighbors per target unit.
        J: Same-cohort neighbors for conditional variances.
        scaling: Covariate scaling for distances.
        bias_correct: Also report the bias-corrected pairwise estimate.
        workers: Threads for neighbor searches.
    """

    cohort: CohortLabel | None = None
    comparison: CohortLabel = NEVER_TREATED
    M: int = 1
    J: int = 2
    scaling: Scaling = "none"
    bias_correct: bool = False
    workers: int = 1

    def cohorts(self, panel: PanelDataset) -> list[CohortLabel]:
        if self.cohort is not None:
            return [self.cohort]
        return [
            c
            for c in panel.cohort_labels()
            if not is_never_treated(c) and c < self.comparison
        ]

    def spec(self, cohort: CohortLabel, replacement: Replacement = "with") -> MatchSpec:
        return MatchSpec(
            target_cohort=cohort,
            comparison_cohort=self.comparison,
            M=self.M,
            replacement=replacement,
            scaling=self.scaling,
        )


EstimatorRunner = Callable[[PanelDataset, PeriodSelector, EstimateOptions], list[EstimateReport]]


def run_pairwise(
    panel: PanelDataset, lam: PeriodSelector, options: EstimateOptions
) -> list[EstimateReport]:
    reports = []
    for cohort in options.cohorts(panel):
        result = match(panel, options.spec(cohort), workers=options.workers)
        if options.bias_correct:
            reports.append(
                bias_corrected_pairwise(panel, result, lam, options.J, workers=options.workers)
            )
        else:
            reports.append(
                pairwise_matched_did(panel, result, lam, options.J, workers=options.workers)
            )
    return reports


def run_pooled(
    panel: PanelDataset, lam: PeriodSelector, options: EstimateOptions
) -> list[EstimateReport]:
    results = match_all_cohorts(
        panel, M=options.M, scaling=options.scaling, workers=options.workers
    )
    report, _ = pooled_matched_2wfe(panel, results, lam)
    return [report]


def run_discrete(
    panel: PanelDataset, lam: PeriodSelector, options: EstimateOptions
) -> list[EstimateReport]:
    return [
        discrete_did(panel, match_cells(panel, cohort, options.comparison), lam)
        for cohort in options.cohorts(panel)
    ]


def run_no_replacement(
    panel: PanelDataset, lam: PeriodSelector, options: EstimateOptions
) -> list[EstimateReport]:
    reports = []
    for cohort in options.cohorts(panel):
        result = match(
            panel, options.spec(cohort, replacement="without"), workers=options.workers
        )
        reports.append(no_replacement_did(panel, result, lam, options.J, workers=options.workers))
    return reports


@dataclass
class EstimatorRegistry:
    """Name -> runner table for the estimate subcommands."""

    runners: dict[str, EstimatorRunner] = field(default_factory=dict)

    def register(self, name: str, runner: EstimatorRunner) -> None:
        if name in self.runners:
            logger.debug(f"[ESTIMATE] replacing runner '{name}'")
        self.runners[name] = runner

    def get(self, name: str) -> EstimatorRunner:
        try:
            return self.runners[name]
        except KeyError:
            raise KeyError(
                f"unknown estimator '{name}'; choose from {sorted(self.runners)}"
            ) from None

    def names(self) -> list[str]:
        return sorted(self.runners)


_registry: EstimatorRegistry | None = None


def get_registry() -> EstimatorRegistry:
    """Return the shared registry, creating it with the built-in estimators."""
    global _registry
    if _registry is None:
        _registry = EstimatorRegistry()
        _registry.register("pairwise", run_pairwise)
        _registry.register("pooled", run_pooled)
        _registry.register("discrete", run_discrete)
        _registry.register("no-replacement", run_no_replacement)
    return _registry


def reset_registry() -> None:
    """Drop the shared registry (tests)."""
    global _registry
    _registry = None
