"""Report models returned by the estimators.

These are pydantic models so the CLI can dump them as JSON and read them back
without loss. Cohort labels are stored as strings ("3", "inf").
"""

from __future__ import annotations

import math
from typing import Literal

from pydantic import BaseModel, Field
from scipy.stats import norm

from matchdid.matching import TIE_RULE, MatchResult
from matchdid.panel import CohortLabel, PeriodSelector, format_cohort

CONFIDENCE_LEVEL = 0.95

ComponentKind = Literal["vs-never-treated", "treated-vs-treated"]


class EstimandTarget(BaseModel):
    """What an estimate targets: cohort, comparison cohort and period window."""

    cohort: str = Field(..., description="Target cohort, or 'pooled'")
    comparison: str = Field(default="inf", description="Comparison cohort")
    periods: list[int] = Field(..., description="Period selector flags, one per period")
    period_labels: list[str] | None = None

    @classmethod
    def build(
        cls,
        cohort: CohortLabel | str,
        lam: PeriodSelector,
        comparison: CohortLabel | str = math.inf,
        period_labels: tuple[str, ...] | None = None,
    ) -> EstimandTarget:
        return cls(
            cohort=cohort if isinstance(cohort, str) else format_cohort(cohort),
            comparison=comparison if isinstance(comparison, str) else format_cohort(comparison),
            periods=list(lam.lam),
            period_labels=list(period_labels) if period_labels else None,
        )


class MatchDiagnostics(BaseModel):
    """Summary of the matching step behind an estimate."""

    M: int | None = None
    n_target: int = 0
    n_comparison: int = 0
    comparisons_used: int | None = None
    mean_distance: float | None = None
    max_usage: int | None = None
    matched_sample_size: int | None = None
    tie_rule: str | None = None
    notes: list[str] = Field(default_factory=list)

    @classmethod
    def from_match(cls, result: MatchResult) -> MatchDiagnostics:
        return cls(
            M=result.spec.M,
            n_target=result.n_targets,
            n_comparison=int(result.comparisons.shape[0]),
            comparisons_used=result.used_comparisons,
            mean_distance=result.mean_distance,
            max_usage=result.max_usage,
            matched_sample_size=result.n_targets + result.used_comparisons,
            tie_rule=TIE_RULE,
        )


class EstimateReport(BaseModel):
    """Point estimate with optional standard errors and a normal-based interval.

    The interval and p-value are centred on ``point`` (the bias-corrected estimate
    when present) and use the corrected standard error when available, otherwise
    the naive one.
    """

    estimator: str
    estimate: float
    bias_corrected_estimate: float | None = None
    naive_se: float | None = Field(default=None, ge=0)
    corrected_se: float | None = Field(default=None, ge=0)
    ci_low: float | None = None
    ci_high: float | None = None
    p_value: float | None = Field(default=None, ge=0, le=1)
    confidence_level: float = CONFIDENCE_LEVEL
    target: EstimandTarget
    diagnostics: MatchDiagnostics = Field(default_factory=MatchDiagnostics)

    @property
    def point(self) -> float:
        if self.bias_corrected_estimate is not None:
            return self.bias_corrected_estimate
        return self.estimate

    @property
    def se(self) -> float | None:
        return self.corrected_se if self.corrected_se is not None else self.naive_se


def build_report(
    estimator: str,
    estimate: float,
    target: EstimandTarget,
    diagnostics: MatchDiagnostics | None = None,
    *,
    naive_variance: float | None = None,
    corrected_variance: float | None = None,
    bias_corrected_estimate: float | None = None,
) -> EstimateReport:
    """Assemble an EstimateReport and fill in the interval and two-sided p-value."""
    naive_se = math.sqrt(naive_variance) if naive_variance is not None else None
    corrected_se = math.sqrt(corrected_variance) if corrected_variance is not None else None
    point = bias_corrected_estimate if bias_corrected_estimate is not None else estimate
    se = corrected_se if corrected_se is not None else naive_se

    ci_low = ci_high = p_value = None
    if se is not None:
        z = float(norm.ppf(0.5 + CONFIDENCE_LEVEL / 2))
        ci_low, ci_high = point - z * se, point + z * se
        if se > 0:
            p_value = float(2.0 * norm.sf(abs(point) / se))
        else:
            p_value = 1.0 if point == 0 else 0.0

    return EstimateReport(
        estimator=estimator,
        estimate=float(estimate),
        bias_corrected_estimate=bias_corrected_estimate,
        naive_se=naive_se,
        corrected_se=corrected_se,
        ci_low=ci_low,
        ci_high=ci_high,
        p_value=p_value,
        target=target,
        diagnostics=diagnostics or MatchDiagnostics(),
    )


class TwoByTwoComponent(BaseModel):
    """One 2x2 DiD comparison inside a weighted 2WFE estimate.

    ``weight`` is the raw recombination weight lambda_t * lambda_t' * p_s^w * p_s'^w;
    ``normalized_weight`` divides it by the 2WFE denominator so the normalized
    weights times the values sum to the estimate.
    """

    cohort: str
    comparison: str
    t: int
    t_prime: int
    value: float
    weight: float
    normalized_weight: float
    kind: ComponentKind
    forbidden: bool = Field(
        default=False, description="Comparison cohort is already treated in period t"
    )


class DecompositionReport(BaseModel):
    """All 2x2 components of a weighted 2WFE estimate and the shared denominator."""

    estimate: float
    denominator: float
    components: list[TwoByTwoComponent]
    period_labels: list[str] | None = None

    def recombined(self) -> float:
        """Sum of raw weight times value, divided by the denominator."""
        return math.fsum(c.weight * c.value for c in self.components) / self.denominator

    def weight_by_kind(self) -> dict[str, float]:
        totals: dict[str, float] = {}
        for c in self.components:
            totals[c.kind] = totals.get(c.kind, 0.0) + c.normalized_weight
        return totals
