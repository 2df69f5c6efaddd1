"""Weighted two-way fixed effects estimator, its 2x2 decomposition and the pooled matched 2WFE."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np

from matchdid.errors import DegenerateDesignError, MismatchedPanelsError
from matchdid.estimators.reports import (
    DecompositionReport,
    EstimandTarget,
    EstimateReport,
    MatchDiagnostics,
    TwoByTwoComponent,
    build_report,
)
from matchdid.inference import cluster_robust_variance
from matchdid.matching import TIE_RULE, MatchResult, pool_usage
from matchdid.panel import (
    CohortLabel,
    FloatArray,
    PanelDataset,
    PeriodSelector,
    double_demean,
    format_cohort,
    is_never_treated,
)

logger = logging.getLogger(__name__)

WeightProvenance = Literal["pooled", "pairwise", "uniform", "custom"]


@dataclass(frozen=True, eq=False)
class WeightVector:
    """Unit weights for the weighted 2WFE.

    Attributes:
        w: Length-n nonnegative weights.
        provenance: How the weights were built.
        cohort: Target cohort for pairwise weights.
    """

    w: FloatArray
    provenance: WeightProvenance = "custom"
    cohort: CohortLabel | None = None

    def __post_init__(self) -> None:
        w = np.array(self.w, dtype=np.float64, copy=True)
        if w.ndim != 1:
            raise ValueError("weights must be one-dimensional")
        if (w < 0).any() or not np.isfinite(w).all():
            raise ValueError("weights must be finite and nonnegative")
        if w.sum() <= 0:
            raise ValueError("weights must have a positive sum")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @classmethod
    def uniform(cls, panel: PanelDataset) -> WeightVector:
        return cls(w=np.ones(panel.n), provenance="uniform")

    @classmethod
    def pairwise(cls, panel: PanelDataset, result: MatchResult) -> WeightVector:
        """1 for target units, K(i, s)/M for comparison units, 0 otherwise."""
        result.check_panel(panel)
        w = result.usage / result.spec.M
        w = w.astype(np.float64)
        w[result.targets] = 1.0
        return cls(w=w, provenance="pairwise", cohort=result.spec.target_cohort)

    @classmethod
    def pooled(cls, panel: PanelDataset, results: Sequence[MatchResult]) -> WeightVector:
        """1 for every eventually-treated unit, K(i)/M for never-treated units."""
        for result in results:
            result.check_panel(panel)
            if not is_never_treated(result.spec.comparison_cohort):
                raise MismatchedPanelsError("pooled weights need matches against the never-treated")
        Ms = {result.spec.M for result in results}
        if len(Ms) != 1:
            raise ValueError(f"pooled matches must share one M, got {sorted(Ms)}")
        M = Ms.pop()
        w = pool_usage(results) / M
        w = w.astype(np.float64)
        w[np.isfinite(panel.cohorts)] = 1.0
        return cls(w=w, provenance="pooled")

    def normalized(self, total: float) -> WeightVector:
        """Weights divided by ``total`` (e.g. N_s), same provenance."""
        return WeightVector(w=self.w / total, provenance=self.provenance, cohort=self.cohort)


def _denominator_floor(weights: FloatArray) -> float:
    return 1e-12 * float(weights.sum())


def weighted_2wfe(panel: PanelDataset, w: WeightVector, lam: PeriodSelector) -> float:
    """Weighted 2WFE coefficient on D_it computed from demeaned treatment indicators.

    tau = sum_it w_i lambda_t Y_it Ddd_it / sum_it w_i lambda_t D_it Ddd_it with
    Ddd = D - Dbar_i - Dtilde_t + Dbar (lambda-weighted unit means, w-weighted
    period means).

    Raises:
        DegenerateDesignError: The denominator is zero.
    """
    if lam.T != panel.T or w.w.shape[0] != panel.n:
        raise ValueError("weights and period selector must match the panel dimensions")
    D = panel.treatment()
    Dd = double_demean(D, w.w, lam)
    weights = w.w[:, None] * lam.weights[None, :]
    denominator = float(np.sum(weights * D * Dd))
    if abs(denominator) <= _denominator_floor(weights):
        raise DegenerateDesignError(
            "no included cohort changes treatment within the included periods"
        )
    return float(np.sum(weights * panel.outcomes * Dd)) / denominator


def _cohort_shares(panel: PanelDataset, w: FloatArray) -> dict[CohortLabel, float]:
    total = float(w.sum())
    shares: dict[CohortLabel, float] = {}
    for cohort in panel.cohort_labels():
        mass = float(w[panel.cohorts == cohort].sum())
        if mass > 0:
            shares[cohort] = mass / total
    return shares


def decompose_weighted_2wfe(
    panel: PanelDataset, w: WeightVector, lam: PeriodSelector
) -> DecompositionReport:
    """Split the weighted 2WFE into 2x2 DiD comparisons.

    For every finite cohort s, every other cohort s' with positive weight, every
    selected t >= s and selected t' < s, the component value is the difference
    between the w-weighted mean of Y_t - Y_t' in s and in s'; its raw weight is
    lambda_t lambda_t' p_s^w p_s'^w. The report's denominator makes the weighted
    component sum equal the estimate.

    Raises:
        DegenerateDesignError: The denominator is zero.
    """
    shares = _cohort_shares(panel, w.w)
    finite = [c for c in shares if not is_never_treated(c)]
    selected = [t for t in range(1, lam.T + 1) if lam.lam[t - 1]]
    L = lam.total

    means: dict[CohortLabel, FloatArray] = {}
    for cohort in shares:
        mask = panel.cohorts == cohort
        cw = w.w[mask]
        means[cohort] = (cw[:, None] * panel.outcomes[mask]).sum(axis=0) / cw.sum()

    p_never = shares.get(math.inf, 0.0)
    denominator = 0.0
    for s in finite:
        lam_s = lam.share_post(s)
        inner = p_never * lam_s * (1 - lam_s)
        for other in finite:
            lam_o = lam.share_post(other)
            if other < s:
                inner += shares[other] * lam_s * (lam_o - lam_s)
            elif other > s:
                inner += shares[other] * (1 - lam_s) * (lam_s - lam_o)
        denominator += shares[s] * inner
    denominator *= L**2
    if abs(denominator) <= 1e-12:
        raise DegenerateDesignError("weighted 2WFE decomposition has a zero denominator")

    raw: list[tuple[CohortLabel, CohortLabel, int, int, float, float]] = []
    for s in finite:
        post = [t for t in selected if t >= s]
        pre = [t for t in selected if t < s]
        for other in shares:
            if other == s:
                continue
            weight = shares[s] * shares[other]
            for t in post:
                for t_prime in pre:
                    value = float(
                        (means[s][t - 1] - means[s][t_prime - 1])
                        - (means[other][t - 1] - means[other][t_prime - 1])
                    )
                    raw.append((s, other, t, t_prime, value, weight))

    components = [
        TwoByTwoComponent(
            cohort=format_cohort(s),
            comparison=format_cohort(other),
            t=t,
            t_prime=t_prime,
            value=value,
            weight=weight,
            normalized_weight=weight / denominator,
            kind="vs-never-treated" if is_never_treated(other) else "treated-vs-treated",
            forbidden=not is_never_treated(other) and t >= other,
        )
        for s, other, t, t_prime, value, weight in raw
    ]
    estimate = math.fsum(c.weight * c.value for c in components) / denominator
    logger.debug(f"[ESTIMATE] decomposition: {len(components)} components")
    return DecompositionReport(
        estimate=estimate,
        denominator=denominator,
        components=components,
        period_labels=list(panel.period_labels) if panel.period_labels else None,
    )


def pooled_matched_2wfe(
    panel: PanelDataset,
    results: Sequence[MatchResult],
    lam: PeriodSelector,
) -> tuple[EstimateReport, DecompositionReport]:
    """Pooled matched 2WFE: weight 1 for treated units, K(i)/M for never-treated units.

    Args:
        panel: The panel.
        results: One with-replacement match per finite cohort, all against the never-treated.
        lam: Period selector.

    Returns:
        The estimate (naive cluster-robust SE) and its 2x2 decomposition.
    """
    finite = [c for c in panel.cohort_labels() if not is_never_treated(c)]
    matched = sorted(result.spec.target_cohort for result in results)
    if matched != finite:
        raise MismatchedPanelsError(
            f"pooled estimator needs one match per cohort {[format_cohort(c) for c in finite]}, "
            f"got {[format_cohort(c) for c in matched]}"
        )
    weights = WeightVector.pooled(panel, results)
    estimate = weighted_2wfe(panel, weights, lam)
    decomposition = decompose_weighted_2wfe(panel, weights, lam)
    variance = cluster_robust_variance(panel, weights.w, lam)

    usage = pool_usage(results)
    never = panel.units_in(math.inf)
    distances = np.concatenate([result.distances.ravel() for result in results])
    n_treated = int(np.isfinite(panel.cohorts).sum())
    diagnostics = MatchDiagnostics(
        M=results[0].spec.M,
        n_target=n_treated,
        n_comparison=int(never.shape[0]),
        comparisons_used=int(np.count_nonzero(usage[never])),
        mean_distance=float(distances.mean()) if distances.size else None,
        max_usage=int(usage.max()),
        matched_sample_size=n_treated + int(np.count_nonzero(usage[never])),
        tie_rule=TIE_RULE,
    )
    forbidden = sum(1 for c in decomposition.components if c.forbidden)
    if forbidden:
        diagnostics.notes.append(f"{forbidden} forbidden comparisons in the decomposition")
    report = build_report(
        "pooled",
        estimate,
        EstimandTarget.build("pooled", lam, period_labels=panel.period_labels),
        diagnostics,
        naive_variance=variance,
    )
    return report, decomposition
