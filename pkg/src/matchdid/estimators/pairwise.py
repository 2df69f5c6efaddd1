"""Pairwise matched DiD: one treated cohort against its matched comparison units."""

from __future__ import annotations

import logging

import numpy as np

from matchdid.errors import SingularRegressionError, TooFewForSigmaError
from matchdid.estimators.reports import (
    EstimandTarget,
    EstimateReport,
    MatchDiagnostics,
    build_report,
)
from matchdid.inference import (
    DEFAULT_SIGMA_NEIGHBORS,
    corrected_variance,
    naive_cr_variance,
    nr_variance,
    pairwise_outcomes,
    unit_effects,
)
from matchdid.matching import MatchResult
from matchdid.panel import FloatArray, PanelDataset, PeriodSelector, format_cohort

logger = logging.getLogger(__name__)


def pairwise_estimate(dy: FloatArray, result: MatchResult) -> float:
    """(1/N_s) sum_i (1(target) - 1(comparison) K/M) dY_i."""
    k = result.usage[result.comparisons] / result.spec.M
    total = float(dy[result.targets].sum()) - float(np.dot(k, dy[result.comparisons]))
    return total / result.n_targets


def _target(panel: PanelDataset, result: MatchResult, lam: PeriodSelector) -> EstimandTarget:
    return EstimandTarget.build(
        result.spec.target_cohort,
        lam,
        comparison=result.spec.comparison_cohort,
        period_labels=panel.period_labels,
    )


def pairwise_matched_did(
    panel: PanelDataset,
    result: MatchResult,
    lam: PeriodSelector,
    sigma_neighbors: int | None = DEFAULT_SIGMA_NEIGHBORS,
    workers: int = 1,
) -> EstimateReport:
    """Matched DiD for cohort s as a cross-sectional matching estimator on dY.

    Args:
        panel: The panel.
        result: Match of cohort s against its comparison cohort.
        lam: Period selector; needs pre and post periods for s.
        sigma_neighbors: J for the corrected variance; None skips it.
        workers: Threads for neighbor searches.

    Returns:
        EstimateReport with the naive and (when feasible) corrected SE.
    """
    dy = pairwise_outcomes(panel, result, lam)
    estimate = pairwise_estimate(dy, result)
    diagnostics = MatchDiagnostics.from_match(result)
    naive = naive_cr_variance(panel, result, lam)
    corrected = None
    if sigma_neighbors is not None:
        try:
            corrected = corrected_variance(
                panel, result, lam, J=sigma_neighbors, workers=workers
            ).corrected
        except TooFewForSigmaError as e:
            logger.warning(f"[VARIANCE] corrected SE skipped: {e}")
            diagnostics.notes.append(f"corrected SE skipped: {e}")
    return build_report(
        "pairwise",
        estimate,
        _target(panel, result, lam),
        diagnostics,
        naive_variance=naive,
        corrected_variance=corrected,
    )


def _linear_predictions(
    design: FloatArray, y: FloatArray, weights: FloatArray, points: FloatArray
) -> FloatArray:
    """Weighted least-squares fit of y on ``design``, evaluated at ``points``.

    Collinear columns are fine as long as every prediction point lies in the row
    space of the weighted design; otherwise the prediction is not identified.
    """
    root = np.sqrt(weights)
    A = design * root[:, None]
    coef, _, _, singular = np.linalg.lstsq(A, y * root, rcond=None)
    _, _, vt = np.linalg.svd(A, full_matrices=False)
    tol = singular.max() * max(A.shape) * np.finfo(np.float64).eps if singular.size else 0.0
    basis = vt[singular > tol]
    leftover = points - (points @ basis.T) @ basis
    scale = max(1.0, float(np.abs(points).max()))
    if float(np.abs(leftover).max()) > 1e-8 * scale:
        raise SingularRegressionError(
            "outcome regression is rank-deficient at the target covariates"
        )
    predictions: FloatArray = points @ coef
    return predictions


def matching_bias(
    panel: PanelDataset, result: MatchResult, dy: FloatArray
) -> tuple[FloatArray, list[str]]:
    """Per-target bias adjustments mu0(X_i) - mean_m mu0(X_j_m) from a linear outcome model.

    The model is fit on comparison units weighted by K/M. If that fit cannot
    identify predictions at the target units, it is refit unweighted on all
    comparison units; if that also fails, no correction is applied.

    Returns:
        (adjustments, notes describing any fallback).
    """
    design = np.column_stack([np.ones(panel.n), panel.covariates])
    comparisons = result.comparisons
    notes: list[str] = []
    points = np.vstack([design[result.targets], design[result.neighbors.ravel()]])
    attempts = (
        ("matched comparisons weighted by K/M", result.usage[comparisons] / result.spec.M),
        ("all comparison units, unweighted", np.ones(comparisons.shape[0])),
    )
    for label, weights in attempts:
        keep = weights > 0
        try:
            predictions = _linear_predictions(
                design[comparisons][keep], dy[comparisons][keep], weights[keep], points
            )
        except SingularRegressionError as e:
            logger.warning(f"[ESTIMATE] bias regression on {label} failed: {e}")
            notes.append(f"bias regression on {label} is singular")
            continue
        if notes:
            notes.append(f"bias correction fit on {label}")
        n_s = result.n_targets
        own = predictions[:n_s]
        matched = predictions[n_s:].reshape(n_s, result.spec.M).mean(axis=1)
        adjustments: FloatArray = own - matched
        return adjustments, notes
    notes.append("no bias correction applied")
    return np.zeros(result.n_targets), notes


def bias_corrected_pairwise(
    panel: PanelDataset,
    result: MatchResult,
    lam: PeriodSelector,
    sigma_neighbors: int | None = DEFAULT_SIGMA_NEIGHBORS,
    workers: int = 1,
) -> EstimateReport:
    """Pairwise estimate minus the estimated matching bias.

    The corrected SE is computed from the bias-adjusted matched differences.
    """
    dy = pairwise_outcomes(panel, result, lam)
    estimate = pairwise_estimate(dy, result)
    adjustments, notes = matching_bias(panel, result, dy)
    corrected_estimate = estimate - float(adjustments.mean())

    diagnostics = MatchDiagnostics.from_match(result)
    diagnostics.notes.extend(notes)
    naive = naive_cr_variance(panel, result, lam)
    corrected = None
    if sigma_neighbors is not None:
        try:
            corrected = corrected_variance(
                panel, result, lam, J=sigma_neighbors, unit_bias=adjustments, workers=workers
            ).corrected
        except TooFewForSigmaError as e:
            logger.warning(f"[VARIANCE] corrected SE skipped: {e}")
            diagnostics.notes.append(f"corrected SE skipped: {e}")
    return build_report(
        "bias-corrected",
        estimate,
        _target(panel, result, lam),
        diagnostics,
        naive_variance=naive,
        corrected_variance=corrected,
        bias_corrected_estimate=corrected_estimate,
    )


def no_replacement_did(
    panel: PanelDataset,
    result: MatchResult,
    lam: PeriodSelector,
    sigma_neighbors: int = DEFAULT_SIGMA_NEIGHBORS,
    workers: int = 1,
) -> EstimateReport:
    """Matched DiD from a without-replacement match; corrected SE from nr_variance."""
    if result.spec.replacement != "without":
        raise ValueError("no_replacement_did needs a without-replacement match")
    dy = pairwise_outcomes(panel, result, lam)
    estimate = float(unit_effects(dy, result).mean())

    others = [
        c
        for c in panel.cohort_labels()
        if c not in (result.spec.target_cohort, result.spec.comparison_cohort)
    ]
    diagnostics = MatchDiagnostics.from_match(result)
    diagnostics.matched_sample_size = (result.spec.M + 1) * result.n_targets
    if others:
        logger.warning(
            f"[ESTIMATE] panel has cohorts {[format_cohort(c) for c in others]} beyond the "
            "matched pair; they get zero weight"
        )
        diagnostics.notes.append("cohorts outside the matched pair ignored")
    corrected = None
    try:
        corrected = nr_variance(panel, result, lam, J=sigma_neighbors, workers=workers)
    except TooFewForSigmaError as e:
        logger.warning(f"[VARIANCE] corrected SE skipped: {e}")
        diagnostics.notes.append(f"corrected SE skipped: {e}")
    return build_report(
        "no-replacement",
        estimate,
        _target(panel, result, lam),
        diagnostics,
        naive_variance=naive_cr_variance(panel, result, lam),
        corrected_variance=corrected,
    )
