"""Exact-cell DiD for discrete covariates."""

from __future__ import annotations

import numpy as np

from matchdid.estimators.reports import (
    EstimandTarget,
    EstimateReport,
    MatchDiagnostics,
    build_report,
)
from matchdid.inference import check_comparison_window, discrete_variance
from matchdid.matching import CellMatchResult
from matchdid.panel import PanelDataset, PeriodSelector, transform_outcome


def discrete_did(
    panel: PanelDataset, cells: CellMatchResult, lam: PeriodSelector
) -> EstimateReport:
    """Reweight comparison units by the cell ratio e_s(x)/e_inf(x) and difference the means.

    Equivalent to matching every target unit to all comparison units in its cell.
    The corrected SE is the influence-function variance, which attains the
    efficiency bound; the naive SE treats the cell ratios as fixed weights.
    """
    cells.check_panel(panel)
    check_comparison_window(cells.comparison_cohort, lam)
    dy = transform_outcome(panel, cells.target_cohort, lam)
    targets = panel.units_in(cells.target_cohort)
    comparisons = panel.units_in(cells.comparison_cohort)
    n_s = targets.shape[0]
    estimate = (
        float(dy[targets].sum()) - float(np.dot(cells.weights[comparisons], dy[comparisons]))
    ) / n_s
    naive, corrected = discrete_variance(panel, cells, lam)

    used = int(np.count_nonzero(cells.weights[comparisons]))
    diagnostics = MatchDiagnostics(
        n_target=n_s,
        n_comparison=int(comparisons.shape[0]),
        comparisons_used=used,
        mean_distance=0.0,
        matched_sample_size=n_s + used,
        tie_rule="exact cells",
        notes=[f"{cells.n_cells} covariate cells"],
    )
    return build_report(
        "discrete",
        estimate,
        EstimandTarget.build(
            cells.target_cohort,
            lam,
            comparison=cells.comparison_cohort,
            period_labels=panel.period_labels,
        ),
        diagnostics,
        naive_variance=naive,
        corrected_variance=corrected,
    )
