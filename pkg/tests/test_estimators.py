"""
Tests for the matched DiD estimators.

These tests validate:
1. The pairwise estimate equals the weighted 2WFE with pairwise matching weights
2. The weighted 2WFE agrees with a dummy-variable least-squares fit and ignores weight scale
3. The 2x2 decomposition recombines to the estimate and has the expected components
4. Bias correction, exact-cell and without-replacement variants
5. The estimator registry
"""

import math

import numpy as np
import pytest

from matchdid.errors import DegenerateDesignError, MismatchedPanelsError
from matchdid.estimators import (
    WeightVector,
    bias_corrected_pairwise,
    decompose_weighted_2wfe,
    discrete_did,
    no_replacement_did,
    pairwise_matched_did,
    pooled_matched_2wfe,
    weighted_2wfe,
)
from matchdid.estimators.registry import EstimateOptions, get_registry
from matchdid.estimators.reports import EstimandTarget, build_report
from matchdid.matching import MatchSpec, match, match_all_cohorts, match_cells
from matchdid.panel import NEVER_TREATED, PanelDataset, PeriodSelector


def lstsq_2wfe(panel, w, lam):
    """Weighted regression of Y on D plus unit and period dummies over the included cells."""
    units = np.flatnonzero(w > 0)
    periods = [t for t in range(panel.T) if lam.lam[t]]
    D = panel.treatment()
    rows, y, weights = [], [], []
    for a, i in enumerate(units):
        for b, t in enumerate(periods):
            unit_dummies = np.zeros(units.shape[0])
            unit_dummies[a] = 1.0
            period_dummies = np.zeros(len(periods) - 1)
            if b > 0:
                period_dummies[b - 1] = 1.0
            rows.append(np.concatenate([[D[i, t]], unit_dummies, period_dummies]))
            y.append(panel.outcomes[i, t])
            weights.append(w[i])
    root = np.sqrt(np.asarray(weights))
    X = np.asarray(rows) * root[:, None]
    coef, *_ = np.linalg.lstsq(X, np.asarray(y) * root, rcond=None)
    return float(coef[0])


class TestWeighted2WFE:
    """The weighted 2WFE estimator."""

    def test_pairwise_identity(self, make_panel):
        """Pairwise matched DiD equals the 2WFE with pairwise weights, for many draws."""
        for _ in range(200):
            panel = make_panel(n=45)
            lam = PeriodSelector.all_periods(panel.T)
            result = match(panel, MatchSpec(target_cohort=3.0, M=2))
            report = pairwise_matched_did(panel, result, lam, sigma_neighbors=None)
            twfe = weighted_2wfe(panel, WeightVector.pairwise(panel, result), lam)
            assert report.estimate == pytest.approx(twfe, rel=1e-10, abs=1e-12)

    def test_pairwise_identity_with_period_subset(self, make_panel):
        """The identity also holds when some periods are deselected."""
        panel = make_panel(n=60, T=5)
        lam = PeriodSelector.from_periods(5, [1, 3, 4])
        result = match(panel, MatchSpec(target_cohort=3.0))
        report = pairwise_matched_did(panel, result, lam, sigma_neighbors=None)
        twfe = weighted_2wfe(panel, WeightVector.pairwise(panel, result), lam)
        assert report.estimate == pytest.approx(twfe, rel=1e-10, abs=1e-12)

    @pytest.mark.parametrize("periods", [[1, 2, 3, 4], [1, 2, 4]])
    def test_matches_least_squares(self, make_panel, rng, periods):
        """The demeaning formula reproduces the dummy-variable regression coefficient."""
        lam = PeriodSelector.from_periods(4, periods)
        for _ in range(25):
            panel = make_panel(n=30)
            w = rng.uniform(0.2, 3.0, size=panel.n)
            got = weighted_2wfe(panel, WeightVector(w=w), lam)
            assert got == pytest.approx(lstsq_2wfe(panel, w, lam), rel=1e-8)

    def test_weight_scale_invariance(self, make_panel):
        """Dividing the weights by N_s leaves the estimate unchanged."""
        panel = make_panel(n=60)
        lam = PeriodSelector.all_periods(panel.T)
        result = match(panel, MatchSpec(target_cohort=2.0, M=3))
        weights = WeightVector.pairwise(panel, result)
        scaled = weights.normalized(result.n_targets)
        assert weighted_2wfe(panel, scaled, lam) == pytest.approx(
            weighted_2wfe(panel, weights, lam), rel=1e-12
        )

    def test_no_treatment_change(self):
        """Only never-treated units with weight gives a zero denominator."""
        panel = PanelDataset(
            outcomes=np.arange(12, dtype=float).reshape(4, 3),
            cohorts=[2.0, 2.0, NEVER_TREATED, NEVER_TREATED],
            covariates=np.zeros((4, 1)),
        )
        weights = WeightVector(w=[0.0, 0.0, 1.0, 1.0])
        with pytest.raises(DegenerateDesignError):
            weighted_2wfe(panel, weights, PeriodSelector.all_periods(3))

    def test_negative_weights_rejected(self):
        """Weights must be nonnegative with a positive sum."""
        with pytest.raises(ValueError):
            WeightVector(w=[1.0, -0.5])
        with pytest.raises(ValueError):
            WeightVector(w=[0.0, 0.0])


class TestDecomposition:
    """2x2 decomposition of the weighted 2WFE."""

    def test_recombines_uniform(self, make_panel):
        """Unweighted: components recombine to the 2WFE estimate."""
        panel = make_panel(n=60)
        lam = PeriodSelector.all_periods(panel.T)
        weights = WeightVector.uniform(panel)
        report = decompose_weighted_2wfe(panel, weights, lam)
        estimate = weighted_2wfe(panel, weights, lam)
        assert report.recombined() == pytest.approx(estimate, rel=1e-10)
        assert report.estimate == pytest.approx(estimate, rel=1e-10)

    def test_component_count(self, make_panel):
        """T=4 with cohorts {2, 3, never} has 14 components."""
        panel = make_panel(n=60)
        report = decompose_weighted_2wfe(
            panel, WeightVector.uniform(panel), PeriodSelector.all_periods(4)
        )
        assert len(report.components) == 14
        forbidden = [c for c in report.components if c.forbidden]
        # the comparison cohort is already treated in period t
        assert {(c.cohort, c.comparison, c.t) for c in forbidden} == {
            ("2", "3", 3),
            ("2", "3", 4),
            ("3", "2", 3),
            ("3", "2", 4),
        }
        assert len(forbidden) == 6

    def test_recombines_pooled(self, make_panel):
        """Pooled matching weights: components recombine to the estimate across draws."""
        for _ in range(200):
            panel = make_panel(n=50, T=5, cohorts=(2.0, 3.0, 5.0, NEVER_TREATED))
            lam = PeriodSelector.from_periods(5, [1, 2, 3, 5])
            report, decomposition = pooled_matched_2wfe(panel, match_all_cohorts(panel, M=2), lam)
            assert decomposition.recombined() == pytest.approx(report.estimate, rel=1e-9)
            assert sum(c.normalized_weight for c in decomposition.components) == pytest.approx(
                sum(decomposition.weight_by_kind().values())
            )


class TestPooledMatched2WFE:
    """The pooled matched 2WFE."""

    def test_exact_matching_recovers_plim(self, exact_match_panel):
        """With exact matches the estimate equals the hand-computed limit 5 + 10/17."""
        lam = PeriodSelector.all_periods(4)
        report, decomposition = pooled_matched_2wfe(
            exact_match_panel, match_all_cohorts(exact_match_panel), lam
        )
        assert report.estimate == pytest.approx(5.0 + 10.0 / 17.0, rel=1e-10)
        assert report.naive_se is not None
        assert report.target.cohort == "pooled"
        assert len(decomposition.components) == 14

    def test_needs_every_cohort(self, make_panel):
        """Leaving a cohort unmatched is an error."""
        panel = make_panel()
        result = match(panel, MatchSpec(target_cohort=2.0))
        with pytest.raises(MismatchedPanelsError):
            pooled_matched_2wfe(panel, [result], PeriodSelector.all_periods(4))

    @pytest.mark.parametrize("M", [1, 3])
    def test_single_cohort_equals_pairwise(self, make_panel, M):
        """With one finite cohort the pooled and pairwise estimates coincide."""
        lam = PeriodSelector.all_periods(4)
        for _ in range(20):
            panel = make_panel(n=40, cohorts=(3.0, NEVER_TREATED), q=2)
            results = match_all_cohorts(panel, M=M)
            pooled, _ = pooled_matched_2wfe(panel, results, lam)
            pairwise = pairwise_matched_did(panel, results[0], lam)
            assert pooled.estimate == pytest.approx(pairwise.estimate, rel=1e-10)


class TestPairwiseVariants:
    """Bias correction, exact cells and without-replacement matching."""

    def test_bias_correction_removes_linear_bias(self, linear_trend_panel):
        """With a noise-free linear trend the corrected estimate equals the effect exactly."""
        panel = linear_trend_panel
        lam = PeriodSelector.all_periods(4)
        result = match(panel, MatchSpec(target_cohort=3.0))
        report = bias_corrected_pairwise(panel, result, lam)
        assert report.bias_corrected_estimate == pytest.approx(5.0, abs=1e-9)
        assert report.point == report.bias_corrected_estimate
        assert report.estimate != pytest.approx(5.0, abs=1e-9)
        assert report.ci_low < report.point < report.ci_high

    def test_bias_correction_fallback(self):
        """Both targets share one match, so the weighted fit is refit unweighted."""
        panel = PanelDataset(
            outcomes=[[0, 1, 2], [0, 2, 4], [0, 1, 1], [0, 0, 0], [0, 3, 3], [0, 5, 9]],
            cohorts=[2.0, 2.0, NEVER_TREATED, NEVER_TREATED, NEVER_TREATED, NEVER_TREATED],
            covariates=[[0.0], [0.1], [0.05], [1.0], [1.5], [2.0]],
        )
        result = match(panel, MatchSpec(target_cohort=2.0))
        report = bias_corrected_pairwise(panel, result, PeriodSelector.all_periods(3), None)
        assert any("unweighted" in note for note in report.diagnostics.notes)

    def test_exact_matching_no_bias(self, exact_match_panel):
        """Exact matches on a noise-free panel give the true effect with no correction needed."""
        lam = PeriodSelector.all_periods(4)
        result = match(exact_match_panel, MatchSpec(target_cohort=3.0))
        report = pairwise_matched_did(exact_match_panel, result, lam, sigma_neighbors=None)
        assert report.estimate == pytest.approx(5.0, abs=1e-10)

    def test_discrete_equals_cell_average(self, exact_match_panel):
        """Exact-cell DiD equals the mean of target minus cell-mean comparison outcomes."""
        panel = exact_match_panel.with_outcomes(
            exact_match_panel.outcomes + np.linspace(0, 1, 48).reshape(12, 4) ** 2
        )
        lam = PeriodSelector.all_periods(4)
        report = discrete_did(panel, match_cells(panel, 2.0), lam)

        dy = panel.outcomes[:, 1:].mean(axis=1) - panel.outcomes[:, 0]
        x = panel.covariates[:, 0]
        never = np.isinf(panel.cohorts)
        expected = np.mean(
            [dy[i] - dy[never & (x == x[i])].mean() for i in np.flatnonzero(panel.cohorts == 2)]
        )
        assert report.estimate == pytest.approx(expected, rel=1e-12)
        assert report.corrected_se is not None
        assert report.diagnostics.tie_rule == "exact cells"

    def test_no_replacement(self, make_panel):
        """Without-replacement DiD reports the matched sample size (M+1) N_s."""
        panel = make_panel(n=90, cohorts=(3.0, NEVER_TREATED, NEVER_TREATED))
        lam = PeriodSelector.all_periods(4)
        result = match(panel, MatchSpec(target_cohort=3.0, M=2, replacement="without"))
        report = no_replacement_did(panel, result, lam)
        assert report.diagnostics.matched_sample_size == 3 * result.n_targets
        assert report.corrected_se is not None
        with_result = match(panel, MatchSpec(target_cohort=3.0, M=2))
        assert report.estimate == pytest.approx(
            pairwise_matched_did(panel, result, lam, sigma_neighbors=None).estimate
        )
        with pytest.raises(ValueError):
            no_replacement_did(panel, with_result, lam)

    def test_mismatched_panel(self, make_panel):
        """A match result cannot be applied to another panel."""
        first = make_panel()
        second = make_panel()
        result = match(first, MatchSpec(target_cohort=3.0))
        with pytest.raises(MismatchedPanelsError):
            pairwise_matched_did(second, result, PeriodSelector.all_periods(4))

    def test_not_yet_treated_comparison(self, make_panel):
        """A later cohort is a valid comparison only while it is untreated."""
        panel = make_panel(n=60, T=5, cohorts=(2.0, 4.0, NEVER_TREATED))
        result = match(panel, MatchSpec(target_cohort=2.0, comparison_cohort=4.0))
        with pytest.raises(DegenerateDesignError):
            pairwise_matched_did(panel, result, PeriodSelector.all_periods(5))
        lam = PeriodSelector.from_periods(5, [1, 2, 3])
        report = pairwise_matched_did(panel, result, lam)
        weights = WeightVector.pairwise(panel, result)
        assert report.estimate == pytest.approx(weighted_2wfe(panel, weights, lam), rel=1e-10)

    def test_exact_cells_not_yet_treated_comparison(self, exact_match_panel):
        """Exact cells refuse a comparison cohort treated inside the selected periods."""
        cells = match_cells(exact_match_panel, 2.0, 3.0)
        with pytest.raises(DegenerateDesignError):
            discrete_did(exact_match_panel, cells, PeriodSelector.all_periods(4))
        report = discrete_did(exact_match_panel, cells, PeriodSelector.from_periods(4, [1, 2]))
        assert report.estimate == pytest.approx(5.0, abs=1e-12)


class TestReports:
    """Estimate reports and intervals."""

    def test_interval_uses_corrected_se(self):
        """The interval is centred on the point estimate with the corrected SE."""
        target = EstimandTarget.build(3.0, PeriodSelector.all_periods(4))
        report = build_report("pairwise", 2.0, target, naive_variance=4.0, corrected_variance=1.0)
        assert report.se == 1.0
        assert report.ci_low == pytest.approx(2.0 - 1.959964, abs=1e-5)
        assert report.ci_high == pytest.approx(2.0 + 1.959964, abs=1e-5)
        assert report.p_value == pytest.approx(0.0455, abs=1e-3)

    def test_json_round_trip(self):
        """Reports survive a JSON dump and reload unchanged."""
        target = EstimandTarget.build(math.inf, PeriodSelector.all_periods(3), comparison=4.0)
        report = build_report("pooled", -1.5, target, naive_variance=0.25)
        assert type(report).model_validate_json(report.model_dump_json()) == report


class TestRegistry:
    """Estimator registry lookup."""

    def test_builtin_names(self):
        """All built-in estimators are registered."""
        assert get_registry().names() == ["discrete", "no-replacement", "pairwise", "pooled"]

    def test_unknown_name(self):
        """Unknown names list the choices."""
        with pytest.raises(KeyError, match="pairwise"):
            get_registry().get("bogus")

    def test_cohorts_before_comparison(self, make_panel):
        """With a not-yet-treated comparison only earlier cohorts are targets."""
        panel = make_panel(n=60, T=5, cohorts=(2.0, 3.0, 4.0, NEVER_TREATED))
        assert EstimateOptions(comparison=4.0).cohorts(panel) == [2.0, 3.0]
        assert EstimateOptions().cohorts(panel) == [2.0, 3.0, 4.0]

    def test_pairwise_runner_every_cohort(self, make_panel):
        """Without a cohort option the pairwise runner reports every treated cohort."""
        panel = make_panel(n=60)
        reports = get_registry().get("pairwise")(
            panel, PeriodSelector.all_periods(4), EstimateOptions(bias_correct=True)
        )
        assert [r.target.cohort for r in reports] == ["2", "3"]
        assert all(r.bias_corrected_estimate is not None for r in reports)

    @pytest.mark.parametrize("name", ["pairwise", "no-replacement"])
    def test_runners_pass_workers_to_match(self, make_panel, monkeypatch, name):
        """Neighbor searches get the configured worker count."""
        seen = []

        def recording_match(panel, spec, workers=1):
            seen.append(workers)
            return match(panel, spec, workers=workers)

        monkeypatch.setattr("matchdid.estimators.registry.match", recording_match)
        get_registry().get(name)(
            make_panel(n=60), PeriodSelector.all_periods(4), EstimateOptions(workers=3)
        )
        assert seen == [3, 3]
