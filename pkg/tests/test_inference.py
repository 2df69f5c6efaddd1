"""
Tests for variance estimation and the population variance calculators.

These tests validate:
1. alpha(M, 1) closed form and table lookups
2. Naive and cluster-robust variances agree for pairwise weights
3. Corrected variance components and sigma^2 estimation
4. Difference-in-means variance on a hand-checked example
5. Theoretical variance, efficiency gap and naive variance limit for the inference designs
"""

import math

import numpy as np
import pytest

from matchdid.errors import AlphaUnavailableError, TooFewForSigmaError
from matchdid.estimators import WeightVector
from matchdid.inference import (
    AlphaTable,
    alpha,
    cluster_robust_variance,
    conditional_variance,
    corrected_variance,
    difference_in_means,
    discrete_variance,
    naive_cr_variance,
    naive_variance_limit,
    nr_variance,
    seb_and_gap,
    theoretical_variance,
)
from matchdid.matching import MatchSpec, match, match_cells
from matchdid.panel import NEVER_TREATED, PanelDataset, PeriodSelector, transform_outcome
from matchdid.simulation import InferenceDgpConfig, inference_moments


class TestAlpha:
    """The match-count second moment constant."""

    def test_closed_form(self):
        """alpha(M, 1) = M(2M+1)/2 for M = 1..100."""
        for M in range(1, 101):
            assert alpha(M, 1) == M * (2 * M + 1) / 2

    def test_missing_dimension(self):
        """q >= 2 without a table entry is unavailable."""
        with pytest.raises(AlphaUnavailableError):
            alpha(1, 2)

    def test_table_lookup(self):
        """Table entries are returned for q >= 2."""
        table = AlphaTable(entries={(2, 3): 5.1})
        assert alpha(2, 3, table) == 5.1

    def test_invalid_entry(self):
        """alpha below M^2 is rejected."""
        with pytest.raises(ValueError):
            AlphaTable(entries={(2, 2): 3.0})


class TestSampleVariances:
    """Variance estimators on samples."""

    def test_cluster_robust_equals_naive_for_pairwise_weights(self, make_panel):
        """The 2WFE sandwich with pairwise weights equals the naive cluster-robust variance."""
        for _ in range(10):
            panel = make_panel(n=60, cohorts=(3.0, NEVER_TREATED))
            lam = PeriodSelector.all_periods(4)
            result = match(panel, MatchSpec(target_cohort=3.0, M=2))
            weights = WeightVector.pairwise(panel, result)
            assert cluster_robust_variance(panel, weights.w, lam) == pytest.approx(
                naive_cr_variance(panel, result, lam), rel=1e-9
            )

    def test_small_sample_factor(self, make_panel):
        """The regression small-sample factor is G/(G-1) (N-1)/(N-K)."""
        panel = make_panel(n=40)
        lam = PeriodSelector.all_periods(4)
        w = np.ones(panel.n)
        plain = cluster_robust_variance(panel, w, lam)
        adjusted = cluster_robust_variance(panel, w, lam, small_sample=True)
        G, N, K = 40, 160, 5
        assert adjusted / plain == pytest.approx(G / (G - 1) * (N - 1) / (N - K))

    def test_corrected_components(self, make_panel):
        """The corrected variance is the sum of its three nonnegative parts."""
        panel = make_panel(n=80, cohorts=(3.0, NEVER_TREATED))
        lam = PeriodSelector.all_periods(4)
        result = match(panel, MatchSpec(target_cohort=3.0, M=2))
        report = corrected_variance(panel, result, lam, J=3)
        parts = (report.heterogeneity, report.treated_noise, report.comparison_noise)
        assert report.corrected == parts[0] + parts[1] + parts[2]
        assert min(parts) >= 0
        assert report.naive == pytest.approx(naive_cr_variance(panel, result, lam))
        assert report.sigma_neighbors == 3

    def test_conditional_variance(self, make_panel):
        """sigma^2 is J/(J+1) times the squared gap to the J nearest same-cohort mean."""
        panel = make_panel(n=40, cohorts=(3.0, NEVER_TREATED))
        dy = transform_outcome(panel, 3.0, PeriodSelector.all_periods(4))
        sigma2 = conditional_variance(panel, dy, 3.0, J=1)
        units = panel.units_in(3.0)
        x = panel.covariates[units, 0]
        for a, i in enumerate(units):
            gaps = np.abs(x - x[a])
            gaps[a] = np.inf
            nearest = units[int(np.argmin(gaps))]
            assert sigma2[i] == pytest.approx(0.5 * (dy[i] - dy[nearest]) ** 2)
        assert np.isnan(sigma2[panel.units_in(NEVER_TREATED)]).all()

    def test_constant_outcomes_zero_sigma(self):
        """Identical transformed outcomes within the cohort give zero sigma^2."""
        panel = PanelDataset(
            outcomes=np.tile([0.0, 1.0, 3.0], (6, 1)),
            cohorts=[2.0] * 3 + [NEVER_TREATED] * 3,
            covariates=np.arange(6, dtype=float).reshape(-1, 1),
        )
        dy = transform_outcome(panel, 2.0, PeriodSelector.all_periods(3))
        sigma2 = conditional_variance(panel, dy, 2.0, J=2)
        np.testing.assert_array_equal(sigma2[:3], 0.0)

    def test_too_few_for_sigma(self, make_panel):
        """A cohort with J or fewer units cannot estimate sigma^2."""
        panel = make_panel(n=60, cohorts=(3.0, NEVER_TREATED))
        dy = transform_outcome(panel, 3.0, PeriodSelector.all_periods(4))
        with pytest.raises(TooFewForSigmaError):
            conditional_variance(panel, dy, 3.0, J=30)

    def test_nr_variance_needs_without_replacement(self, make_panel):
        """The without-replacement variance rejects with-replacement matches."""
        panel = make_panel(n=60, cohorts=(3.0, NEVER_TREATED, NEVER_TREATED))
        result = match(panel, MatchSpec(target_cohort=3.0))
        with pytest.raises(ValueError):
            nr_variance(panel, result, PeriodSelector.all_periods(4))

    def test_discrete_variance(self, exact_match_panel):
        """On a noise-free constant-effect panel only the naive variance is positive."""
        naive, corrected = discrete_variance(
            exact_match_panel, match_cells(exact_match_panel, 2.0), PeriodSelector.all_periods(4)
        )
        assert corrected == pytest.approx(0.0, abs=1e-20)
        assert naive > 0

    def test_difference_in_means(self):
        """Hand-checked: estimate 3, variance s1^2/n1 + s0^2/n0 = 2/3."""
        y = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
        treated = np.array([0, 0, 0, 1, 1, 1])
        estimate, variance = difference_in_means(y, treated)
        assert estimate == pytest.approx(3.0)
        assert variance == pytest.approx(2 / 3)
        _, unadjusted = difference_in_means(y, treated, small_sample=False)
        assert unadjusted == pytest.approx(4 / 9)


class TestPopulationVariance:
    """Theoretical variance calculators for the inference designs."""

    @pytest.fixture
    def constant_effect(self):
        return inference_moments(InferenceDgpConfig(design="constant-effect"))

    def test_propensity_share(self, constant_effect):
        """The symmetric logistic design treats half the population."""
        assert constant_effect.p_s == pytest.approx(0.5, abs=1e-9)

    def test_corrected_se_level(self, constant_effect):
        """At n = 1000 and M = 1 the asymptotic SE is about 0.085."""
        se = math.sqrt(theoretical_variance(constant_effect, 1) / 1000)
        assert 0.08 < se < 0.09

    def test_naive_limit_exceeds_theoretical(self, constant_effect):
        """The naive SE limit sits well above the corrected one, near 0.26 at n = 1000."""
        naive = math.sqrt(naive_variance_limit(constant_effect, 1) / 1000)
        assert 0.23 < naive < 0.29
        assert naive_variance_limit(constant_effect, 1) > theoretical_variance(constant_effect, 1)

    def test_gap_positive_and_decreasing(self, constant_effect):
        """The efficiency gap is positive and shrinks as M grows."""
        gaps = [seb_and_gap(constant_effect, M)[1] for M in (1, 2, 4, 8, 16)]
        assert all(g > 0 for g in gaps)
        assert all(a > b for a, b in zip(gaps, gaps[1:], strict=False))

    def test_bound_plus_gap(self, constant_effect):
        """V_seb + gap reproduces the theoretical variance."""
        v_seb, gap = seb_and_gap(constant_effect, 3)
        assert v_seb + gap == pytest.approx(theoretical_variance(constant_effect, 3), rel=1e-10)

    def test_heterogeneous_att_mean(self):
        """The heterogeneous design's estimand is 5 + 17.5 E[X | treated], about 5.72."""
        moments = inference_moments(InferenceDgpConfig(design="heterogeneous"))
        assert moments.att_mean == pytest.approx(5.72, abs=0.01)
