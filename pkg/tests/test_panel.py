"""
Tests for the panel model.

These tests validate:
1. Cohort label parsing and formatting (never-treated is "inf")
2. Panel validation errors for unbalanced panels, invalid cohorts and single-cohort designs
3. The transformed outcome and period selector windows
4. Cohort shares and the weighted two-way demeaning
"""

import math

import numpy as np
import pytest

from matchdid.errors import (
    DegenerateDesignError,
    EmptyWindowError,
    InvalidCohortLabelError,
    UnbalancedPanelError,
)
from matchdid.panel import (
    NEVER_TREATED,
    CohortShares,
    PanelDataset,
    PeriodSelector,
    double_demean,
    format_cohort,
    parse_cohort,
    sample_shares,
    transform_outcome,
    validate,
)


class TestCohortLabels:
    """Parsing and rendering cohort labels."""

    @pytest.mark.parametrize("token", ["inf", "", "never", "Infinity", " INF "])
    def test_never_treated_tokens(self, token):
        """Every never-treated spelling parses to infinity."""
        assert parse_cohort(token) == NEVER_TREATED

    def test_integer_labels(self):
        """Integer-valued labels parse to floats."""
        assert parse_cohort("3") == 3.0
        assert parse_cohort(4) == 4.0
        assert parse_cohort("2.0") == 2.0

    def test_fractional_label_rejected(self):
        """A fractional period is not a cohort."""
        with pytest.raises(ValueError):
            parse_cohort("2.5")

    def test_format(self):
        """Never-treated renders as 'inf', finite cohorts as integers."""
        assert format_cohort(math.inf) == "inf"
        assert format_cohort(3.0) == "3"


class TestPanelDataset:
    """Construction and validation of panels."""

    def test_arrays_are_read_only(self, make_panel):
        """Panels are immutable once built."""
        panel = make_panel()
        with pytest.raises(ValueError):
            panel.outcomes[0, 0] = 1.0

    def test_row_count_mismatch(self):
        """Outcomes, cohorts and covariates must have the same rows."""
        with pytest.raises(ValueError):
            PanelDataset(outcomes=np.zeros((3, 2)), cohorts=[2, 2], covariates=np.zeros((3, 1)))

    def test_valid_panel_passes(self, make_panel):
        """A random panel with cohorts 2, 3 and never-treated validates."""
        validate(make_panel())

    def test_missing_outcome(self, make_panel):
        """A NaN outcome is an unbalanced panel."""
        panel = make_panel()
        outcomes = panel.outcomes.copy()
        outcomes[5, 2] = np.nan
        with pytest.raises(UnbalancedPanelError):
            validate(panel.with_outcomes(outcomes))

    @pytest.mark.parametrize("label", [1.0, 5.0])
    def test_invalid_cohort(self, label):
        """Cohort 1 and cohorts beyond T are rejected."""
        panel = PanelDataset(
            outcomes=np.zeros((3, 4)),
            cohorts=[label, 3.0, NEVER_TREATED],
            covariates=np.zeros((3, 1)),
        )
        with pytest.raises(InvalidCohortLabelError):
            validate(panel)

    def test_single_cohort_is_degenerate(self):
        """All units in one cohort gives no treatment variation."""
        panel = PanelDataset(
            outcomes=np.zeros((4, 3)), cohorts=[NEVER_TREATED] * 4, covariates=np.zeros((4, 1))
        )
        with pytest.raises(DegenerateDesignError):
            validate(panel)

    def test_treatment_indicator(self):
        """D_it switches on at the cohort period and stays on."""
        panel = PanelDataset(
            outcomes=np.zeros((2, 4)), cohorts=[3.0, NEVER_TREATED], covariates=np.zeros((2, 1))
        )
        np.testing.assert_array_equal(panel.treatment(), [[0, 0, 1, 1], [0, 0, 0, 0]])

    def test_fingerprint_tracks_content(self, make_panel):
        """Changing outcomes changes the fingerprint."""
        panel = make_panel()
        assert panel.fingerprint == panel.subset(np.arange(panel.n)).fingerprint
        assert panel.fingerprint != panel.with_outcomes(panel.outcomes + 1).fingerprint


class TestPeriodSelector:
    """Period selectors and cohort windows."""

    def test_parse(self):
        """Comma-separated flags parse in order."""
        lam = PeriodSelector.parse("1,0,1,1", T=4)
        assert lam.lam == (1, 0, 1, 1)
        assert lam.total == 3

    def test_parse_all(self):
        """None and 'all' select every period."""
        assert PeriodSelector.parse(None, T=3).lam == (1, 1, 1)
        assert PeriodSelector.parse("all", T=3).lam == (1, 1, 1)

    def test_wrong_length(self):
        """The selector length must equal T."""
        with pytest.raises(ValueError):
            PeriodSelector.parse("1,1,1", T=4)

    def test_needs_two_periods(self):
        """At least two periods must be selected."""
        with pytest.raises(ValueError):
            PeriodSelector(lam=(1, 0, 0))

    def test_windows_and_share(self):
        """Post periods are t >= s among selected periods."""
        lam = PeriodSelector.from_periods(4, [1, 3, 4])
        assert lam.post_periods(3) == [3, 4]
        assert lam.pre_periods(3) == [1]
        assert lam.share_post(3) == pytest.approx(2 / 3)


class TestTransformOutcome:
    """Post-minus-pre mean outcomes."""

    def test_all_periods(self):
        """With every period selected, dY is the post mean minus the pre mean."""
        panel = PanelDataset(
            outcomes=[[1.0, 2.0, 4.0, 8.0]], cohorts=[3.0], covariates=[[0.0]]
        )
        dy = transform_outcome(panel, 3, PeriodSelector.all_periods(4))
        assert dy[0] == pytest.approx(6.0 - 1.5)

    def test_subset_of_periods(self):
        """Deselected periods drop out of both windows."""
        panel = PanelDataset(
            outcomes=[[1.0, 2.0, 4.0, 8.0]], cohorts=[3.0], covariates=[[0.0]]
        )
        dy = transform_outcome(panel, 3, PeriodSelector.from_periods(4, [1, 3, 4]))
        assert dy[0] == pytest.approx(6.0 - 1.0)

    def test_empty_pre_window(self):
        """No selected pre period for the cohort is an error."""
        panel = PanelDataset(
            outcomes=[[1.0, 2.0, 4.0, 8.0]], cohorts=[3.0], covariates=[[0.0]]
        )
        with pytest.raises(EmptyWindowError):
            transform_outcome(panel, 3, PeriodSelector.from_periods(4, [3, 4]))


class TestCohortShares:
    """Cohort shares and the weighted demeaning."""

    def test_sample_shares(self, make_panel):
        """Sample shares are N_s / n and sum to one."""
        panel = make_panel(n=60)
        shares = sample_shares(panel)
        assert math.fsum(shares.p.values()) == pytest.approx(1.0)
        assert shares[2.0] == pytest.approx(1 / 3)
        assert shares.never_treated == pytest.approx(1 / 3)

    def test_from_sequence_appends_never_treated(self):
        """One share more than cohorts goes to the never-treated."""
        shares = CohortShares.from_sequence([0.2, 0.3, 0.5], [2, 3])
        assert shares.never_treated == 0.5
        assert shares.finite_cohorts == [2, 3]

    def test_shares_must_sum_to_one(self):
        """Shares off by more than rounding are rejected."""
        with pytest.raises(ValueError):
            CohortShares(p={2.0: 0.5, NEVER_TREATED: 0.4})

    def test_double_demean_margins(self, rng):
        """Weighted column sums and lambda-weighted row sums of the result vanish."""
        values = rng.normal(size=(30, 5))
        w = rng.uniform(0.0, 2.0, size=30)
        lam = PeriodSelector.from_periods(5, [1, 2, 4, 5])
        out = double_demean(values, w, lam)
        np.testing.assert_allclose(w @ out, 0.0, atol=1e-10)
        np.testing.assert_allclose(out @ lam.weights, 0.0, atol=1e-10)
