"""
Tests for the NSW replication pipeline.

These tests validate:
1. NSW/CPS file parsing, range checks and column mapping
2. Two-period panels for the outcome and placebo windows
3. The six specifications on a small synthetic sample
4. Benchmark levels on the real files, when available
"""

import os
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from matchdid.config import NswColumns
from matchdid.errors import MissingColumnError, ParseError
from matchdid.inference import difference_in_means
from matchdid.panel import NEVER_TREATED
from matchdid.replication import (
    SPEC_NAMES,
    NswData,
    build_panel,
    build_panels,
    experimental_benchmark,
    read_nsw,
    read_nsw_csv,
    run_specifications,
)

# (age, education, married, black, hispanic)
TREATED_PROFILES = [
    (25, 10, 0, 1, 0),
    (25, 12, 1, 1, 0),
    (30, 10, 0, 0, 1),
    (30, 12, 1, 0, 0),
    (25, 10, 0, 1, 0),
    (30, 12, 0, 1, 0),
]
OTHER_PROFILES = [
    (40, 8, 1, 0, 0),
    (45, 12, 1, 0, 0),
    (35, 10, 0, 0, 0),
    (25, 8, 0, 1, 0),
    (30, 14, 1, 0, 1),
    (50, 12, 1, 0, 0),
]


def nsw_frame(rng, profiles, treat=None):
    """Random nonnegative earnings attached to the given covariate profiles."""
    frame = pd.DataFrame(profiles, columns=["age", "education", "married", "black", "hispanic"])
    for year in ("re74", "re75", "re78"):
        frame[year] = np.round(rng.uniform(0, 12000, size=len(frame)), 2)
    if treat is not None:
        frame.insert(0, "treat", treat)
    return frame


@pytest.fixture
def nsw_files(tmp_path, rng):
    """Experimental file with both arms and a CPS file without a treat column."""
    experimental = pd.concat(
        [
            nsw_frame(rng, TREATED_PROFILES, treat=1),
            nsw_frame(rng, OTHER_PROFILES, treat=0),
        ],
        ignore_index=True,
    )
    cps = nsw_frame(rng, TREATED_PROFILES + OTHER_PROFILES)
    experimental_path = tmp_path / "nsw.csv"
    cps_path = tmp_path / "cps.csv"
    experimental.to_csv(experimental_path, index=False)
    cps.to_csv(cps_path, index=False)
    return experimental_path, cps_path


class TestReadNsw:
    """Parsing the input files."""

    def test_reads_both_files(self, nsw_files):
        """The CPS file gets treat = False for every row."""
        data = read_nsw(*nsw_files)
        assert len(data.experimental) == 12
        assert int(data.experimental["treat"].sum()) == 6
        assert len(data.cps) == 12
        assert not data.cps["treat"].any()

    def test_negative_earnings(self, tmp_path, rng):
        """A negative earnings value reports its row and column."""
        frame = nsw_frame(rng, TREATED_PROFILES, treat=1)
        frame.loc[1, "re78"] = -5.0
        path = tmp_path / "bad.csv"
        frame.to_csv(path, index=False)
        with pytest.raises(ParseError) as exc:
            read_nsw_csv(path, NswColumns())
        assert exc.value.row == 3
        assert exc.value.column == "re78"

    def test_age_out_of_range(self, tmp_path, rng):
        """Ages outside 16..70 are rejected."""
        frame = nsw_frame(rng, TREATED_PROFILES, treat=1)
        frame.loc[0, "age"] = 12
        path = tmp_path / "young.csv"
        frame.to_csv(path, index=False)
        with pytest.raises(ParseError) as exc:
            read_nsw_csv(path, NswColumns())
        assert exc.value.column == "age"

    def test_missing_column(self, tmp_path, rng):
        """A file without an education column is rejected."""
        path = tmp_path / "short.csv"
        nsw_frame(rng, TREATED_PROFILES, treat=1).drop(columns="education").to_csv(
            path, index=False
        )
        with pytest.raises(MissingColumnError) as exc:
            read_nsw_csv(path, NswColumns())
        assert exc.value.column == "education"

    def test_missing_treat_without_default(self, nsw_files):
        """Only the CPS file may omit the treatment column."""
        _, cps_path = nsw_files
        with pytest.raises(MissingColumnError):
            read_nsw_csv(cps_path, NswColumns())

    def test_renamed_columns(self, tmp_path, rng):
        """Column names can be remapped."""
        path = tmp_path / "renamed.csv"
        nsw_frame(rng, TREATED_PROFILES, treat=1).rename(columns={"education": "educ"}).to_csv(
            path, index=False
        )
        frame = read_nsw_csv(path, NswColumns(education="educ"))
        assert list(frame["education"]) == [p[1] for p in TREATED_PROFILES]

    def test_missing_file(self, tmp_path):
        """A path that does not exist is a parse error."""
        with pytest.raises(ParseError):
            read_nsw_csv(tmp_path / "absent.csv", NswColumns())


class TestBuildPanel:
    """Outcome and placebo panels."""

    def test_outcome_window(self, nsw_files):
        """NSW treated units are cohort 2, CPS units never treated, outcomes 1975 and 1978."""
        data = read_nsw(*nsw_files)
        panel = build_panel(data, "outcome")
        assert panel.T == 2
        assert panel.n == 18
        np.testing.assert_array_equal(panel.cohorts[:6], 2.0)
        np.testing.assert_array_equal(panel.cohorts[6:], NEVER_TREATED)
        assert panel.period_labels == ("1975", "1978")
        assert set(panel.covariate_kinds) == {"discrete"}
        treated = data.experimental[data.experimental["treat"]]
        np.testing.assert_array_equal(panel.outcomes[:6, 1], treated["re78"].to_numpy())

    def test_indicator_covariates(self, nsw_files):
        """One indicator per observed age and education value, plus three binaries."""
        panel = build_panel(read_nsw(*nsw_files), "outcome")
        ages = {p[0] for p in TREATED_PROFILES + OTHER_PROFILES}
        educations = {p[1] for p in TREATED_PROFILES + OTHER_PROFILES}
        assert panel.q == len(ages) + len(educations) + 3
        assert panel.covariate_names[-3:] == ("married", "black", "hispanic")
        np.testing.assert_array_equal(panel.covariates[:, : len(ages)].sum(axis=1), 1.0)

    def test_placebo_window(self, nsw_files):
        """The placebo panel uses 1974 and 1975 earnings."""
        data = read_nsw(*nsw_files)
        panel = build_panel(data, "placebo")
        assert panel.period_labels == ("1974", "1975")
        np.testing.assert_array_equal(panel.outcomes[6:, 0], data.cps["re74"].to_numpy())

    def test_no_treated_units(self, nsw_files):
        """An experimental file with no treated rows cannot form a panel."""
        data = read_nsw(*nsw_files)
        controls = data.experimental[~data.experimental["treat"]]
        with pytest.raises(ParseError):
            build_panel(NswData(experimental=controls, cps=data.cps), "outcome")


class TestSpecifications:
    """The six specifications on synthetic files."""

    def test_experimental_benchmark(self, nsw_files):
        """The benchmark is the difference in mean post-period earnings."""
        data = read_nsw(*nsw_files)
        row = experimental_benchmark(data.experimental, "outcome")
        estimate, variance = difference_in_means(
            data.experimental["re78"].to_numpy(dtype=float),
            data.experimental["treat"].to_numpy(dtype=float),
        )
        assert row.coefficient == pytest.approx(estimate)
        assert row.se == pytest.approx(np.sqrt(variance))
        assert row.ci_low < row.coefficient < row.ci_high
        assert row.n_units == 12

    def test_placebo_benchmark_uses_1975(self, nsw_files):
        """The placebo benchmark compares 1975 earnings only."""
        data = read_nsw(*nsw_files)
        row = experimental_benchmark(data.experimental, "placebo")
        by_arm = data.experimental.groupby("treat")["re75"].mean()
        assert row.coefficient == pytest.approx(by_arm[True] - by_arm[False])

    def test_twelve_rows_in_order(self, nsw_files):
        """Six specifications for each window, outcome window first."""
        rows = run_specifications(build_panels(*nsw_files))
        assert [r.spec for r in rows] == list(SPEC_NAMES) * 2
        assert [r.window for r in rows] == ["outcome"] * 6 + ["placebo"] * 6
        for row in rows:
            assert row.se >= 0
            assert 0 <= row.p_value <= 1

    def test_matched_rows(self, nsw_files):
        """Naive and corrected rows share a point estimate; the matched sample is what was used."""
        panels = build_panels(*nsw_files)
        rows = {r.spec: r for r in run_specifications(panels) if r.window == "outcome"}
        assert rows["NaiveMatched2WFE"].coefficient == rows["Matched2WFE"].coefficient
        assert rows["2WFE"].n_units == panels.outcome.n
        matched = rows["2WFEMatchedSample"]
        assert matched.n_units == rows["Matched2WFE"].n_units
        assert 6 < matched.n_units <= 18
        assert any("exact-tie" in note for note in rows["Matched2WFE"].notes)


NSW_EXPERIMENTAL = os.environ.get("MATCHDID_NSW_EXPERIMENTAL")
NSW_CPS = os.environ.get("MATCHDID_NSW_CPS")


@pytest.mark.skipif(
    not (NSW_EXPERIMENTAL and NSW_CPS),
    reason="set MATCHDID_NSW_EXPERIMENTAL and MATCHDID_NSW_CPS to the NSW and CPS files",
)
class TestRealFiles:
    """Benchmark levels on the real NSW and CPS files."""

    @pytest.fixture(scope="class")
    def rows(self):
        panels = build_panels(Path(NSW_EXPERIMENTAL), Path(NSW_CPS))
        return {r.spec: r for r in run_specifications(panels) if r.window == "outcome"}

    def test_deterministic_rows(self, rows):
        """Experimental and unmatched 2WFE rows match the benchmark values."""
        assert rows["Experimental"].coefficient == pytest.approx(886.30, abs=0.5)
        assert rows["Experimental"].se == pytest.approx(488.14, abs=0.5)
        assert rows["2WFE"].coefficient == pytest.approx(1714.40, abs=0.5)
        assert rows["2WFE"].se == pytest.approx(485.93, abs=0.5)

    def test_matched_ordering(self, rows):
        """Matching moves the estimate toward the experiment and widens the corrected SE."""
        matched = rows["Matched2WFE"]
        assert abs(matched.coefficient - 886.30) < abs(matched.coefficient - 1714.40)
        assert matched.se > rows["NaiveMatched2WFE"].se
        assert rows["2WFEMatchedSample"].coefficient < matched.coefficient
        assert matched.coefficient == pytest.approx(929.82, rel=0.15)
        assert rows["Matched2WFE-BC"].coefficient == pytest.approx(809.21, rel=0.15)
        assert rows["2WFEMatchedSample"].coefficient == pytest.approx(418.10, rel=0.15)
