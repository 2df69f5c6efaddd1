"""NSW job-training replication: experimental benchmark against matched DiD on CPS comparisons.

Inputs are two CSV files: the NSW experimental sample (treated and control
arms) and a CPS comparison sample. NSW treated units combined with CPS units
form two-period panels:

* outcome window: 1975 earnings (period 1) and 1978 earnings (period 2)
* placebo window: 1974 earnings (period 1) and 1975 earnings (period 2)

Covariates are indicators for every observed age and years of education, plus
married, Black and Hispanic, all flagged discrete.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError
from scipy.stats import norm

from matchdid.config import NswColumns
from matchdid.errors import (
    DegenerateDesignError,
    MissingColumnError,
    ParseError,
    TooFewForSigmaError,
)
from matchdid.estimators.pairwise import bias_corrected_pairwise, pairwise_matched_did
from matchdid.estimators.reports import CONFIDENCE_LEVEL
from matchdid.estimators.twfe import WeightVector, weighted_2wfe
from matchdid.inference import cluster_robust_variance, difference_in_means
from matchdid.matching import MatchSpec, match
from matchdid.panel import NEVER_TREATED, FloatArray, PanelDataset, PeriodSelector, validate

logger = logging.getLogger(__name__)

Window = Literal["outcome", "placebo"]
SpecName = Literal[
    "Experimental",
    "2WFE",
    "NaiveMatched2WFE",
    "Matched2WFE",
    "Matched2WFE-BC",
    "2WFEMatchedSample",
]
SPEC_NAMES: tuple[SpecName, ...] = (
    "Experimental",
    "2WFE",
    "NaiveMatched2WFE",
    "Matched2WFE",
    "Matched2WFE-BC",
    "2WFEMatchedSample",
)

WINDOW_YEARS: dict[Window, tuple[str, str]] = {
    "outcome": ("re75", "re78"),
    "placebo": ("re74", "re75"),
}
WINDOW_LABELS: dict[Window, tuple[str, str]] = {
    "outcome": ("1975", "1978"),
    "placebo": ("1974", "1975"),
}
# Experimental benchmark: post-period earnings only.
EXPERIMENT_OUTCOME: dict[Window, str] = {"outcome": "re78", "placebo": "re75"}


class NswRecord(BaseModel):
    """One person from the NSW experimental file or the CPS comparison file."""

    treat: bool
    re74: float = Field(..., ge=0)
    re75: float = Field(..., ge=0)
    re78: float = Field(..., ge=0)
    age: int = Field(..., ge=16, le=70)
    education: int = Field(..., ge=0, le=20)
    married: int = Field(..., ge=0, le=1)
    black: int = Field(..., ge=0, le=1)
    hispanic: int = Field(..., ge=0, le=1)


class SpecResult(BaseModel):
    """One row of the replication table, in dollars."""

    spec: SpecName
    window: Window
    coefficient: float
    se: float = Field(..., ge=0)
    p_value: float = Field(..., ge=0, le=1)
    ci_low: float
    ci_high: float
    n_units: int
    notes: list[str] = Field(default_factory=list)


@dataclass(frozen=True)
class NswData:
    """Parsed inputs: experimental arms and the CPS comparison sample."""

    experimental: pd.DataFrame
    cps: pd.DataFrame


@dataclass(frozen=True)
class NswPanels:
    """Everything the six specifications need, for both windows."""

    experimental: pd.DataFrame
    outcome: PanelDataset
    placebo: PanelDataset

    def panel(self, window: Window) -> PanelDataset:
        return self.outcome if window == "outcome" else self.placebo


def read_nsw_csv(
    path: Path, columns: NswColumns, default_treat: bool | None = None
) -> pd.DataFrame:
    """Read and validate an NSW/CPS file into canonical column names.

    Args:
        path: CSV with a header row.
        columns: Column names in the file.
        default_treat: Treatment flag for files without a treatment column (CPS).

    Raises:
        MissingColumnError: A required column is absent.
        ParseError: A value fails to parse or violates its range; carries row and column.
    """
    try:
        frame = pd.read_csv(path, skipinitialspace=True)
    except FileNotFoundError:
        raise ParseError(f"{path} does not exist") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ParseError(f"{path}: {e}") from e

    mapping = columns.model_dump()
    if mapping["treat"] not in frame.columns:
        if default_treat is None:
            raise MissingColumnError(mapping["treat"], str(path))
        frame[mapping["treat"]] = int(default_treat)
    for name in mapping.values():
        if name not in frame.columns:
            raise MissingColumnError(name, str(path))

    renamed = frame[list(mapping.values())].rename(columns={v: k for k, v in mapping.items()})
    records = []
    for position, row in enumerate(renamed.to_dict(orient="records")):
        try:
            records.append(NswRecord.model_validate(row).model_dump())
        except ValidationError as e:
            first = e.errors()[0]
            field = str(first["loc"][0]) if first["loc"] else None
            raise ParseError(
                f"{path}: {first['msg']}",
                row=position + 2,
                column=mapping.get(field, field) if field else None,
            ) from e
    logger.info(f"[NSW] read {len(records)} records from {path}")
    return pd.DataFrame.from_records(records, columns=list(NswRecord.model_fields))


def read_nsw(experimental: Path, cps: Path, columns: NswColumns | None = None) -> NswData:
    columns = columns or NswColumns()
    return NswData(
        experimental=read_nsw_csv(experimental, columns),
        cps=read_nsw_csv(cps, columns, default_treat=False),
    )


def indicator_covariates(frame: pd.DataFrame) -> tuple[FloatArray, tuple[str, ...]]:
    """Indicators for each distinct age and education value, then married, black, hispanic."""
    parts = [
        pd.get_dummies(frame["age"], prefix="age", dtype=np.float64),
        pd.get_dummies(frame["education"], prefix="educ", dtype=np.float64),
        frame[["married", "black", "hispanic"]].astype(np.float64),
    ]
    covariates = pd.concat(parts, axis=1)
    return covariates.to_numpy(dtype=np.float64), tuple(str(c) for c in covariates.columns)


def build_panel(data: NswData, window: Window) -> PanelDataset:
    """Two-period panel of NSW treated units (cohort 2) and CPS units (never treated).

    Raises:
        ParseError: The experimental file has no treated units.
    """
    treated = data.experimental[data.experimental["treat"]]
    if treated.empty:
        raise ParseError("experimental file has no treated units", column="treat")
    combined = pd.concat([treated, data.cps], ignore_index=True)
    first, second = WINDOW_YEARS[window]
    covariates, names = indicator_covariates(combined)
    cohorts = np.where(combined["treat"].to_numpy(dtype=bool), 2.0, NEVER_TREATED)
    panel = PanelDataset(
        outcomes=combined[[first, second]].to_numpy(dtype=np.float64),
        cohorts=cohorts,
        covariates=covariates,
        covariate_kinds=("discrete",) * len(names),
        unit_ids=tuple(f"{'nsw' if t else 'cps'}-{i}" for i, t in enumerate(combined["treat"])),
        period_labels=WINDOW_LABELS[window],
        covariate_names=names,
        metadata={"window": window},
    )
    validate(panel)
    logger.info(
        f"[NSW] {window} window: {int(np.isfinite(cohorts).sum())} treated, "
        f"{int(np.isinf(cohorts).sum())} comparison units, {len(names)} indicators"
    )
    return panel


def build_panels(
    experimental: Path, cps: Path, columns: NswColumns | None = None
) -> NswPanels:
    """Parse both files and build the outcome and placebo panels."""
    data = read_nsw(experimental, cps, columns)
    return NswPanels(
        experimental=data.experimental,
        outcome=build_panel(data, "outcome"),
        placebo=build_panel(data, "placebo"),
    )


def _result(
    spec: SpecName,
    window: Window,
    coefficient: float,
    se: float,
    n_units: int,
    notes: list[str] | None = None,
) -> SpecResult:
    z = float(norm.ppf(0.5 + CONFIDENCE_LEVEL / 2))
    p_value = float(2.0 * norm.sf(abs(coefficient) / se)) if se > 0 else float(coefficient == 0)
    return SpecResult(
        spec=spec,
        window=window,
        coefficient=coefficient,
        se=se,
        p_value=p_value,
        ci_low=coefficient - z * se,
        ci_high=coefficient + z * se,
        n_units=n_units,
        notes=notes or [],
    )


def experimental_benchmark(experimental: pd.DataFrame, window: Window) -> SpecResult:
    """Difference in mean post-period earnings between the experimental arms."""
    y = experimental[EXPERIMENT_OUTCOME[window]].to_numpy(dtype=np.float64)
    treated = experimental["treat"].to_numpy(dtype=np.float64)
    estimate, variance = difference_in_means(y, treated)
    return _result("Experimental", window, estimate, math.sqrt(variance), len(y))


def unmatched_2wfe(panel: PanelDataset, window: Window, spec: SpecName = "2WFE") -> SpecResult:
    """Unweighted 2WFE with unit-clustered, regression-style standard errors."""
    lam = PeriodSelector.all_periods(panel.T)
    weights = WeightVector.uniform(panel)
    estimate = weighted_2wfe(panel, weights, lam)
    variance = cluster_robust_variance(panel, weights.w, lam, small_sample=True)
    return _result(spec, window, estimate, math.sqrt(variance), panel.n)


def run_window(
    panels: NswPanels, window: Window, M: int = 1, J: int = 2, workers: int = 1
) -> list[SpecResult]:
    """The six specifications on one window, in table order."""
    panel = panels.panel(window)
    lam = PeriodSelector.all_periods(panel.T)
    result = match(panel, MatchSpec(target_cohort=2.0, M=M), workers=workers)
    matched_size = result.n_targets + result.used_comparisons
    tie_note = f"{int(np.count_nonzero(result.distances == 0))} exact-tie matches"

    plain = pairwise_matched_did(panel, result, lam, sigma_neighbors=J, workers=workers)
    corrected = bias_corrected_pairwise(panel, result, lam, sigma_neighbors=J, workers=workers)
    if plain.naive_se is None:
        raise DegenerateDesignError(f"{window} window: naive SE unavailable")
    if plain.corrected_se is None or corrected.corrected_se is None:
        raise TooFewForSigmaError(
            f"{window} window: corrected SE unavailable ({plain.diagnostics.notes})"
        )

    keep = np.flatnonzero(np.isfinite(panel.cohorts) | (result.usage > 0))
    matched_sample = panel.subset(keep)

    rows = [
        experimental_benchmark(panels.experimental, window),
        unmatched_2wfe(panel, window),
        _result("NaiveMatched2WFE", window, plain.estimate, plain.naive_se, matched_size,
                [tie_note]),
        _result("Matched2WFE", window, plain.estimate, plain.corrected_se, matched_size,
                [tie_note]),
        _result("Matched2WFE-BC", window, corrected.point, corrected.corrected_se, matched_size,
                list(corrected.diagnostics.notes)),
        unmatched_2wfe(matched_sample, window, spec="2WFEMatchedSample"),
    ]
    logger.info(f"[NSW] {window} window: {len(rows)} specifications done")
    return rows


def run_specifications(
    panels: NswPanels, M: int = 1, J: int = 2, workers: int = 1
) -> list[SpecResult]:
    """All six specifications for the outcome window followed by the placebo window."""
    windows: tuple[Window, ...] = ("outcome", "placebo")
    return [
        row
        for window in windows
        for row in run_window(panels, window, M=M, J=J, workers=workers)
    ]
