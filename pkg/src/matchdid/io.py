"""Reading and writing panels, alpha tables and run reports.

Panels come in long format: one row per unit-period with unit id, period,
outcome, cohort and time-invariant covariate columns. Periods are re-indexed to
1..T in sorted order; a cohort label in the file's calendar (e.g. 1978) becomes
the index of the first period at or after it.
"""

from __future__ import annotations

import logging
import math
import re
from collections.abc import Sequence
from dataclasses import asdict
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from matchdid.config import PanelColumns, RunConfig
from matchdid.decomposition import BiasDecomposition, PlimWeights
from matchdid.errors import (
    MissingColumnError,
    ParseError,
    TimeVaryingCovariateError,
    UnbalancedPanelError,
)
from matchdid.estimators.reports import DecompositionReport, EstimateReport
from matchdid.inference import AlphaTable
from matchdid.matching import MatchResult
from matchdid.panel import (
    NEVER_TREATED,
    CovariateKind,
    FloatArray,
    PanelDataset,
    format_cohort,
    is_never_treated,
    parse_cohort,
    validate,
)
from matchdid.replication import SpecResult
from matchdid.simulation.runner import SimulationSummary

logger = logging.getLogger(__name__)

_NEVER_TOKENS = frozenset({"", "inf", "+inf", "infinity", "never", "nan", "∞"})


# ---------------------------------------------------------------------------
# Panels
# ---------------------------------------------------------------------------


def _floats(frame: pd.DataFrame, column: str, allow_empty: bool) -> FloatArray:
    values = np.empty(len(frame), dtype=np.float64)
    for position, raw in enumerate(frame[column]):
        text = raw.strip()
        if not text and allow_empty:
            values[position] = math.nan
            continue
        try:
            values[position] = float(text)
        except ValueError:
            raise ParseError(
                f"cannot parse {raw!r} as a number", row=position + 2, column=column
            ) from None
    return values


def _period_order(labels: Sequence[str]) -> tuple[list[str], FloatArray | None]:
    """Sorted distinct labels, with their numeric values when every label is numeric."""
    distinct = list(dict.fromkeys(labels))
    try:
        numeric = {label: float(label) for label in distinct}
    except ValueError:
        return sorted(distinct), None
    ordered = sorted(distinct, key=numeric.__getitem__)
    return ordered, np.array([numeric[label] for label in ordered], dtype=np.float64)


def _cohort_index(
    token: str, row: int, column: str, periods: list[str], values: FloatArray | None
) -> float:
    text = token.strip()
    if text.lower() in _NEVER_TOKENS:
        return NEVER_TREATED
    if values is None:
        if text not in periods:
            raise ParseError(f"cohort {token!r} is not one of the periods", row=row, column=column)
        return float(periods.index(text) + 1)
    try:
        label = parse_cohort(text)
    except ValueError as e:
        raise ParseError(str(e), row=row, column=column) from None
    if is_never_treated(label):
        return NEVER_TREATED
    # First period at or after the label; past the last period gives T + 1, which validate rejects.
    return float(np.searchsorted(values, label, side="left") + 1)


def read_panel_csv(path: Path, columns: PanelColumns | None = None) -> PanelDataset:
    """Read a long-format panel CSV into a validated PanelDataset.

    Args:
        path: CSV file with a header row.
        columns: Column names; covariates default to every column not otherwise named.

    Raises:
        MissingColumnError: A named column is absent.
        ParseError: A value cannot be parsed, or a unit-period appears twice.
        TimeVaryingCovariateError: A unit's cohort or covariate differs across its rows.
        UnbalancedPanelError: A unit lacks a row or an outcome for some period.
    """
    columns = columns or PanelColumns()
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except FileNotFoundError:
        raise ParseError(f"{path} does not exist") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ParseError(f"{path}: {e}") from e

    base = [columns.unit, columns.period, columns.outcome, columns.cohort]
    covariate_names = columns.covariates or [c for c in frame.columns if c not in base]
    for column in base + covariate_names:
        if column not in frame.columns:
            raise MissingColumnError(column, str(path))
    if not covariate_names:
        raise ParseError(f"{path}: no covariate columns")
    unknown = set(columns.discrete) - set(covariate_names)
    if unknown:
        raise ParseError(f"discrete columns {sorted(unknown)} are not covariates")

    units = frame[columns.unit].str.strip()
    labels = frame[columns.period].str.strip()
    duplicated = (units + "\x00" + labels).duplicated()
    if duplicated.any():
        position = int(np.flatnonzero(duplicated.to_numpy())[0])
        raise ParseError(
            f"unit {units.iloc[position]!r} has two rows for period {labels.iloc[position]!r}",
            row=position + 2,
        )

    periods, period_values = _period_order(labels.tolist())
    unit_ids = list(dict.fromkeys(units))
    unit_index = units.map({u: i for i, u in enumerate(unit_ids)}).to_numpy(dtype=np.int64)
    period_index = labels.map({p: t for t, p in enumerate(periods)}).to_numpy(dtype=np.int64)
    n, T = len(unit_ids), len(periods)

    outcomes = np.full((n, T), np.nan)
    present = np.zeros((n, T), dtype=bool)
    outcomes[unit_index, period_index] = _floats(frame, columns.outcome, allow_empty=True)
    present[unit_index, period_index] = True
    if not present.all():
        unit, t = (int(v) for v in np.argwhere(~present)[0])
        raise UnbalancedPanelError(f"unit {unit_ids[unit]!r} has no row for period {periods[t]!r}")

    cohorts = np.array(
        [
            _cohort_index(token, position + 2, columns.cohort, periods, period_values)
            for position, token in enumerate(frame[columns.cohort])
        ],
        dtype=np.float64,
    )
    per_unit: dict[str, FloatArray] = {columns.cohort: cohorts}
    for name in covariate_names:
        per_unit[name] = _floats(frame, name, allow_empty=False)
    first_rows = np.unique(unit_index, return_index=True)[1]
    for name, values in per_unit.items():
        spread = pd.Series(values).groupby(unit_index).nunique(dropna=False)
        if (spread > 1).any():
            raise TimeVaryingCovariateError(unit_ids[int(spread.idxmax())], name)

    if periods != [str(t) for t in range(1, T + 1)]:
        logger.info(f"[IO] re-indexed periods {periods} to 1..{T}")
    kinds: tuple[CovariateKind, ...] = tuple(
        "discrete" if name in columns.discrete else "continuous" for name in covariate_names
    )
    panel = PanelDataset(
        outcomes=outcomes,
        cohorts=cohorts[first_rows],
        covariates=np.column_stack([per_unit[name][first_rows] for name in covariate_names]),
        covariate_kinds=kinds,
        unit_ids=tuple(unit_ids),
        period_labels=tuple(periods),
        covariate_names=tuple(covariate_names),
        metadata={"source": str(path)},
    )
    validate(panel)
    logger.info(f"[IO] read panel from {path}: n={n}, T={T}, q={panel.q}")
    return panel


def write_panel_csv(panel: PanelDataset, path: Path) -> PanelColumns:
    """Write a panel in long format; returns the column layout to read it back with."""
    columns = PanelColumns()
    names = list(panel.covariate_names or [f"x{k + 1}" for k in range(panel.q)])
    taken = {columns.unit, columns.period, columns.outcome, columns.cohort}
    if taken & set(names):
        raise ValueError(f"covariate names {sorted(taken & set(names))} clash with panel columns")
    periods = list(panel.period_labels or [str(t) for t in range(1, panel.T + 1)])
    unit_ids = list(panel.unit_ids or [str(i) for i in range(panel.n)])

    def cohort_label(c: float) -> str:
        return "inf" if is_never_treated(c) else periods[int(c) - 1]

    frame = pd.DataFrame(
        {
            columns.unit: np.repeat(unit_ids, panel.T),
            columns.period: np.tile(periods, panel.n),
            columns.outcome: panel.outcomes.ravel(),
            columns.cohort: np.repeat([cohort_label(c) for c in panel.cohorts], panel.T),
        }
    )
    for k, name in enumerate(names):
        frame[name] = np.repeat(panel.covariates[:, k], panel.T)
    frame.to_csv(path, index=False, float_format="%.17g")
    logger.info(f"[IO] wrote panel to {path}")
    return PanelColumns(
        covariates=names,
        discrete=[
            name
            for name, kind in zip(names, panel.covariate_kinds, strict=True)
            if kind == "discrete"
        ],
    )


# ---------------------------------------------------------------------------
# Alpha tables
# ---------------------------------------------------------------------------


def load_alpha_table(path: Path) -> AlphaTable:
    """Read "M q value" lines (comma or whitespace separated, '#' comments).

    Raises:
        ParseError: A line does not hold two integers and a number, or repeats a key.
    """
    entries: dict[tuple[int, int], float] = {}
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ParseError(f"{path} does not exist") from None
    for number, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        parts = [p for p in re.split(r"[,\s]+", content) if p]
        try:
            M, q, value = int(parts[0]), int(parts[1]), float(parts[2])
        except (IndexError, ValueError):
            raise ParseError(f"{path}: expected 'M q value', got {line!r}", row=number) from None
        if len(parts) != 3:
            raise ParseError(f"{path}: expected 'M q value', got {line!r}", row=number)
        if (M, q) in entries:
            raise ParseError(f"{path}: alpha({M}, {q}) given twice", row=number)
        entries[(M, q)] = value
    try:
        return AlphaTable(entries=entries)
    except ValueError as e:
        raise ParseError(f"{path}: {e}") from e


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


class RunDocument(BaseModel):
    """Machine-readable output of one CLI run."""

    command: str
    config: dict[str, Any]
    results: list[dict[str, Any]]
    diagnostics: dict[str, Any] = Field(default_factory=dict)


def build_document(
    command: str,
    config: RunConfig,
    results: Sequence[BaseModel | dict[str, Any]],
    diagnostics: dict[str, Any] | None = None,
) -> RunDocument:
    return RunDocument(
        command=command,
        config=config.model_dump(mode="json"),
        results=[r.model_dump(mode="json") if isinstance(r, BaseModel) else r for r in results],
        diagnostics=diagnostics or {},
    )


def _table(rows: list[dict[str, Any]]) -> str:
    if not rows:
        return "(no rows)"
    return pd.DataFrame(rows).to_string(index=False, na_rep="-", float_format=lambda v: f"{v:.4f}")


def format_estimates(reports: Sequence[EstimateReport]) -> str:
    rows = [
        {
            "estimator": r.estimator,
            "cohort": r.target.cohort,
            "comparison": r.target.comparison,
            "estimate": r.estimate,
            "bias-corrected": r.bias_corrected_estimate,
            "naive se": r.naive_se,
            "corrected se": r.corrected_se,
            "ci low": r.ci_low,
            "ci high": r.ci_high,
            "p": r.p_value,
        }
        for r in reports
    ]
    notes = [f"  [{r.target.cohort}] {note}" for r in reports for note in r.diagnostics.notes]
    return _table(rows) + ("\nnotes:\n" + "\n".join(notes) if notes else "")


def format_match(result: MatchResult) -> str:
    spec = result.spec
    header = (
        f"cohort {format_cohort(spec.target_cohort)} vs {format_cohort(spec.comparison_cohort)}: "
        f"M={spec.M}, {spec.replacement} replacement, {result.n_targets} targets, "
        f"{result.used_comparisons} comparisons used, max usage {result.max_usage}, "
        f"mean distance {result.mean_distance:.4f}"
    )
    rows = [
        {
            "target": int(i),
            "neighbors": " ".join(str(int(j)) for j in js),
            "distance": float(d.max()),
        }
        for i, js, d in zip(result.targets, result.neighbors, result.distances, strict=True)
    ]
    return header + "\n" + _table(rows)


def format_decomposition(report: DecompositionReport) -> str:
    rows = [c.model_dump() for c in report.components]
    by_kind = ", ".join(f"{kind} {total:.4f}" for kind, total in report.weight_by_kind().items())
    return (
        f"estimate {report.estimate:.6f}, denominator {report.denominator:.6f}\n"
        f"normalized weight by kind: {by_kind}\n"
        "forbidden: comparison cohort s' already treated at post period t (t >= s')\n"
        + _table(rows)
    )


def format_weights(weights: PlimWeights, bias: BiasDecomposition | None = None) -> str:
    def key(cohorts: tuple[float, ...]) -> str:
        return ",".join(format_cohort(c) for c in cohorts)

    groups: list[tuple[str, dict[str, float]]] = [
        ("phi1", {key((s,)): v for s, v in weights.phi1.items()}),
        ("phi2", {key(pair): v for pair, v in weights.phi2.items()}),
        ("eta1", {key(pair): v for pair, v in weights.eta1.items()}),
        ("eta2", {key(pair): v for pair, v in weights.eta2.items()}),
        ("eta3", {key(pair): v for pair, v in weights.eta3.items()}),
        ("eta0", {key((s,)): v for s, v in weights.eta0.items()}),
    ]
    rows = [
        {"weight": name, "cohorts": cohorts, "value": value}
        for name, values in groups
        for cohorts, value in values.items()
    ]
    text = _table(rows) + f"\nsum of phi: {weights.att_weight_total:.12f}"
    if bias is not None:
        text += "\n" + _table([asdict(bias)])
    return text


def format_simulation(summary: SimulationSummary) -> str:
    """One column per estimator, rows labelled the way Monte Carlo tables usually are."""
    labels = [
        ("Bias", "mean_bias"),
        ("MC se", "mc_sd"),
        ("Naive CR se", "mean_naive_se"),
        ("Coverage (naive)", "naive_coverage"),
        ("Corrected se", "mean_corrected_se"),
        ("Coverage (corrected)", "corrected_coverage"),
    ]
    table = pd.DataFrame(
        {row.name: [getattr(row, field) for _, field in labels] for row in summary.rows},
        index=[label for label, _ in labels],
    )
    header = (
        f"design {summary.design}: {summary.replications} replications, n={summary.n}, "
        f"seed {summary.seed}, estimand {summary.estimand:.4f}, redraws {summary.redraws}, "
        f"{summary.wall_time:.1f}s"
    )
    return header + "\n" + table.to_string(na_rep="-", float_format=lambda v: f"{v:.3f}")


def format_specifications(results: Sequence[SpecResult]) -> str:
    return _table([r.model_dump(exclude={"notes"}) for r in results])
