"""Staggered panel data model and the transformed-outcome representation.

Periods are ordinal, 1..T. A unit's cohort is the first period in which it is
treated; never-treated units carry ``NEVER_TREATED`` (``math.inf``), so cohort
labels live in a float array and order naturally with every finite cohort
sorting before never-treated.
"""

from __future__ import annotations

import hashlib
import logging
import math
from collections.abc import Iterable
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Final, Literal

import numpy as np
import numpy.typing as npt

from matchdid.errors import (
    DegenerateDesignError,
    EmptyWindowError,
    InvalidCohortLabelError,
    UnbalancedPanelError,
)

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]

CohortLabel = float
CovariateKind = Literal["continuous", "discrete"]

NEVER_TREATED: Final[CohortLabel] = math.inf

_NEVER_TREATED_TOKENS = frozenset({"", "inf", "+inf", "infinity", "never", "nan"})


def parse_cohort(value: object) -> CohortLabel:
    """Parse a cohort label from text or a number; "inf" and empty mean never-treated."""
    if value is None:
        return NEVER_TREATED
    if isinstance(value, str):
        token = value.strip().lower()
        if token in _NEVER_TREATED_TOKENS or token == "∞":
            return NEVER_TREATED
        number = float(token)
    else:
        number = float(value)  # type: ignore[arg-type]
    if math.isnan(number) or math.isinf(number):
        return NEVER_TREATED
    if not number.is_integer():
        raise ValueError(f"cohort label must be an integer period, got {value!r}")
    return float(int(number))


def format_cohort(cohort: CohortLabel) -> str:
    """Render a cohort label; never-treated serializes as "inf"."""
    return "inf" if math.isinf(cohort) else str(int(cohort))


def is_never_treated(cohort: CohortLabel) -> bool:
    return math.isinf(cohort)


def _readonly(array: npt.ArrayLike, ndim: int, name: str) -> FloatArray:
    out = np.array(array, dtype=np.float64, copy=True)
    if ndim == 2 and out.ndim == 1:
        out = out.reshape(-1, 1)
    if out.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Balanced unit-by-period panel with cohort labels and time-invariant covariates.

    Attributes:
        outcomes: n x T outcome matrix; column t-1 holds period t.
        cohorts: Length-n cohort labels (finite period or ``NEVER_TREATED``).
        covariates: n x q covariate matrix.
        covariate_kinds: Per-column "continuous" or "discrete".
        unit_ids: Optional external unit identifiers, in row order.
        period_labels: Optional external period labels (e.g. calendar years).
        covariate_names: Optional covariate column names.
    """

    outcomes: FloatArray
    cohorts: FloatArray
    covariates: FloatArray
    covariate_kinds: tuple[CovariateKind, ...] = ()
    unit_ids: tuple[str, ...] | None = None
    period_labels: tuple[str, ...] | None = None
    covariate_names: tuple[str, ...] | None = None
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        outcomes = _readonly(self.outcomes, 2, "outcomes")
        cohorts = _readonly(self.cohorts, 1, "cohorts")
        covariates = _readonly(self.covariates, 2, "covariates")
        n = outcomes.shape[0]
        if cohorts.shape[0] != n or covariates.shape[0] != n:
            raise ValueError(
                f"row counts disagree: outcomes {n}, cohorts {cohorts.shape[0]}, "
                f"covariates {covariates.shape[0]}"
            )
        kinds = tuple(self.covariate_kinds) or ("continuous",) * covariates.shape[1]
        if len(kinds) != covariates.shape[1]:
            raise ValueError(f"expected {covariates.shape[1]} covariate kinds, got {len(kinds)}")
        object.__setattr__(self, "outcomes", outcomes)
        object.__setattr__(self, "cohorts", cohorts)
        object.__setattr__(self, "covariates", covariates)
        object.__setattr__(self, "covariate_kinds", kinds)

    @property
    def n(self) -> int:
        return int(self.outcomes.shape[0])

    @property
    def T(self) -> int:
        return int(self.outcomes.shape[1])

    @property
    def q(self) -> int:
        return int(self.covariates.shape[1])

    @cached_property
    def fingerprint(self) -> str:
        """Content hash used to check that match results belong to this panel."""
        digest = hashlib.sha1()
        for array in (self.outcomes, self.cohorts, self.covariates):
            digest.update(np.ascontiguousarray(array).tobytes())
            digest.update(str(array.shape).encode())
        return digest.hexdigest()

    @property
    def all_discrete(self) -> bool:
        return all(kind == "discrete" for kind in self.covariate_kinds)

    def cohort_labels(self) -> list[CohortLabel]:
        """Distinct cohort labels in ascending order (never-treated last)."""
        return [float(c) for c in np.unique(self.cohorts)]

    def units_in(self, cohort: CohortLabel) -> IntArray:
        """Row indices of the units in ``cohort``, ascending."""
        return np.flatnonzero(self.cohorts == cohort).astype(np.int64)

    def treatment(self) -> FloatArray:
        """Treatment indicators D_it = 1(t >= cohort_i) as an n x T matrix."""
        periods = np.arange(1, self.T + 1, dtype=np.float64)
        return (periods[None, :] >= self.cohorts[:, None]).astype(np.float64)

    def with_outcomes(self, outcomes: npt.ArrayLike) -> PanelDataset:
        """Copy of the panel with the outcome matrix replaced."""
        return replace(self, outcomes=np.asarray(outcomes, dtype=np.float64))

    def subset(self, rows: npt.ArrayLike) -> PanelDataset:
        """Copy restricted to the given row indices, in the given order."""
        index = np.asarray(rows, dtype=np.int64)
        return replace(
            self,
            outcomes=self.outcomes[index],
            cohorts=self.cohorts[index],
            covariates=self.covariates[index],
            unit_ids=None if self.unit_ids is None else tuple(self.unit_ids[i] for i in index),
        )


@dataclass(frozen=True)
class PeriodSelector:
    """Indicators lambda_t marking which periods enter the estimator.

    Attributes:
        lam: Length-T tuple of 0/1 flags.
    """

    lam: tuple[int, ...]

    def __post_init__(self) -> None:
        lam = tuple(int(v) for v in self.lam)
        if any(v not in (0, 1) for v in lam):
            raise ValueError(f"period selector entries must be 0 or 1, got {self.lam}")
        if sum(lam) < 2:
            raise ValueError("period selector must include at least two periods")
        object.__setattr__(self, "lam", lam)

    @classmethod
    def all_periods(cls, T: int) -> PeriodSelector:
        return cls(lam=(1,) * T)

    @classmethod
    def from_periods(cls, T: int, periods: Iterable[int]) -> PeriodSelector:
        """Selector including exactly the listed 1-based periods."""
        chosen = set(periods)
        unknown = chosen - set(range(1, T + 1))
        if unknown:
            raise ValueError(f"periods {sorted(unknown)} lie outside 1..{T}")
        return cls(lam=tuple(1 if t in chosen else 0 for t in range(1, T + 1)))

    @classmethod
    def parse(cls, text: str | None, T: int) -> PeriodSelector:
        """Parse "1,1,0,1" flags or "all"; None means all periods."""
        if text is None or text.strip().lower() in ("", "all"):
            return cls.all_periods(T)
        flags = tuple(int(part) for part in text.replace(" ", "").split(","))
        if len(flags) != T:
            raise ValueError(f"period selector has {len(flags)} entries, panel has T={T}")
        return cls(lam=flags)

    @property
    def T(self) -> int:
        return len(self.lam)

    @property
    def total(self) -> int:
        return sum(self.lam)

    @property
    def weights(self) -> FloatArray:
        return np.asarray(self.lam, dtype=np.float64)

    def post_periods(self, s: CohortLabel) -> list[int]:
        return [t for t in range(1, self.T + 1) if self.lam[t - 1] and t >= s]

    def pre_periods(self, s: CohortLabel) -> list[int]:
        return [t for t in range(1, self.T + 1) if self.lam[t - 1] and t < s]

    def share_post(self, s: CohortLabel) -> float:
        """Lambda_s: share of included periods at or after period s."""
        return len(self.post_periods(s)) / self.total

    def __str__(self) -> str:
        return ",".join(str(v) for v in self.lam)


@dataclass(frozen=True)
class CohortShares:
    """Cohort probabilities p_s (population) or N_s / n (sample).

    Attributes:
        p: Map from cohort label to share; never-treated keyed by ``NEVER_TREATED``.
    """

    p: dict[CohortLabel, float]

    def __post_init__(self) -> None:
        if not self.p:
            raise ValueError("cohort shares are empty")
        if any(v < 0 or v > 1 for v in self.p.values()):
            raise ValueError(f"cohort shares must lie in [0, 1], got {self.p}")
        total = math.fsum(self.p.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"cohort shares must sum to 1, got {total}")
        object.__setattr__(self, "p", dict(sorted(self.p.items())))

    @classmethod
    def from_sequence(cls, shares: Iterable[float], cohorts: Iterable[CohortLabel]) -> CohortShares:
        """Pair shares with cohorts; a share without a cohort belongs to never-treated."""
        values = list(shares)
        labels = list(cohorts)
        if len(labels) == len(values) - 1:
            labels.append(NEVER_TREATED)
        if len(labels) != len(values):
            raise ValueError(f"{len(values)} shares for {len(labels)} cohorts")
        return cls(p=dict(zip(labels, values, strict=True)))

    @property
    def never_treated(self) -> float:
        return self.p.get(NEVER_TREATED, 0.0)

    @property
    def finite_cohorts(self) -> list[CohortLabel]:
        return [c for c in self.p if not is_never_treated(c)]

    def __getitem__(self, cohort: CohortLabel) -> float:
        return self.p.get(cohort, 0.0)


def validate(panel: PanelDataset) -> None:
    """Check the panel invariants; return normally if the panel is usable.

    Raises:
        UnbalancedPanelError: Some outcome cell is missing (NaN).
        InvalidCohortLabelError: A unit has cohort 1 or a finite cohort beyond T.
        DegenerateDesignError: Fewer than two distinct cohorts.
        ValueError: Covariates are not finite.
    """
    if panel.q < 1:
        raise ValueError("panel needs at least one covariate column")
    missing = np.isnan(panel.outcomes)
    if missing.any():
        unit = int(np.argwhere(missing)[0][0])
        raise UnbalancedPanelError(
            f"unit {panel.unit_ids[unit] if panel.unit_ids else unit} has missing outcomes"
        )
    if not np.isfinite(panel.covariates).all():
        raise ValueError("covariate values must be finite")

    finite = panel.cohorts[np.isfinite(panel.cohorts)]
    bad = finite[(finite < 2) | (finite > panel.T) | (finite != np.round(finite))]
    if bad.size:
        raise InvalidCohortLabelError(
            f"cohort label {format_cohort(float(bad[0]))} is invalid for T={panel.T}; "
            "finite cohorts must be integers in 2..T"
        )
    if np.isnan(panel.cohorts).any():
        raise InvalidCohortLabelError("cohort labels contain NaN")
    if len(panel.cohort_labels()) < 2:
        raise DegenerateDesignError("panel has a single cohort, so no treatment variation exists")


def transform_outcome(
    panel: PanelDataset, s: CohortLabel, lam: PeriodSelector
) -> FloatArray:
    """Post-minus-pre mean outcome over the selected periods, for every unit.

    Args:
        panel: The panel.
        s: Finite cohort defining the pre (t < s) and post (t >= s) windows.
        lam: Period selector.

    Returns:
        Length-n array of transformed outcomes.

    Raises:
        EmptyWindowError: The selector includes no pre period or no post period.
    """
    if lam.T != panel.T:
        raise ValueError(f"period selector has T={lam.T}, panel has T={panel.T}")
    post = lam.post_periods(s)
    pre = lam.pre_periods(s)
    if not post or not pre:
        window = "post" if not post else "pre"
        raise EmptyWindowError(f"cohort {format_cohort(s)}: no {window}-treatment period selected")
    post_idx = np.asarray(post, dtype=np.int64) - 1
    pre_idx = np.asarray(pre, dtype=np.int64) - 1
    result: FloatArray = panel.outcomes[:, post_idx].mean(axis=1) - panel.outcomes[
        :, pre_idx
    ].mean(axis=1)
    return result


def sample_shares(panel: PanelDataset) -> CohortShares:
    """Empirical cohort shares N_s / n."""
    labels, counts = np.unique(panel.cohorts, return_counts=True)
    n = panel.n
    shares = {float(c): int(k) / n for c, k in zip(labels, counts, strict=True)}
    return CohortShares(p=shares)


def double_demean(values: FloatArray, w: FloatArray, lam: PeriodSelector) -> FloatArray:
    """Two-way demean an n x T matrix under unit weights w and period weights lambda.

    Subtracts the lambda-weighted unit mean and the w-weighted period mean and adds
    back the grand mean. With product weights w_i * lambda_t on a balanced panel
    this is the exact residual from projecting on unit and period dummies.
    """
    lam_w = lam.weights
    total_lam = lam_w.sum()
    total_w = w.sum()
    unit_mean = (values * lam_w[None, :]).sum(axis=1) / total_lam
    period_mean = (w[:, None] * values).sum(axis=0) / total_w
    grand = float((w[:, None] * values * lam_w[None, :]).sum()) / (total_w * total_lam)
    out: FloatArray = values - unit_mean[:, None] - period_mean[None, :] + grand
    return out
