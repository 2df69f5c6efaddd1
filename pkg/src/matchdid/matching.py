"""Nearest-neighbor matching between cohorts.

Distances are Euclidean in covariate space. Among equidistant candidates the
lower unit index wins, so every match is deterministic. With-replacement
searches use an exact k-d tree (scipy ``cKDTree``) to find candidates and then
re-rank them with the same distance arithmetic as the brute-force path, so both
paths return identical neighbor lists.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.spatial import cKDTree

from matchdid.errors import (
    DegenerateDesignError,
    EmptyCellForTreatedError,
    EmptyComparisonCohortError,
    InsufficientComparisonsError,
    MismatchedPanelsError,
    NonDiscreteCovariateError,
)
from matchdid.panel import (
    NEVER_TREATED,
    CohortLabel,
    FloatArray,
    IntArray,
    PanelDataset,
    format_cohort,
    is_never_treated,
)

logger = logging.getLogger(__name__)

# Above this dimension or below this pool size the tree does not pay for itself.
KD_TREE_MAX_DIM = 8
KD_TREE_MIN_POOL = 64

TIE_RULE = "lowest unit index among equidistant candidates"

Replacement = Literal["with", "without"]
Scaling = Literal["none", "standardize"]


def check_cohort_pair(target: CohortLabel, comparison: CohortLabel) -> None:
    """The target is a finite cohort and a finite comparison cohort is treated after it."""
    if is_never_treated(target):
        raise ValueError("target cohort must be a finite treatment period")
    if target == comparison:
        raise ValueError("target and comparison cohorts must differ")
    if comparison < target:
        raise ValueError(
            f"comparison cohort {format_cohort(comparison)} is treated before target cohort "
            f"{format_cohort(target)}"
        )


@dataclass(frozen=True)
class MatchSpec:
    """What to match: target cohort, comparison cohort, neighbor count and options.

    Attributes:
        target_cohort: Finite cohort s whose units receive matches.
        comparison_cohort: Cohort the matches come from (never-treated by default).
        M: Number of neighbors per target unit.
        replacement: "with" lets a comparison unit serve several targets.
        scaling: "standardize" divides each covariate by its sample standard deviation.
    """

    target_cohort: CohortLabel
    comparison_cohort: CohortLabel = NEVER_TREATED
    M: int = 1
    replacement: Replacement = "with"
    scaling: Scaling = "none"

    def __post_init__(self) -> None:
        if self.M < 1:
            raise ValueError(f"M must be at least 1, got {self.M}")
        check_cohort_pair(self.target_cohort, self.comparison_cohort)


@dataclass(frozen=True, eq=False)
class MatchResult:
    """Neighbor sets and usage counts for one target cohort.

    Attributes:
        spec: The match specification.
        panel_fingerprint: Fingerprint of the panel the match was computed on.
        targets: Row indices of the target units, ascending.
        neighbors: N_s x M row indices of matched comparison units, nearest first.
        distances: N_s x M Euclidean distances, nondecreasing along each row.
        usage: Length-n counts K_M(i, s); zero for units outside the comparison cohort.
        comparisons: Row indices of the comparison-cohort units, ascending.
    """

    spec: MatchSpec
    panel_fingerprint: str
    targets: IntArray
    neighbors: IntArray
    distances: FloatArray
    usage: IntArray
    comparisons: IntArray

    @property
    def n_targets(self) -> int:
        return int(self.targets.shape[0])

    @property
    def neighbor_sets(self) -> dict[int, list[int]]:
        pairs = zip(self.targets, self.neighbors, strict=True)
        return {int(i): [int(j) for j in row] for i, row in pairs}

    @property
    def usage_counts(self) -> dict[int, int]:
        return {int(j): int(self.usage[j]) for j in self.comparisons}

    @property
    def mean_distance(self) -> float:
        return float(self.distances.mean()) if self.distances.size else 0.0

    @property
    def max_usage(self) -> int:
        return int(self.usage.max()) if self.usage.size else 0

    @property
    def used_comparisons(self) -> int:
        return int(np.count_nonzero(self.usage))

    def check_panel(self, panel: PanelDataset) -> None:
        if panel.fingerprint != self.panel_fingerprint:
            raise MismatchedPanelsError("match result was computed on a different panel")


@dataclass(frozen=True, eq=False)
class CellMatchResult:
    """Exact matching on discrete covariate cells.

    Attributes:
        target_cohort: Cohort s.
        comparison_cohort: Comparison cohort.
        panel_fingerprint: Fingerprint of the source panel.
        cell_keys: Per-unit tuple of covariate values.
        target_counts: Units of cohort s per cell.
        comparison_counts: Comparison units per cell.
        weights: Length-n ratio e_s(x) / e_inf(x) for comparison units, zero elsewhere.
    """

    target_cohort: CohortLabel
    comparison_cohort: CohortLabel
    panel_fingerprint: str
    cell_keys: list[tuple[float, ...]]
    target_counts: dict[tuple[float, ...], int]
    comparison_counts: dict[tuple[float, ...], int]
    weights: FloatArray

    @property
    def n_cells(self) -> int:
        return len(set(self.target_counts) | set(self.comparison_counts))

    def check_panel(self, panel: PanelDataset) -> None:
        if panel.fingerprint != self.panel_fingerprint:
            raise MismatchedPanelsError("cell match was computed on a different panel")


def scale_covariates(panel: PanelDataset, scaling: Scaling) -> FloatArray:
    """Covariates as used for distances; standardization uses the whole-panel std."""
    X = panel.covariates
    if scaling == "none":
        return X
    sd = X.std(axis=0, ddof=1) if panel.n > 1 else np.ones(panel.q)
    sd = np.where(sd > 0, sd, 1.0)
    scaled: FloatArray = X / sd
    return scaled


def _distances(pool: FloatArray, query: FloatArray) -> FloatArray:
    out: FloatArray = np.sqrt(np.sum((pool - query) ** 2, axis=1))
    return out


def _rank(candidates: IntArray, dist: FloatArray, k: int) -> tuple[IntArray, FloatArray]:
    # lexsort: last key is primary, so ties in distance fall back to pool index.
    order = np.lexsort((candidates, dist))[:k]
    return candidates[order], dist[order]


def nearest_neighbors(
    pool: FloatArray, queries: FloatArray, k: int, workers: int = 1
) -> tuple[IntArray, FloatArray]:
    """Exact k nearest pool rows for each query row, ties to the lower pool index.

    Args:
        pool: m x q candidate points.
        queries: r x q query points.
        k: Neighbors per query; must not exceed m.
        workers: Threads for the k-d tree queries.

    Returns:
        (indices, distances), both r x k, indices into ``pool``.
    """
    m, q = pool.shape
    r = queries.shape[0]
    if k > m:
        raise InsufficientComparisonsError(f"need {k} neighbors but the pool has {m} units")
    indices = np.empty((r, k), dtype=np.int64)
    dists = np.empty((r, k), dtype=np.float64)
    if r == 0:
        return indices, dists

    if q > KD_TREE_MAX_DIM or m < KD_TREE_MIN_POOL:
        logger.debug(f"[MATCH] brute-force search: pool={m}, q={q}, k={k}")
        everyone = np.arange(m, dtype=np.int64)
        for row in range(r):
            indices[row], dists[row] = _rank(everyone, _distances(pool, queries[row]), k)
        return indices, dists

    logger.debug(f"[MATCH] k-d tree search: pool={m}, q={q}, k={k}, workers={workers}")
    tree = cKDTree(pool)
    kth, _ = tree.query(queries, k=k, workers=workers)
    kth = np.asarray(kth, dtype=np.float64).reshape(r, k)[:, -1]
    # Everything within the k-th distance (with slack for rounding) is a candidate,
    # so ties at the boundary are all seen and re-ranked exactly.
    radius = kth * (1.0 + 1e-9) + 1e-12
    balls = tree.query_ball_point(queries, r=radius, workers=workers, return_sorted=True)
    for row in range(r):
        candidates = np.asarray(balls[row], dtype=np.int64)
        indices[row], dists[row] = _rank(
            candidates, _distances(pool[candidates], queries[row]), k
        )
    return indices, dists


def _greedy_without_replacement(
    pool: FloatArray, queries: FloatArray, k: int
) -> tuple[IntArray, FloatArray]:
    m = pool.shape[0]
    r = queries.shape[0]
    if k * r > m:
        raise InsufficientComparisonsError(
            f"matching without replacement needs {k * r} comparison units, only {m} available"
        )
    available = np.ones(m, dtype=bool)
    indices = np.empty((r, k), dtype=np.int64)
    dists = np.empty((r, k), dtype=np.float64)
    for row in range(r):
        candidates = np.flatnonzero(available).astype(np.int64)
        chosen, chosen_dist = _rank(candidates, _distances(pool[candidates], queries[row]), k)
        indices[row], dists[row] = chosen, chosen_dist
        available[chosen] = False
    return indices, dists


def match(panel: PanelDataset, spec: MatchSpec, workers: int = 1) -> MatchResult:
    """Match every unit of the target cohort to M units of the comparison cohort.

    With replacement each target independently gets its M nearest comparison
    units. Without replacement targets are processed in ascending row order and
    every used comparison unit leaves the pool.

    Args:
        panel: Validated panel.
        spec: Match specification.
        workers: Threads for k-d tree queries (with replacement only).

    Returns:
        The MatchResult.

    Raises:
        EmptyComparisonCohortError: No units in the comparison cohort.
        InsufficientComparisonsError: Too few comparison units for M (or M * N_s).
        DegenerateDesignError: The target cohort is empty.
    """
    targets = panel.units_in(spec.target_cohort)
    comparisons = panel.units_in(spec.comparison_cohort)
    if comparisons.size == 0:
        raise EmptyComparisonCohortError(
            f"comparison cohort {format_cohort(spec.comparison_cohort)} has no units"
        )
    if targets.size == 0:
        label = format_cohort(spec.target_cohort)
        raise DegenerateDesignError(f"target cohort {label} has no units")

    X = scale_covariates(panel, spec.scaling)
    pool = X[comparisons]
    queries = X[targets]
    if spec.replacement == "with":
        local, dist = nearest_neighbors(pool, queries, spec.M, workers=workers)
    else:
        local, dist = _greedy_without_replacement(pool, queries, spec.M)
    neighbors = comparisons[local]

    usage = np.bincount(neighbors.ravel(), minlength=panel.n).astype(np.int64)
    if np.count_nonzero(dist == 0.0) > targets.size * spec.M // 2:
        logger.info(
            f"[MATCH] cohort {format_cohort(spec.target_cohort)}: most matches are exact ties; "
            f"tie rule is {TIE_RULE}"
        )
    for array in (targets, neighbors, dist, usage, comparisons):
        array.setflags(write=False)
    return MatchResult(
        spec=spec,
        panel_fingerprint=panel.fingerprint,
        targets=targets,
        neighbors=neighbors,
        distances=dist,
        usage=usage,
        comparisons=comparisons,
    )


def match_cells(
    panel: PanelDataset, s: CohortLabel, comparison: CohortLabel = NEVER_TREATED
) -> CellMatchResult:
    """Exact matching within discrete covariate cells.

    Each comparison unit gets weight (cohort-s count in its cell) / (comparison
    count in its cell).

    Raises:
        NonDiscreteCovariateError: Some covariate is flagged continuous.
        ValueError: The cohort pair is invalid (see ``check_cohort_pair``).
        EmptyCellForTreatedError: A cell has target units but no comparison unit.
    """
    if not panel.all_discrete:
        raise NonDiscreteCovariateError("exact-cell matching needs all covariates flagged discrete")
    check_cohort_pair(s, comparison)
    keys = [tuple(float(v) for v in row) for row in panel.covariates]
    target_counts: dict[tuple[float, ...], int] = {}
    comparison_counts: dict[tuple[float, ...], int] = {}
    for key, cohort in zip(keys, panel.cohorts, strict=True):
        if cohort == s:
            target_counts[key] = target_counts.get(key, 0) + 1
        elif cohort == comparison:
            comparison_counts[key] = comparison_counts.get(key, 0) + 1
    if not target_counts:
        raise DegenerateDesignError(f"target cohort {format_cohort(s)} has no units")
    if not comparison_counts:
        label = format_cohort(comparison)
        raise EmptyComparisonCohortError(f"comparison cohort {label} has no units")
    for key in target_counts:
        if key not in comparison_counts:
            raise EmptyCellForTreatedError(key)

    weights = np.zeros(panel.n, dtype=np.float64)
    for i, (key, cohort) in enumerate(zip(keys, panel.cohorts, strict=True)):
        if cohort == comparison:
            weights[i] = target_counts.get(key, 0) / comparison_counts[key]
    weights.setflags(write=False)
    return CellMatchResult(
        target_cohort=s,
        comparison_cohort=comparison,
        panel_fingerprint=panel.fingerprint,
        cell_keys=keys,
        target_counts=target_counts,
        comparison_counts=comparison_counts,
        weights=weights,
    )


def match_all_cohorts(
    panel: PanelDataset,
    M: int = 1,
    scaling: Scaling = "none",
    workers: int = 1,
) -> list[MatchResult]:
    """With-replacement matches of every finite cohort against the never-treated."""
    cohorts = [c for c in panel.cohort_labels() if not is_never_treated(c)]
    return [
        match(panel, MatchSpec(target_cohort=c, M=M, scaling=scaling), workers=workers)
        for c in cohorts
    ]


def pool_usage(results: Sequence[MatchResult]) -> IntArray:
    """Total usage K_M(i) = sum over cohorts of K_M(i, s), per unit.

    Raises:
        MismatchedPanelsError: Results come from different panels or comparison cohorts.
        ValueError: Empty input or a cohort appears twice.
    """
    if not results:
        raise ValueError("pool_usage needs at least one match result")
    first = results[0]
    seen: set[CohortLabel] = set()
    for result in results:
        if result.panel_fingerprint != first.panel_fingerprint:
            raise MismatchedPanelsError("match results reference different panels")
        if result.spec.comparison_cohort != first.spec.comparison_cohort:
            raise MismatchedPanelsError("match results use different comparison cohorts")
        if result.spec.target_cohort in seen:
            raise ValueError(f"cohort {format_cohort(result.spec.target_cohort)} matched twice")
        seen.add(result.spec.target_cohort)
    total: IntArray = np.sum([result.usage for result in results], axis=0).astype(np.int64)
    return total
