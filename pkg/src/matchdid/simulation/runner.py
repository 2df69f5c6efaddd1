"""Monte Carlo runner for the staggered and inference designs.

Replication r draws from its own counter-based stream, Philox keyed by
SeedSequence(seed, spawn_key=(r, attempt)). A replication whose draw is
degenerate (an empty cohort, too few units for sigma^2) is redrawn with the next
attempt index and counted. Results are collected in replication order, so the
summary does not depend on the number of worker processes.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import TypeVar

import numpy as np
from pydantic import BaseModel, Field
from scipy.stats import norm

from matchdid.errors import (
    DegenerateDesignError,
    EmptyComparisonCohortError,
    InsufficientComparisonsError,
    TooFewForSigmaError,
)
from matchdid.estimators.pairwise import bias_corrected_pairwise, pairwise_matched_did
from matchdid.estimators.twfe import pooled_matched_2wfe
from matchdid.matching import MatchSpec, match, match_all_cohorts
from matchdid.panel import PeriodSelector, validate
from matchdid.simulation.dgp import (
    InferenceDgpConfig,
    StaggeredDgpConfig,
    draw_inference,
    draw_staggered,
    population_estimand,
)

logger = logging.getLogger(__name__)

MIN_REPLICATIONS = 100
MAX_ATTEMPTS = 25
COVERAGE_LEVEL = 0.95

# Failures that mean "this draw cannot support the design", not "the code is wrong".
_REDRAW_ERRORS = (
    DegenerateDesignError,
    EmptyComparisonCohortError,
    InsufficientComparisonsError,
    TooFewForSigmaError,
)


class EstimatorSummary(BaseModel):
    """Monte Carlo summary of one estimator."""

    name: str
    mean_bias: float
    mc_sd: float = Field(..., ge=0)
    mean_naive_se: float = Field(..., ge=0)
    naive_coverage: float = Field(..., ge=0, le=100)
    mean_corrected_se: float | None = Field(default=None, ge=0)
    corrected_coverage: float | None = Field(default=None, ge=0, le=100)


class SimulationSummary(BaseModel):
    """Result of a Monte Carlo run: one row per estimator plus run metadata."""

    design: str
    replications: int = Field(..., gt=0)
    seed: int
    n: int
    estimand: float
    estimand_level: float | None = Field(
        default=None, description="Constant part of the effect in the outcome equations"
    )
    redraws: int = 0
    workers: int = 1
    wall_time: float = Field(..., ge=0, description="Seconds")
    rows: list[EstimatorSummary]

    def row(self, name: str) -> EstimatorSummary:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(f"no estimator '{name}' in summary; have {[r.name for r in self.rows]}")


@dataclass(frozen=True)
class Replication:
    """Estimates from one replication, keyed by estimator name."""

    index: int
    attempts: int
    estimates: dict[str, float]
    naive_se: dict[str, float]
    corrected_se: dict[str, float | None]


def replication_rng(seed: int, rep: int, attempt: int = 0) -> np.random.Generator:
    """Independent generator for (seed, replication, attempt)."""
    sequence = np.random.SeedSequence(seed, spawn_key=(rep, attempt))
    return np.random.Generator(np.random.Philox(sequence))


def _with_redraws(
    rep: int,
    seed: int,
    body: Callable[[np.random.Generator], Replication],
) -> Replication:
    last: Exception | None = None
    for attempt in range(MAX_ATTEMPTS):
        try:
            result = body(replication_rng(seed, rep, attempt))
        except _REDRAW_ERRORS as e:
            last = e
            continue
        return Replication(
            index=rep,
            attempts=attempt + 1,
            estimates=result.estimates,
            naive_se=result.naive_se,
            corrected_se=result.corrected_se,
        )
    raise DegenerateDesignError(
        f"replication {rep}: every one of {MAX_ATTEMPTS} draws was degenerate ({last})"
    )


def _staggered_replication(args: tuple[StaggeredDgpConfig, int, int]) -> Replication:
    """One staggered replication: pooled matched 2WFE with M = 1 and its naive SE."""
    config, seed, rep = args

    def body(rng: np.random.Generator) -> Replication:
        panel = draw_staggered(config, rng)
        validate(panel)
        lam = PeriodSelector.all_periods(panel.T)
        report, _ = pooled_matched_2wfe(panel, match_all_cohorts(panel, M=1), lam)
        if report.naive_se is None:
            raise DegenerateDesignError("pooled estimate has no naive SE")
        return Replication(
            index=rep,
            attempts=1,
            estimates={"pooled": report.estimate},
            naive_se={"pooled": report.naive_se},
            corrected_se={"pooled": None},
        )

    return _with_redraws(rep, seed, body)


def _inference_replication(args: tuple[InferenceDgpConfig, int, int, int, int]) -> Replication:
    """One inference replication: pairwise and bias-corrected estimates with both SEs."""
    config, seed, rep, M, J = args

    def body(rng: np.random.Generator) -> Replication:
        panel = draw_inference(config, rng)
        validate(panel)
        lam = PeriodSelector.all_periods(panel.T)
        result = match(panel, MatchSpec(target_cohort=float(config.cohort), M=M))
        plain = pairwise_matched_did(panel, result, lam, sigma_neighbors=J)
        if plain.corrected_se is None:
            raise TooFewForSigmaError(f"replication {rep}: sigma^2 not estimable")
        corrected = bias_corrected_pairwise(panel, result, lam, sigma_neighbors=J)
        if plain.naive_se is None or corrected.naive_se is None:
            raise DegenerateDesignError("pairwise estimate has no naive SE")
        return Replication(
            index=rep,
            attempts=1,
            estimates={"pairwise": plain.estimate, "bias-corrected": corrected.point},
            naive_se={"pairwise": plain.naive_se, "bias-corrected": corrected.naive_se},
            corrected_se={"pairwise": plain.corrected_se, "bias-corrected": corrected.corrected_se},
        )

    return _with_redraws(rep, seed, body)


Task = TypeVar("Task")


def _run(
    worker: Callable[[Task], Replication], tasks: Sequence[Task], workers: int
) -> list[Replication]:
    if workers <= 1:
        return [worker(task) for task in tasks]
    chunksize = max(1, len(tasks) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as executor:
        # map preserves submission order
        return list(executor.map(worker, tasks, chunksize=chunksize))


def _summarize(
    replications: list[Replication], names: Sequence[str], target: float
) -> list[EstimatorSummary]:
    z = float(norm.ppf(0.5 + COVERAGE_LEVEL / 2))
    rows = []
    for name in names:
        estimates = np.array([r.estimates[name] for r in replications])
        naive = np.array([r.naive_se[name] for r in replications])
        naive_cover = np.abs(estimates - target) <= z * naive
        corrected_values = [r.corrected_se[name] for r in replications]
        mean_corrected: float | None = None
        corrected_coverage: float | None = None
        available = [se for se in corrected_values if se is not None]
        if available:
            if len(available) < len(corrected_values):
                logger.warning(
                    f"[SIMULATE] {name}: corrected SE missing in "
                    f"{len(corrected_values) - len(available)} replications"
                )
            keep = np.array([se is not None for se in corrected_values])
            corrected = np.array(available)
            mean_corrected = float(corrected.mean())
            corrected_coverage = 100.0 * float(
                np.mean(np.abs(estimates[keep] - target) <= z * corrected)
            )
        rows.append(
            EstimatorSummary(
                name=name,
                mean_bias=float(estimates.mean()) - target,
                mc_sd=float(estimates.std(ddof=1)),
                mean_naive_se=float(naive.mean()),
                naive_coverage=100.0 * float(naive_cover.mean()),
                mean_corrected_se=mean_corrected,
                corrected_coverage=corrected_coverage,
            )
        )
    return rows


def _check_reps(reps: int) -> None:
    if reps < MIN_REPLICATIONS:
        raise ValueError(f"need at least {MIN_REPLICATIONS} replications, got {reps}")


def run_staggered(
    config: StaggeredDgpConfig, reps: int, seed: int, workers: int = 1
) -> SimulationSummary:
    """Pooled matched 2WFE (M = 1) over ``reps`` draws of the staggered design.

    Bias is measured against the constant treatment effect.

    Raises:
        ValueError: reps below the minimum.
        DegenerateDesignError: Some replication never produced a usable draw.
    """
    _check_reps(reps)
    started = time.perf_counter()
    replications = _run(_staggered_replication, [(config, seed, r) for r in range(reps)], workers)
    return _finish(
        "staggered", config.n, seed, workers, replications, ["pooled"], config.effect,
        config.effect, started,
    )


def run_inference(
    config: InferenceDgpConfig,
    reps: int,
    seed: int,
    M: int = 1,
    J: int = 2,
    workers: int = 1,
) -> SimulationSummary:
    """Pairwise and bias-corrected matched DiD over ``reps`` draws of an inference design.

    Coverage is measured against ``population_estimand(config)``.

    Raises:
        ValueError: reps below the minimum.
        DegenerateDesignError: Some replication never produced a usable draw.
    """
    _check_reps(reps)
    started = time.perf_counter()
    target = population_estimand(config)
    tasks = [(config, seed, r, M, J) for r in range(reps)]
    replications = _run(_inference_replication, tasks, workers)
    return _finish(
        config.design, config.n, seed, workers, replications, ["pairwise", "bias-corrected"],
        target, config.effect, started,
    )


def _finish(
    design: str,
    n: int,
    seed: int,
    workers: int,
    replications: list[Replication],
    names: Sequence[str],
    target: float,
    level: float,
    started: float,
) -> SimulationSummary:
    redraws = sum(r.attempts - 1 for r in replications)
    if redraws:
        logger.info(f"[SIMULATE] {design}: redrew {redraws} degenerate samples")
    summary = SimulationSummary(
        design=design,
        replications=len(replications),
        seed=seed,
        n=n,
        estimand=target,
        estimand_level=level,
        redraws=redraws,
        workers=workers,
        wall_time=time.perf_counter() - started,
        rows=_summarize(replications, names, target),
    )
    logger.info(
        f"[SIMULATE] {design}: {summary.replications} replications in {summary.wall_time:.1f}s"
    )
    return summary
