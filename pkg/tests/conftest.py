"""
Pytest configuration and fixtures for matchdid tests.

Key testing philosophy:
- Check estimators against independent oracles (brute force, least squares, hand-computed values)
- Keep Monte Carlo acceptance runs behind the `slow` marker
"""

import math
from collections.abc import Callable, Sequence

import numpy as np
import pytest

from matchdid.estimators.registry import reset_registry
from matchdid.panel import NEVER_TREATED, PanelDataset

PanelFactory = Callable[..., PanelDataset]


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator so every test is reproducible."""
    return np.random.default_rng(20240611)


@pytest.fixture
def make_panel(rng: np.random.Generator) -> PanelFactory:
    """
    Factory for random balanced panels.

    Cohorts are assigned round-robin and then shuffled, so every requested cohort
    is present. Covariates are continuous uniforms (no distance ties).
    """

    def factory(
        n: int = 60,
        T: int = 4,
        cohorts: Sequence[float] = (2.0, 3.0, NEVER_TREATED),
        q: int = 1,
    ) -> PanelDataset:
        labels = np.asarray(cohorts, dtype=np.float64)[np.arange(n) % len(cohorts)]
        rng.shuffle(labels)
        return PanelDataset(
            outcomes=rng.normal(size=(n, T)),
            cohorts=labels,
            covariates=rng.uniform(size=(n, q)),
        )

    return factory


@pytest.fixture
def exact_match_panel() -> PanelDataset:
    """
    Noise-free staggered panel with one binary covariate and exact matches.

    Y_it = a_i + (t-1)(1 + 5 X_i) + 5 * 1(t >= cohort). Cohort 2 has X = (0,0,0,1),
    cohort 3 has X = (0,1,1,1), never-treated has X = (0,0,1,1).
    """
    cohorts = np.array([2, 2, 2, 2, 3, 3, 3, 3, math.inf, math.inf, math.inf, math.inf])
    x = np.array([0, 0, 0, 1, 0, 1, 1, 1, 0, 0, 1, 1], dtype=np.float64)
    unit_effects = np.linspace(-1.5, 2.0, cohorts.shape[0])
    t = np.arange(1, 5, dtype=np.float64)
    outcomes = (
        unit_effects[:, None]
        + (t[None, :] - 1) * (1 + 5 * x[:, None])
        + 5.0 * (t[None, :] >= cohorts[:, None])
    )
    return PanelDataset(
        outcomes=outcomes,
        cohorts=cohorts,
        covariates=x.reshape(-1, 1),
        covariate_kinds=("discrete",),
    )


@pytest.fixture
def linear_trend_panel(rng: np.random.Generator) -> PanelDataset:
    """
    Noise-free two-cohort panel (3 vs never) with a trend linear in continuous X.

    Y_it = a_i + (t-1)(1 + 5 X_i) + 5 * 1(t >= 3), so the matched-DiD bias comes only
    from covariate discrepancies and a linear outcome model removes it exactly.
    """
    n = 80
    cohorts = np.where(np.arange(n) % 2 == 0, 3.0, math.inf)
    x = rng.uniform(-1, 1, size=n)
    t = np.arange(1, 5, dtype=np.float64)
    outcomes = (
        rng.normal(size=n)[:, None]
        + (t[None, :] - 1) * (1 + 5 * x[:, None])
        + 5.0 * (t[None, :] >= cohorts[:, None])
    )
    return PanelDataset(outcomes=outcomes, cohorts=cohorts, covariates=x.reshape(-1, 1))


@pytest.fixture(autouse=True)
def fresh_registry():
    """Each test sees the built-in estimator registry only."""
    reset_registry()
    yield
    reset_registry()
