"""Data generating processes for the Monte Carlo studies and their population oracles.

Two families:

* Staggered: cohorts {2, 3, never} assigned by a multinomial logit in X, untreated
  trends that depend on X, constant treatment effect. Pooling cohorts biases the
  pooled matched 2WFE even though conditional parallel trends hold.
* Inference: one treated cohort (3) against never-treated, logistic assignment,
  either a constant effect or an effect that varies with X.
"""

from __future__ import annotations

import math
from collections.abc import Callable
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy import integrate
from scipy.special import expit

from matchdid.decomposition import AttFunction, TrendFunction
from matchdid.inference import DgpMoments
from matchdid.panel import (
    NEVER_TREATED,
    CohortLabel,
    CohortShares,
    FloatArray,
    PanelDataset,
)

InferenceDesign = Literal["constant-effect", "heterogeneous"]


class StaggeredDgpConfig(BaseModel):
    """Staggered-adoption design.

    P(cohort s | X) is proportional to exp((s-1) X) for treated cohorts and to 1
    for never-treated. Y_it(0) = a_i + (t-1) + trend_slope X_i (t-1) + u_it and
    Y_it(1) = effect + a_i + (t-1) + trend_slope X_i (t-1) + v_it.
    """

    n: int = Field(default=1000, ge=10)
    T: int = Field(default=4, ge=2)
    treated_cohorts: tuple[int, ...] = (2, 3)
    x_low: float = -1.0
    x_high: float = 2.0
    trend_slope: float = 5.0
    effect: float = 5.0
    noise_sd: float = Field(default=1.0, ge=0)

    @model_validator(mode="after")
    def _check(self) -> StaggeredDgpConfig:
        if any(s < 2 or s > self.T for s in self.treated_cohorts):
            raise ValueError(f"treated cohorts must lie in 2..{self.T}")
        if self.x_high <= self.x_low:
            raise ValueError("x_high must exceed x_low")
        return self

    def assignment_probabilities(self, x: FloatArray) -> FloatArray:
        """Rows of P(cohort | X): treated cohorts in order, never-treated last."""
        logits = np.column_stack(
            [(s - 1) * x for s in self.treated_cohorts] + [np.zeros_like(x)]
        )
        logits -= logits.max(axis=1, keepdims=True)
        weights = np.exp(logits)
        probs: FloatArray = weights / weights.sum(axis=1, keepdims=True)
        return probs

    @property
    def labels(self) -> list[CohortLabel]:
        return [float(s) for s in self.treated_cohorts] + [NEVER_TREATED]


class InferenceDgpConfig(BaseModel):
    """Two-cohort design for variance and coverage studies.

    P(cohort 3 | X) = logistic(ps_slope X). Untreated trend per period is
    1 + untreated_slope X, treated potential outcomes trend with treated_slope
    and add ``effect``. The constant-effect design uses slopes (5, 5), the
    heterogeneous design (-2, 5).
    """

    design: InferenceDesign = "constant-effect"
    n: int = Field(default=1000, ge=10)
    T: int = Field(default=4, ge=2)
    cohort: int = 3
    x_low: float = -0.5
    x_high: float = 0.5
    ps_slope: float = 1.0
    effect: float = 5.0
    untreated_slope: float | None = None
    treated_slope: float | None = None
    noise_sd: float = Field(default=1.0, ge=0)

    @model_validator(mode="after")
    def _defaults(self) -> InferenceDgpConfig:
        if not 2 <= self.cohort <= self.T:
            raise ValueError(f"cohort must lie in 2..{self.T}")
        if self.x_high <= self.x_low:
            raise ValueError("x_high must exceed x_low")
        if self.untreated_slope is None:
            self.untreated_slope = 5.0 if self.design == "constant-effect" else -2.0
        if self.treated_slope is None:
            self.treated_slope = 5.0
        return self

    @property
    def b0(self) -> float:
        if self.untreated_slope is None:
            raise ValueError("untreated_slope is unset")
        return self.untreated_slope

    @property
    def b1(self) -> float:
        if self.treated_slope is None:
            raise ValueError("treated_slope is unset")
        return self.treated_slope

    @property
    def heterogeneity(self) -> float:
        """Slope of the conditional ATT in X (t-1)."""
        return self.b1 - self.b0


def _time_index(T: int) -> FloatArray:
    return np.arange(T, dtype=np.float64)


def _outcomes(
    rng: np.random.Generator,
    x: FloatArray,
    cohorts: FloatArray,
    T: int,
    untreated_slope: float,
    treated_slope: float,
    effect: float,
    noise_sd: float,
) -> FloatArray:
    n = x.shape[0]
    elapsed = _time_index(T)[None, :]
    unit = rng.standard_normal(n)[:, None]
    u = rng.standard_normal((n, T))
    v = rng.standard_normal((n, T))
    base = unit + elapsed
    y0 = base + untreated_slope * x[:, None] * elapsed + noise_sd * u
    y1 = effect + base + treated_slope * x[:, None] * elapsed + noise_sd * v
    treated = np.arange(1, T + 1)[None, :] >= cohorts[:, None]
    out: FloatArray = np.where(treated, y1, y0)
    return out


def draw_staggered(config: StaggeredDgpConfig, rng: np.random.Generator) -> PanelDataset:
    """One sample from the staggered design."""
    x = rng.uniform(config.x_low, config.x_high, config.n)
    probs = config.assignment_probabilities(x)
    if not np.allclose(probs.sum(axis=1), 1.0):
        raise ValueError("cohort assignment probabilities must sum to one for every unit")
    draws = rng.random(config.n)
    index = (draws[:, None] > np.cumsum(probs, axis=1)).sum(axis=1)
    index = np.minimum(index, probs.shape[1] - 1)
    cohorts = np.asarray(config.labels, dtype=np.float64)[index]
    outcomes = _outcomes(
        rng, x, cohorts, config.T, config.trend_slope, config.trend_slope, config.effect,
        config.noise_sd,
    )
    return PanelDataset(
        outcomes=outcomes,
        cohorts=cohorts,
        covariates=x.reshape(-1, 1),
        covariate_kinds=("continuous",),
    )


def draw_inference(config: InferenceDgpConfig, rng: np.random.Generator) -> PanelDataset:
    """One sample from the two-cohort inference design."""
    x = rng.uniform(config.x_low, config.x_high, config.n)
    treated = rng.random(config.n) < expit(config.ps_slope * x)
    cohorts = np.where(treated, float(config.cohort), NEVER_TREATED)
    outcomes = _outcomes(
        rng, x, cohorts, config.T, config.b0, config.b1, config.effect, config.noise_sd
    )
    return PanelDataset(
        outcomes=outcomes,
        cohorts=cohorts,
        covariates=x.reshape(-1, 1),
        covariate_kinds=("continuous",),
    )


def _uniform_expect(g: Callable[[float], float], low: float, high: float) -> float:
    value, _ = integrate.quad(g, low, high, epsabs=0.0, epsrel=1e-10, limit=200)
    return float(value) / (high - low)


def staggered_population(
    config: StaggeredDgpConfig,
) -> tuple[CohortShares, AttFunction, TrendFunction]:
    """Cohort shares, cohort ATTs and cohort untreated trends of the staggered design.

    Returns:
        (shares, att, untreated_trend) ready for ``plim_bias``.
    """
    labels = config.labels

    def prob(column: int) -> Callable[[float], float]:
        return lambda x: float(config.assignment_probabilities(np.array([x]))[0, column])

    shares: dict[CohortLabel, float] = {}
    mean_x: dict[CohortLabel, float] = {}
    for column, label in enumerate(labels):
        p = _uniform_expect(prob(column), config.x_low, config.x_high)
        shares[label] = p
        if p > 0:
            mean_x[label] = (
                _uniform_expect(
                    lambda x, column=column: x * prob(column)(x), config.x_low, config.x_high
                )
                / p
            )
    # Quadrature leaves the shares off 1 by ~1e-12; put the residue on never-treated.
    shares[NEVER_TREATED] += 1.0 - math.fsum(shares.values())

    def att(s: CohortLabel, t: int) -> float:
        return config.effect

    def untreated_trend(s: CohortLabel, t: int, t_prime: int) -> float:
        return (t - t_prime) * (1.0 + config.trend_slope * mean_x[s])

    return CohortShares(p=shares), att, untreated_trend


def _window_means(config: InferenceDgpConfig) -> tuple[float, float, int, int]:
    post = list(range(config.cohort, config.T + 1))
    pre = list(range(1, config.cohort))
    post_elapsed = sum(t - 1 for t in post) / len(post)
    pre_elapsed = sum(t - 1 for t in pre) / len(pre)
    return post_elapsed, pre_elapsed, len(post), len(pre)


def inference_moments(config: InferenceDgpConfig) -> DgpMoments:
    """Population moments of the transformed outcome for the inference design (all periods)."""
    post_elapsed, pre_elapsed, n_post, n_pre = _window_means(config)
    gap = post_elapsed - pre_elapsed
    noise = config.noise_sd**2 * (1 / n_post + 1 / n_pre)
    width = config.x_high - config.x_low
    slope, b0, hetero, effect = config.ps_slope, config.b0, config.heterogeneity, config.effect

    return DgpMoments(
        e_s=lambda x: expit(slope * x),
        e_inf=lambda x: 1.0 - expit(slope * x),
        att=lambda x: effect + hetero * post_elapsed * x,
        mu_0=lambda x: gap * (1.0 + b0 * x),
        sigma2_s=lambda x: np.full_like(x, noise, dtype=np.float64),
        sigma2_0=lambda x: np.full_like(x, noise, dtype=np.float64),
        density=lambda x: np.full_like(x, 1.0 / width, dtype=np.float64),
        support=(config.x_low, config.x_high),
        q=1,
        label=f"inference design '{config.design}'",
    )


def population_estimand(config: InferenceDgpConfig) -> float:
    """Average post-window ATT of the treated cohort, by quadrature over X given treatment."""
    if config.heterogeneity == 0:
        return config.effect
    return inference_moments(config).att_mean
