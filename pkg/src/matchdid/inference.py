"""Variance estimation for matched DiD estimators and population variance calculators.

Sample estimators:
    naive_cr_variance      second-stage cluster-robust variance, ignores matching
    corrected_variance     plug-in for the matching-aware asymptotic variance
    nr_variance            plug-in for matching without replacement
    discrete_variance      influence-function variance for exact-cell matching
    cluster_robust_variance  unit-clustered sandwich for any weighted 2WFE

Population calculators (take a ``DgpMoments``):
    theoretical_variance, seb_and_gap, naive_variance_limit
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy import integrate

from matchdid.errors import (
    AlphaUnavailableError,
    DegenerateDesignError,
    TooFewForSigmaError,
)
from matchdid.matching import CellMatchResult, MatchResult, nearest_neighbors, scale_covariates
from matchdid.panel import (
    CohortLabel,
    FloatArray,
    PanelDataset,
    PeriodSelector,
    double_demean,
    format_cohort,
    is_never_treated,
    transform_outcome,
)

logger = logging.getLogger(__name__)

DEFAULT_SIGMA_NEIGHBORS = 2
MC_INTEGRATION_DRAWS = 1_000_000
QUAD_RELATIVE_TOLERANCE = 1e-10


# ---------------------------------------------------------------------------
# alpha(M, q)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AlphaTable:
    """Values of alpha(M, q), the second-moment constant of match counts.

    The q = 1 case has a closed form; other dimensions must be supplied.

    Attributes:
        entries: Map (M, q) -> alpha for q >= 2.
        closed_form_q1: Use M(2M+1)/2 when q = 1.
    """

    entries: Mapping[tuple[int, int], float] = field(default_factory=dict)
    closed_form_q1: bool = True

    def __post_init__(self) -> None:
        for (M, q), value in self.entries.items():
            if M < 1 or q < 1:
                raise ValueError(f"alpha table key ({M}, {q}) must have M, q >= 1")
            if value / M**2 - 1 < 0:
                raise ValueError(
                    f"alpha({M}, {q}) = {value} is invalid: alpha / M^2 - 1 must be nonnegative"
                )


def alpha(M: int, q: int, table: AlphaTable | None = None) -> float:
    """alpha(M, q): exact M(2M+1)/2 for q = 1, table lookup otherwise.

    Raises:
        AlphaUnavailableError: q >= 2 and the pair is not in the table.
    """
    if M < 1 or q < 1:
        raise ValueError(f"alpha needs M >= 1 and q >= 1, got M={M}, q={q}")
    table = table or AlphaTable()
    if (M, q) in table.entries:
        return float(table.entries[(M, q)])
    if q == 1 and table.closed_form_q1:
        return M * (2 * M + 1) / 2
    raise AlphaUnavailableError(M, q)


# ---------------------------------------------------------------------------
# Sample variance estimators
# ---------------------------------------------------------------------------


class VarianceReport(BaseModel):
    """Naive and matching-corrected variances of a pairwise estimate.

    ``corrected`` is exactly ``heterogeneity + treated_noise + comparison_noise``.
    """

    naive: float = Field(..., ge=0)
    corrected: float = Field(..., ge=0)
    heterogeneity: float = Field(..., ge=0)
    treated_noise: float = Field(..., ge=0)
    comparison_noise: float = Field(..., ge=0)
    sigma_neighbors: int = Field(..., ge=1)

    @model_validator(mode="after")
    def _components_add_up(self) -> VarianceReport:
        if self.corrected != self.heterogeneity + self.treated_noise + self.comparison_noise:
            raise ValueError("corrected variance must equal the sum of its components")
        return self


def check_comparison_window(comparison: CohortLabel, lam: PeriodSelector) -> None:
    """A not-yet-treated comparison cohort must be untreated in every selected period."""
    if is_never_treated(comparison):
        return
    selected = [t for t in range(1, lam.T + 1) if lam.lam[t - 1]]
    if max(selected) >= comparison:
        raise DegenerateDesignError(
            f"comparison cohort {format_cohort(comparison)} is treated within the selected "
            f"periods (last selected period {max(selected)})"
        )


def pairwise_outcomes(panel: PanelDataset, result: MatchResult, lam: PeriodSelector) -> FloatArray:
    """Transformed outcomes for a pairwise design after consistency checks."""
    result.check_panel(panel)
    check_comparison_window(result.spec.comparison_cohort, lam)
    return transform_outcome(panel, result.spec.target_cohort, lam)


def unit_effects(dy: FloatArray, result: MatchResult) -> FloatArray:
    """Per-target matched differences: own outcome minus mean of its M matches."""
    effects: FloatArray = dy[result.targets] - dy[result.neighbors].mean(axis=1)
    return effects


def naive_cr_variance(panel: PanelDataset, result: MatchResult, lam: PeriodSelector) -> float:
    """Cluster-robust variance of the second-stage regression, ignoring the matching step.

    Residuals are transformed outcomes minus their group mean: the plain mean for
    targets and the K/M-weighted mean for comparison units.
    """
    dy = pairwise_outcomes(panel, result, lam)
    n_s = result.n_targets
    k = result.usage[result.comparisons] / result.spec.M
    treated = dy[result.targets]
    control = dy[result.comparisons]
    treated_resid = treated - treated.mean()
    control_resid = control - float(np.dot(k, control)) / n_s
    return float(np.sum(treated_resid**2) + np.sum(k**2 * control_resid**2)) / n_s**2


def conditional_variance(
    panel: PanelDataset,
    dy: FloatArray,
    cohort: CohortLabel,
    J: int = DEFAULT_SIGMA_NEIGHBORS,
    scaling: str = "none",
    workers: int = 1,
) -> FloatArray:
    """sigma^2 estimates from J nearest same-cohort neighbors.

    For each unit of ``cohort``: J/(J+1) times the squared gap between its
    transformed outcome and the mean over its J nearest same-cohort neighbors.

    Returns:
        Length-n array, NaN outside ``cohort``.

    Raises:
        TooFewForSigmaError: The cohort has J or fewer units.
    """
    if J < 1:
        raise ValueError(f"J must be at least 1, got {J}")
    units = panel.units_in(cohort)
    m = units.shape[0]
    if m <= J:
        raise TooFewForSigmaError(
            f"cohort {format_cohort(cohort)} has {m} units; need more than J={J} for sigma^2"
        )
    X = scale_covariates(panel, "standardize" if scaling == "standardize" else "none")[units]
    idx, _ = nearest_neighbors(X, X, J + 1, workers=workers)
    keep = idx != np.arange(m)[:, None]
    # Exact duplicates can push a unit out of its own list; then drop the farthest.
    keep[keep.all(axis=1), -1] = False
    neighbors = idx[keep].reshape(m, J)
    local = dy[units]
    sigma2 = np.full(panel.n, np.nan)
    sigma2[units] = J / (J + 1) * (local - local[neighbors].mean(axis=1)) ** 2
    return sigma2


def corrected_variance(
    panel: PanelDataset,
    result: MatchResult,
    lam: PeriodSelector,
    J: int = DEFAULT_SIGMA_NEIGHBORS,
    unit_bias: FloatArray | None = None,
    workers: int = 1,
) -> VarianceReport:
    """Matching-aware variance of the pairwise estimator, split into its three parts.

    Args:
        panel: The panel.
        result: With-replacement (or without-replacement) match for cohort s.
        lam: Period selector.
        J: Same-cohort neighbors used for conditional variance estimates.
        unit_bias: Optional per-target bias adjustments subtracted from the
            matched differences (bias-corrected estimates).
        workers: Threads for neighbor searches.

    Returns:
        VarianceReport with the naive variance alongside.
    """
    dy = pairwise_outcomes(panel, result, lam)
    scaling = result.spec.scaling
    sigma_s = conditional_variance(panel, dy, result.spec.target_cohort, J, scaling, workers)
    sigma_0 = conditional_variance(panel, dy, result.spec.comparison_cohort, J, scaling, workers)

    n_s = result.n_targets
    M = result.spec.M
    effects = unit_effects(dy, result)
    if unit_bias is not None:
        effects = effects - unit_bias
    deviation = effects - effects.mean()
    own_noise = sigma_s[result.targets]
    matched_noise = sigma_0[result.neighbors].sum(axis=1) / M**2

    heterogeneity = max(0.0, float(np.sum(deviation**2 - own_noise - matched_noise))) / n_s**2
    treated_noise = float(np.sum(own_noise)) / n_s**2
    k = result.usage[result.comparisons] / M
    comparison_noise = float(np.sum(k**2 * sigma_0[result.comparisons])) / n_s**2
    if heterogeneity == 0.0:
        logger.debug("[VARIANCE] heterogeneity term floored at zero")

    return VarianceReport(
        naive=naive_cr_variance(panel, result, lam),
        corrected=heterogeneity + treated_noise + comparison_noise,
        heterogeneity=heterogeneity,
        treated_noise=treated_noise,
        comparison_noise=comparison_noise,
        sigma_neighbors=J,
    )


def nr_variance(
    panel: PanelDataset,
    result: MatchResult,
    lam: PeriodSelector,
    J: int = DEFAULT_SIGMA_NEIGHBORS,
    workers: int = 1,
) -> float:
    """Variance of the without-replacement estimator.

    Plug-in for (1+M)[heterogeneity + E(sigma_s^2 + sigma_0^2/M | s)], divided by
    the matched-sample size (M+1) N_s. The sigma_0^2 term at a target's covariates
    is read off its M matches.
    """
    if result.spec.replacement != "without":
        raise ValueError("nr_variance needs a without-replacement match")
    dy = pairwise_outcomes(panel, result, lam)
    scaling = result.spec.scaling
    sigma_s = conditional_variance(panel, dy, result.spec.target_cohort, J, scaling, workers)
    sigma_0 = conditional_variance(panel, dy, result.spec.comparison_cohort, J, scaling, workers)

    M = result.spec.M
    n_s = result.n_targets
    effects = unit_effects(dy, result)
    own_noise = sigma_s[result.targets]
    matched_mean = sigma_0[result.neighbors].mean(axis=1)
    heterogeneity = max(
        0.0, float(np.mean((effects - effects.mean()) ** 2 - own_noise - matched_mean / M))
    )
    noise = float(np.mean(own_noise + matched_mean / M))
    v_nr = (1 + M) * (heterogeneity + noise)
    return v_nr / ((M + 1) * n_s)


def discrete_variance(
    panel: PanelDataset, cells: CellMatchResult, lam: PeriodSelector
) -> tuple[float, float]:
    """(naive, corrected) variances of the exact-cell estimator.

    The corrected variance is the sum of squared influence terms: targets
    contribute their outcome minus the cell comparison mean minus the estimate,
    comparison units contribute minus their cell ratio times their deviation from
    the cell comparison mean. The naive variance uses group-demeaned residuals
    with the cell ratios in place of K/M.
    """
    cells.check_panel(panel)
    check_comparison_window(cells.comparison_cohort, lam)
    dy = transform_outcome(panel, cells.target_cohort, lam)
    targets = panel.units_in(cells.target_cohort)
    comparisons = panel.units_in(cells.comparison_cohort)
    n_s = targets.shape[0]
    ratio = cells.weights[comparisons]

    cell_sum: dict[tuple[float, ...], float] = {}
    for j in comparisons:
        key = cells.cell_keys[j]
        cell_sum[key] = cell_sum.get(key, 0.0) + float(dy[j])
    cell_mean = {key: total / cells.comparison_counts[key] for key, total in cell_sum.items()}

    estimate = float(dy[targets].sum() - np.dot(ratio, dy[comparisons])) / n_s
    target_psi = np.array(
        [dy[i] - cell_mean[cells.cell_keys[i]] - estimate for i in targets], dtype=np.float64
    )
    comparison_psi = -ratio * np.array(
        [dy[j] - cell_mean[cells.cell_keys[j]] for j in comparisons], dtype=np.float64
    )
    corrected = float(np.sum(target_psi**2) + np.sum(comparison_psi**2)) / n_s**2

    treated_resid = dy[targets] - dy[targets].mean()
    control_resid = dy[comparisons] - float(np.dot(ratio, dy[comparisons])) / n_s
    naive = float(np.sum(treated_resid**2) + np.sum(ratio**2 * control_resid**2)) / n_s**2
    return naive, corrected


def cluster_robust_variance(
    panel: PanelDataset,
    w: FloatArray,
    lam: PeriodSelector,
    small_sample: bool = False,
) -> float:
    """Unit-clustered sandwich variance of the weighted 2WFE coefficient.

    Works on the two-way demeaned outcome and treatment with weights w_i lambda_t.
    For pairwise matching weights this equals ``naive_cr_variance``.

    Args:
        panel: The panel.
        w: Unit weights.
        lam: Period selector.
        small_sample: Apply the G/(G-1) * (N-1)/(N-K) factor of regression packages,
            with K = one coefficient per included period plus the treatment dummy.
    """
    lam_w = lam.weights
    D = panel.treatment()
    Dd = double_demean(D, w, lam)
    Yd = double_demean(panel.outcomes, w, lam)
    weights = w[:, None] * lam_w[None, :]
    bread = float(np.sum(weights * Dd * Dd))
    if abs(bread) <= 1e-12 * float(weights.sum()):
        raise DegenerateDesignError("weighted 2WFE design has no treatment variation")
    tau = float(np.sum(weights * Yd * Dd)) / bread
    resid = Yd - tau * Dd
    scores = np.sum(weights * Dd * resid, axis=1)
    variance = float(np.sum(scores**2)) / bread**2
    if small_sample:
        G = int(np.count_nonzero(w > 0))
        N = G * lam.total
        K = lam.total + 1
        variance *= G / (G - 1) * (N - 1) / (N - K)
    return variance


def difference_in_means(
    y: FloatArray, treated: FloatArray, small_sample: bool = True
) -> tuple[float, float]:
    """Difference in means with its heteroskedasticity-robust variance.

    Equivalent to regressing y on a constant and the treatment dummy with
    one-observation clusters.
    """
    d = treated.astype(np.float64)
    d_centered = d - d.mean()
    estimate = float(y[d == 1].mean() - y[d == 0].mean())
    resid = y - y.mean() - estimate * d_centered
    variance = float(np.sum((d_centered * resid) ** 2)) / float(np.sum(d_centered**2)) ** 2
    if small_sample:
        G = y.shape[0]
        variance *= G / (G - 1) * (G - 1) / (G - 2)
    return estimate, variance


# ---------------------------------------------------------------------------
# Population calculators
# ---------------------------------------------------------------------------

ArrayFunction = Callable[[FloatArray], FloatArray]


@dataclass(frozen=True, eq=False)
class DgpMoments:
    """Population moments of a two-cohort (s vs never-treated) design.

    Every function maps an array of covariate points (shape (m,) for q = 1 or
    (m, q)) to an array of values. All moments refer to the transformed outcome
    of cohort s under a fixed period selector.

    Attributes:
        e_s: Propensity of cohort s given X.
        e_inf: Propensity of never-treated given X.
        att: Conditional ATT averaged over the post window.
        mu_0: Conditional mean of the untreated transformed outcome.
        sigma2_s: Conditional variance of the transformed outcome, cohort s.
        sigma2_0: Conditional variance of the transformed outcome, never-treated.
        density: Density of X (q = 1 with ``support``).
        support: Integration interval for q = 1.
        sampler: Draws X for Monte Carlo integration when q >= 2.
        q: Covariate dimension.
        seed: Seed for Monte Carlo integration.
        label: Free-text description.
    """

    e_s: ArrayFunction
    e_inf: ArrayFunction
    att: ArrayFunction
    mu_0: ArrayFunction
    sigma2_s: ArrayFunction
    sigma2_0: ArrayFunction
    density: ArrayFunction | None = None
    support: tuple[float, float] | None = None
    sampler: Callable[[np.random.Generator, int], FloatArray] | None = None
    q: int = 1
    seed: int = 0
    label: str = ""

    def __post_init__(self) -> None:
        quadrature = self.q == 1 and self.density is not None and self.support is not None
        if not quadrature and self.sampler is None:
            raise ValueError("DgpMoments needs density and support (q = 1) or a sampler")

    @cached_property
    def _draws(self) -> FloatArray:
        if self.sampler is None:
            raise ValueError(f"{self.label or 'design'}: Monte Carlo moments need a sampler")
        rng = np.random.default_rng(self.seed)
        return self.sampler(rng, MC_INTEGRATION_DRAWS)

    def expect(self, g: ArrayFunction) -> float:
        """E[g(X)] over the full population."""
        if self.q == 1 and self.density is not None and self.support is not None:
            density = self.density

            def integrand(x: float) -> float:
                point = np.array([x], dtype=np.float64)
                return float(g(point)[0] * density(point)[0])

            value, _ = integrate.quad(
                integrand, *self.support, epsabs=0.0, epsrel=QUAD_RELATIVE_TOLERANCE, limit=200
            )
            return float(value)
        return float(np.mean(g(self._draws)))

    @cached_property
    def p_s(self) -> float:
        return self.expect(self.e_s)

    def expect_given_s(self, g: ArrayFunction) -> float:
        """E[g(X) | cohort s]."""
        e_s = self.e_s
        return self.expect(lambda x: g(x) * e_s(x)) / self.p_s

    @cached_property
    def att_mean(self) -> float:
        return self.expect_given_s(self.att)

    @cached_property
    def trend_mean(self) -> float:
        return self.expect_given_s(self.mu_0)


@dataclass(frozen=True)
class _VarianceIntegrals:
    """E[e_s sigma_s^2], E[e_s dev^2], E[e_s sigma_0^2], E[e_s^2 sigma_0^2 / e_inf]."""

    treated_noise: float
    heterogeneity: float
    comparison_noise: float
    comparison_ratio_noise: float
    p_s: float


def _variance_integrals(dgp: DgpMoments) -> _VarianceIntegrals:
    e_s, e_inf, att = dgp.e_s, dgp.e_inf, dgp.att
    att_mean = dgp.att_mean
    return _VarianceIntegrals(
        treated_noise=dgp.expect(lambda x: e_s(x) * dgp.sigma2_s(x)),
        heterogeneity=dgp.expect(lambda x: e_s(x) * (att(x) - att_mean) ** 2),
        comparison_noise=dgp.expect(lambda x: e_s(x) * dgp.sigma2_0(x)),
        comparison_ratio_noise=dgp.expect(lambda x: e_s(x) ** 2 * dgp.sigma2_0(x) / e_inf(x)),
        p_s=dgp.p_s,
    )


def theoretical_variance(dgp: DgpMoments, M: int, table: AlphaTable | None = None) -> float:
    """Asymptotic variance V of sqrt(n) times the pairwise matching estimator.

    V = [E(e_s dev^2) + E(e_s sigma_s^2)] / p_s^2
        + [M E(e_s sigma_0^2) + alpha E(e_s^2 sigma_0^2 / e_inf)] / (p_s^2 M^2)
    """
    a = alpha(M, dgp.q, table)
    moments = _variance_integrals(dgp)
    p2 = moments.p_s**2
    return (moments.heterogeneity + moments.treated_noise) / p2 + (
        M * moments.comparison_noise + a * moments.comparison_ratio_noise
    ) / (p2 * M**2)


def seb_and_gap(
    dgp: DgpMoments, M: int, table: AlphaTable | None = None
) -> tuple[float, float]:
    """Semiparametric efficiency bound and the excess variance of matching with M neighbors.

    Returns:
        (V_seb, gap) where gap = theoretical_variance - V_seb.
    """
    a = alpha(M, dgp.q, table)
    moments = _variance_integrals(dgp)
    p2 = moments.p_s**2
    v_seb = (
        moments.treated_noise + moments.heterogeneity + moments.comparison_ratio_noise
    ) / p2
    gap = moments.comparison_noise / (M * p2) + (a / M**2 - 1) * moments.comparison_ratio_noise / p2
    v = theoretical_variance(dgp, M, table)
    if not math.isclose(v - v_seb, gap, rel_tol=1e-10, abs_tol=1e-14 * max(1.0, abs(v))):
        raise ArithmeticError(f"efficiency gap {gap} disagrees with V - V_seb = {v - v_seb}")
    return v_seb, gap


def naive_variance_limit(dgp: DgpMoments, M: int, table: AlphaTable | None = None) -> float:
    """Probability limit of n times the naive cluster-robust variance.

    Adds to V the dispersion of the conditional untreated trend among cohort-s
    units, twice its covariance with the conditional ATT, and the match-count
    weighted trend dispersion.
    """
    a = alpha(M, dgp.q, table)
    e_s, e_inf, mu_0, att = dgp.e_s, dgp.e_inf, dgp.mu_0, dgp.att
    trend_mean, att_mean = dgp.trend_mean, dgp.att_mean
    p = dgp.p_s

    def spread(x: FloatArray) -> FloatArray:
        return (mu_0(x) - trend_mean) ** 2

    trend_var = dgp.expect(lambda x: e_s(x) * spread(x)) / p**2
    covariance = dgp.expect(lambda x: e_s(x) * (att(x) - att_mean) * (mu_0(x) - trend_mean)) / p**2
    weighted = dgp.expect(lambda x: (M + a * e_s(x) / e_inf(x)) * e_s(x) * spread(x)) / (
        p**2 * M**2
    )
    return theoretical_variance(dgp, M, table) + trend_var + 2 * covariance + weighted
