"""Probability-limit weights and bias decomposition of the pooled matched 2WFE.

Given population cohort shares and a period selector, ``plim_weights`` returns
the weights that the pooled matched 2WFE puts on cohort ATTs (phi1, phi2) and on
the three bias sources (eta1, eta2, eta3). ``plim_bias`` combines them with
known cohort ATTs and untreated trends, which makes it an oracle for
simulation designs rather than a data estimator.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Literal

from matchdid.errors import DegenerateDesignError
from matchdid.panel import CohortLabel, CohortShares, PeriodSelector, format_cohort

logger = logging.getLogger(__name__)

CohortPair = tuple[CohortLabel, CohortLabel]
AttFunction = Callable[[CohortLabel, int], float]
TrendFunction = Callable[[CohortLabel, int, int], float]


@dataclass(frozen=True)
class PlimWeights:
    """Weights of the pooled matched 2WFE probability limit.

    Pair maps are keyed by ordered (s, s') pairs; eta2 exists only for s' < s
    and phi2 only for s < s'.

    Attributes:
        phi1: Weight on cohort s's average post-period ATT.
        phi2: Weight on cohort s's average ATT over s <= t < s'.
        eta1: Weight on cross-cohort ATT differences.
        eta2: Weight on earlier-cohort ATT changes over time.
        eta3: Weight on untreated trend differences between treated cohorts.
        eta0: Weight on cohort s's trend gap to the pooled matched comparison group.
        denominator: Common denominator of all weights.
    """

    phi1: dict[CohortLabel, float]
    phi2: dict[CohortPair, float] = field(default_factory=dict)
    eta1: dict[CohortPair, float] = field(default_factory=dict)
    eta2: dict[CohortPair, float] = field(default_factory=dict)
    eta3: dict[CohortPair, float] = field(default_factory=dict)
    eta0: dict[CohortLabel, float] = field(default_factory=dict)
    denominator: float = 1.0

    @property
    def att_weight_total(self) -> float:
        return math.fsum(self.phi1.values()) + math.fsum(self.phi2.values())

    def to_dict(self) -> dict[str, object]:
        """JSON-friendly view with "s" / "s,s'" string keys."""

        def pairs(values: dict[CohortPair, float]) -> dict[str, float]:
            return {f"{format_cohort(a)},{format_cohort(b)}": v for (a, b), v in values.items()}

        return {
            "phi1": {format_cohort(s): v for s, v in self.phi1.items()},
            "phi2": pairs(self.phi2),
            "eta1": pairs(self.eta1),
            "eta2": pairs(self.eta2),
            "eta3": pairs(self.eta3),
            "eta0": {format_cohort(s): v for s, v in self.eta0.items()},
            "denominator": self.denominator,
            "att_weight_total": self.att_weight_total,
        }


@dataclass(frozen=True)
class BiasDecomposition:
    """Probability limit of the pooled matched 2WFE split into its four parts.

    ``total_plim = weighted_att_part + b_het_cohort - b_het_time + b_pool`` and
    ``b_pool = b_pool_treated + b_pool_comparison``.
    """

    weighted_att_part: float
    b_het_cohort: float
    b_het_time: float
    b_pool: float
    b_pool_treated: float
    b_pool_comparison: float
    total_plim: float


def plim_weights(shares: CohortShares, lam: PeriodSelector) -> PlimWeights:
    """Evaluate the phi and eta weights for given cohort shares.

    Raises:
        ValueError: No finite cohort, or no never-treated mass.
        DegenerateDesignError: The common denominator is zero.
    """
    cohorts = shares.finite_cohorts
    p_never = shares.never_treated
    if not cohorts:
        raise ValueError("plim weights need at least one finite cohort")
    if p_never <= 0:
        raise ValueError("plim weights need a positive never-treated share")
    if any(c > lam.T for c in cohorts):
        raise ValueError(f"cohorts must lie within the {lam.T} selector periods")
    treated = 1.0 - p_never
    p = {c: shares[c] for c in cohorts}
    share_post = {c: lam.share_post(c) for c in cohorts}

    phi1_raw: dict[CohortLabel, float] = {}
    phi2_raw: dict[CohortPair, float] = {}
    for s in cohorts:
        ls = share_post[s]
        earlier = math.fsum(p[o] * (share_post[o] - ls) for o in cohorts if o < s)
        phi1_raw[s] = p[s] * ls * ((1 - ls) + earlier / treated)
        for o in cohorts:
            if o > s:
                phi2_raw[(s, o)] = p[s] * p[o] * (1 - ls) * (ls - share_post[o]) / treated

    denominator = math.fsum(phi1_raw.values()) + math.fsum(phi2_raw.values())
    if denominator <= 0:
        raise DegenerateDesignError(
            "plim weights have a zero denominator: no cohort changes treatment in the window"
        )

    eta1: dict[CohortPair, float] = {}
    eta2: dict[CohortPair, float] = {}
    eta3: dict[CohortPair, float] = {}
    for s in cohorts:
        ls = share_post[s]
        for o in cohorts:
            if o == s:
                continue
            pair = p[s] * p[o] / treated
            late, early = max(s, o), min(s, o)
            eta1[(s, o)] = pair * share_post[late] * (1 - share_post[early]) / denominator
            eta3[(s, o)] = pair * ls * (1 - ls) / denominator
            if o < s:
                eta2[(s, o)] = pair * ls * (share_post[o] - ls) / denominator

    return PlimWeights(
        phi1={s: v / denominator for s, v in phi1_raw.items()},
        phi2={k: v / denominator for k, v in phi2_raw.items()},
        eta1=eta1,
        eta2=eta2,
        eta3=eta3,
        eta0={s: p[s] * share_post[s] * (1 - share_post[s]) / denominator for s in cohorts},
        denominator=denominator,
    )


def _weighted_mean(pairs: list[tuple[float, float]]) -> float | None:
    total = math.fsum(w for w, _ in pairs)
    if total == 0:
        return None
    return math.fsum(w * v for w, v in pairs) / total


def plim_bias(
    shares: CohortShares,
    lam: PeriodSelector,
    att: AttFunction,
    untreated_trend: TrendFunction,
    comparison: Literal["pooled", "cohort"] = "pooled",
) -> BiasDecomposition:
    """Probability limit of the pooled matched 2WFE for a known population.

    Args:
        shares: Population cohort shares.
        lam: Period selector.
        att: att(s, t) = E[tau_it | cohort s] for t >= s.
        untreated_trend: untreated_trend(s, t, t') = E[Y_t(0) - Y_t'(0) | cohort s].
        comparison: "pooled" accounts for every cohort being compared with the
            matched never-treated units of all cohorts together, as the pooled
            weights do. "cohort" assumes each cohort's comparison units mimic that
            cohort alone, which drops ``b_pool_comparison``.
    """
    weights = plim_weights(shares, lam)
    cohorts = shares.finite_cohorts
    selected = [t for t in range(1, lam.T + 1) if lam.lam[t - 1]]

    def post_avg(
        s: CohortLabel, values: Callable[[int], float], upto: float = math.inf
    ) -> float | None:
        return _weighted_mean([(1.0, values(t)) for t in selected if s <= t < upto])

    def window_avg(
        post: Callable[[int], bool], pre: Callable[[int], bool], values: Callable[[int, int], float]
    ) -> float | None:
        return _weighted_mean(
            [(1.0, values(t, tp)) for t in selected if post(t) for tp in selected if pre(tp)]
        )

    att_terms: list[float] = []
    for s, w in weights.phi1.items():
        avg = post_avg(s, lambda t, s=s: att(s, t))
        if avg is not None and w:
            att_terms.append(w * avg)
    for (s, o), w in weights.phi2.items():
        avg = post_avg(s, lambda t, s=s: att(s, t), upto=o)
        if avg is not None and w:
            att_terms.append(w * avg)

    cohort_terms: list[float] = []
    for (s, o), w in weights.eta1.items():
        avg = post_avg(max(s, o), lambda t, s=s, o=o: att(s, t) - att(o, t))
        if avg is not None and w:
            cohort_terms.append(w * avg)

    time_terms: list[float] = []
    for (s, o), w in weights.eta2.items():
        avg = window_avg(
            lambda t, s=s: t >= s,
            lambda tp, s=s, o=o: o <= tp < s,
            lambda t, tp, o=o: att(o, t) - att(o, tp),
        )
        if avg is not None and w:
            time_terms.append(w * avg)

    pool_terms: list[float] = []
    for (s, o), w in weights.eta3.items():
        avg = window_avg(
            lambda t, s=s: t >= s,
            lambda tp, s=s: tp < s,
            lambda t, tp, s=s, o=o: untreated_trend(s, t, tp) - untreated_trend(o, t, tp),
        )
        if avg is not None and w:
            pool_terms.append(w * avg)

    comparison_terms: list[float] = []
    if comparison == "pooled":
        treated = 1.0 - shares.never_treated
        mix = {c: shares[c] / treated for c in cohorts}
        for s, w in weights.eta0.items():
            avg = window_avg(
                lambda t, s=s: t >= s,
                lambda tp, s=s: tp < s,
                lambda t, tp, s=s: untreated_trend(s, t, tp)
                - math.fsum(mix[c] * untreated_trend(c, t, tp) for c in cohorts),
            )
            if avg is not None and w:
                comparison_terms.append(w * avg)

    weighted_att = math.fsum(att_terms)
    b_cohort = math.fsum(cohort_terms)
    b_time = math.fsum(time_terms)
    b_treated = math.fsum(pool_terms)
    b_comparison = math.fsum(comparison_terms)
    b_pool = b_treated + b_comparison
    return BiasDecomposition(
        weighted_att_part=weighted_att,
        b_het_cohort=b_cohort,
        b_het_time=b_time,
        b_pool=b_pool,
        b_pool_treated=b_treated,
        b_pool_comparison=b_comparison,
        total_plim=weighted_att + b_cohort - b_time + b_pool,
    )
