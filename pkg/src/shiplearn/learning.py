"""Per-customer belief evolution over route quality.

Six learning rules are supported: a simple hierarchical model with a
shared grand mean and route-heterogeneity layer (spillover learning),
its regression variant with a distance slope, independent per-route
learning, full information pooling (plain and regression), and a
short-memory rule that just tracks the latest experience.

All Bayesian rules run blocked Gibbs updates over normal / inverse-gamma
conditionals; the chain inner loops live in :mod:`shiplearn.kernels`.
Estimates are posterior means of post-burn-in draws. Signals delivered
in period ``t`` enter the information set at the start of ``t + 1``.
"""

from __future__ import annotations

import concurrent.futures
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from shiplearn import kernels
from shiplearn.errors import InputError, NumericalError
from shiplearn.randcore import SeededStream, gamma_array, normal_array

__all__ = [
    "RULES",
    "PriorHyper",
    "LearningModelSpec",
    "QualitySignal",
    "BeliefState",
    "ChainDraws",
    "LearningFit",
    "flat_priors",
    "initial_state",
    "route_mean_conditional",
    "sigma2_conditional_mean",
    "gibbs_update_simple",
    "gibbs_update_regression",
    "update_independent",
    "update_pooling",
    "update_short_memory",
    "pre_estimate",
    "run_learning_pass",
    "quality_loglik",
    "quality_dic",
    "trajectory_frame",
]

RULES = (
    "short-memory",
    "independent",
    "pooling",
    "pooling-regression",
    "hier-simple",
    "hier-regression",
)

_REGRESSION_RULES = ("hier-regression", "pooling-regression")


@dataclass(frozen=True)
class PriorHyper:
    """Hyper-parameters of a customer's beliefs at the start of a pass.

    Defaults are the common flat period-1 priors; after pre-estimation
    each customer carries a moment-matched version of these. The
    ``route_*`` maps hold per-route priors for the independent rule.
    """

    alpha_sigma: float = 1.05
    delta_sigma: float = 10.0
    mu0: float = 0.0
    sigma_mu2: float = 900.0
    alpha_xi: float = 1.05
    delta_xi: float = 3.0
    gamma0: float = 0.0
    sigma_gamma2: float = 900.0
    route_means: dict[str, float] | None = None
    route_vars: dict[str, float] | None = None

    def __post_init__(self) -> None:
        for name in ("alpha_sigma", "delta_sigma", "sigma_mu2", "alpha_xi",
                     "delta_xi", "sigma_gamma2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def sigma2_mean(self) -> float:
        return self.delta_sigma / (self.alpha_sigma - 1.0) if self.alpha_sigma > 1 \
            else self.delta_sigma / 0.05

    @property
    def xi2_mean(self) -> float:
        return self.delta_xi / (self.alpha_xi - 1.0) if self.alpha_xi > 1 \
            else self.delta_xi / 0.05

    def route_prior(self, route_id: str) -> tuple[float, float]:
        """Independent-rule prior for one route; defaults to the marginal
        spread of a route mean under the hierarchy."""
        mean = self.mu0
        var = self.sigma_mu2 + self.xi2_mean
        if self.route_means is not None and route_id in self.route_means:
            mean = self.route_means[route_id]
        if self.route_vars is not None and route_id in self.route_vars:
            var = self.route_vars[route_id]
        return mean, var


def flat_priors() -> PriorHyper:
    """The common period-1 priors used before any pre-estimation."""
    return PriorHyper()


@dataclass(frozen=True)
class LearningModelSpec:
    rule: str = "hier-simple"
    gibbs_total: int = 1000
    gibbs_burnin: int = 500
    pre_estimation_periods: int = 24
    var_convention: str = "draws"  # or "closed-form"
    require_identified_slope: bool = True

    def __post_init__(self) -> None:
        if self.rule not in RULES:
            raise ValueError(f"unknown learning rule {self.rule!r}; expected one of {RULES}")
        if not 0 <= self.gibbs_burnin < self.gibbs_total:
            raise ValueError("need 0 <= burnin < total")
        if self.pre_estimation_periods < 0:
            raise ValueError("pre_estimation_periods must be >= 0")
        if self.var_convention not in ("draws", "closed-form"):
            raise ValueError("var_convention must be 'draws' or 'closed-form'")

    @property
    def uses_distance(self) -> bool:
        return self.rule in _REGRESSION_RULES


@dataclass(frozen=True)
class QualitySignal:
    """One delivered shipment's observed transport delay (hours; negative
    means early)."""

    route_id: str
    period: int
    delay: float
    distance_km: float = float("nan")

    def __post_init__(self) -> None:
        if not np.isfinite(self.delay):
            raise ValueError("signal delay must be finite")


@dataclass
class ChainDraws:
    """Post-burn-in draws from the most recent Gibbs update."""

    route_ids: tuple[str, ...]
    mu_j: np.ndarray | None = None      # (kept, J) route mean-quality draws
    mu: np.ndarray | None = None        # grand mean / pooled mean
    sigma2: np.ndarray | None = None
    xi2: np.ndarray | None = None
    gamma: np.ndarray | None = None
    theta_j: np.ndarray | None = None   # regression route intercepts


@dataclass
class BeliefState:
    """A customer's current posterior summaries, one slot per route."""

    route_ids: tuple[str, ...]
    mu_j: np.ndarray
    var_mu_j: np.ndarray
    mu: float
    sigma2: float
    xi2: float
    gamma: float | None = None
    theta_j: np.ndarray | None = None
    last_q: np.ndarray | None = None
    draws: ChainDraws | None = None

    def copy(self) -> "BeliefState":
        return BeliefState(
            route_ids=self.route_ids,
            mu_j=self.mu_j.copy(),
            var_mu_j=self.var_mu_j.copy(),
            mu=self.mu,
            sigma2=self.sigma2,
            xi2=self.xi2,
            gamma=self.gamma,
            theta_j=None if self.theta_j is None else self.theta_j.copy(),
            last_q=None if self.last_q is None else self.last_q.copy(),
            draws=self.draws,
        )

    def route_index(self, route_id: str) -> int:
        try:
            return self.route_ids.index(route_id)
        except ValueError:
            raise InputError(f"unknown route {route_id!r} for this customer") from None


def initial_state(route_ids: Sequence[str], prior: PriorHyper,
                  spec: LearningModelSpec) -> BeliefState:
    """Deterministic chain start: prior means everywhere."""
    if len(route_ids) == 0:
        raise ValueError("route set must be non-empty")
    route_ids = tuple(route_ids)
    n = len(route_ids)
    if spec.rule == "independent":
        means = np.array([prior.route_prior(r)[0] for r in route_ids])
        varis = np.array([prior.route_prior(r)[1] for r in route_ids])
        return BeliefState(route_ids, means, varis, prior.mu0,
                           prior.sigma2_mean, prior.xi2_mean,
                           last_q=np.zeros(n))
    mu_j = np.full(n, prior.mu0, dtype=np.float64)
    var0 = prior.sigma_mu2 + prior.xi2_mean
    if spec.rule in ("pooling", "pooling-regression"):
        var0 = prior.sigma_mu2 + prior.xi2_mean
    state = BeliefState(route_ids, mu_j, np.full(n, var0), prior.mu0,
                        prior.sigma2_mean, prior.xi2_mean,
                        last_q=np.zeros(n))
    if spec.uses_distance:
        state.gamma = prior.gamma0
        state.theta_j = np.full(n, prior.mu0, dtype=np.float64)
    return state


def route_mean_conditional(n_j: float, q_bar: float, mu: float,
                           sigma2: float, xi2: float) -> tuple[float, float]:
    """Full-conditional mean and variance of one route's mean quality.

    The mean is the convex combination of the route's observed signal
    average and the grand mean, with weight ``n ξ² / (n ξ² + σ²)`` on
    the data.
    """
    if sigma2 <= 0 or xi2 <= 0:
        raise ValueError("variances must be positive")
    if n_j <= 0:
        return mu, xi2
    denom = n_j * xi2 + sigma2
    return (n_j * xi2 * q_bar + sigma2 * mu) / denom, xi2 * sigma2 / denom


def sigma2_conditional_mean(alpha_sigma: float, delta_sigma: float,
                            n_j: np.ndarray, q_bar: np.ndarray,
                            ss_j: np.ndarray, mu_j: np.ndarray) -> float:
    """Posterior-conditional expectation of the experience variance given
    the route means: scale over (shape - 1) of its inverse-gamma block."""
    resid = float(np.sum(ss_j + n_j * (q_bar - mu_j) ** 2))
    shape = alpha_sigma + 0.5 * float(np.sum(n_j))
    if shape <= 1.0:
        raise NumericalError("experience-variance conditional has no mean (shape <= 1)")
    return (delta_sigma + 0.5 * resid) / (shape - 1.0)


def _route_stats(route_ids: Sequence[str], signals: Iterable[QualitySignal],
                 need_distance: bool = False):
    """Per-route count, mean and centered sum of squares (+ distance)."""
    n = len(route_ids)
    index = {r: j for j, r in enumerate(route_ids)}
    nj = np.zeros(n)
    total = np.zeros(n)
    totsq = np.zeros(n)
    dist = np.full(n, np.nan)
    for s in signals:
        j = index.get(s.route_id)
        if j is None:
            raise InputError(f"signal on unknown route {s.route_id!r}")
        nj[j] += 1.0
        total[j] += s.delay
        totsq[j] += s.delay * s.delay
        if need_distance:
            if not np.isfinite(s.distance_km):
                raise InputError("regression learning needs distance_km on every signal")
            dist[j] = s.distance_km
    qbar = np.where(nj > 0, total / np.maximum(nj, 1.0), 0.0)
    ssj = np.where(nj > 0, totsq - nj * qbar * qbar, 0.0)
    ssj = np.maximum(ssj, 0.0)  # guard tiny negative rounding
    return nj, qbar, ssj, dist


def _check_chain(*arrays: np.ndarray) -> None:
    for arr in arrays:
        if arr is not None and not np.all(np.isfinite(arr)):
            raise NumericalError("chain produced non-finite draws; check prior scales")


def _var_of(draws: np.ndarray) -> np.ndarray:
    return draws.var(axis=0) if draws.ndim > 1 else draws.var()


def gibbs_update_simple(state: BeliefState, prior: PriorHyper,
                        signals: Sequence[QualitySignal],
                        spec: LearningModelSpec,
                        stream: SeededStream) -> BeliefState:
    """One hierarchical update against all signals delivered so far."""
    if len(state.route_ids) == 0:
        raise ValueError("empty route set")
    n = len(state.route_ids)
    nj, qbar, ssj, _ = _route_stats(state.route_ids, signals)
    total, burnin = spec.gibbs_total, spec.gibbs_burnin
    z = normal_array(stream, (total, n + 1))
    g_sigma = gamma_array(stream, prior.alpha_sigma + 0.5 * nj.sum(), total)
    g_xi = gamma_array(stream, prior.alpha_xi + 0.5 * n, total)
    mu_j_d, mu_d, s2_d, xi2_d = kernels.hier_simple_chain(
        nj, qbar, ssj, state.mu_j, state.mu, state.sigma2, state.xi2,
        prior.delta_sigma, prior.mu0, prior.sigma_mu2, prior.delta_xi,
        z, g_sigma, g_xi, burnin)
    _check_chain(mu_j_d, mu_d, s2_d, xi2_d)
    new = state.copy()
    new.mu_j = mu_j_d.mean(axis=0)
    new.mu = float(mu_d.mean())
    new.sigma2 = float(s2_d.mean())
    new.xi2 = float(xi2_d.mean())
    if spec.var_convention == "closed-form":
        new.var_mu_j = np.full(n, new.xi2 + prior.sigma_mu2)
    else:
        new.var_mu_j = _var_of(mu_j_d)
    new.draws = ChainDraws(state.route_ids, mu_j=mu_j_d, mu=mu_d,
                           sigma2=s2_d, xi2=xi2_d)
    return new


def gibbs_update_regression(state: BeliefState, prior: PriorHyper,
                            signals: Sequence[QualitySignal],
                            spec: LearningModelSpec,
                            stream: SeededStream) -> BeliefState:
    """Hierarchical update where route means are an intercept plus a
    common slope on route distance."""
    if len(state.route_ids) == 0:
        raise ValueError("empty route set")
    n = len(state.route_ids)
    nj, qbar, ssj, dist = _route_stats(state.route_ids, signals, need_distance=True)
    observed = nj > 0
    if observed.any() and spec.require_identified_slope:
        obs_d = dist[observed]
        if np.ptp(obs_d) == 0.0 and observed.sum() > 0:
            raise InputError(
                "distance slope unidentified: all observed routes share one distance")
    dist = np.where(np.isfinite(dist), dist, 0.0)
    total, burnin = spec.gibbs_total, spec.gibbs_burnin
    z = normal_array(stream, (total, n + 2))
    g_sigma = gamma_array(stream, prior.alpha_sigma + 0.5 * nj.sum(), total)
    g_xi = gamma_array(stream, prior.alpha_xi + 0.5 * n, total)
    theta0 = state.theta_j if state.theta_j is not None else state.mu_j
    gamma0 = state.gamma if state.gamma is not None else prior.gamma0
    th_d, ga_d, mu_d, s2_d, xi2_d = kernels.hier_regression_chain(
        nj, qbar, ssj, dist, theta0, gamma0, state.mu, state.sigma2, state.xi2,
        prior.delta_sigma, prior.mu0, prior.sigma_mu2, prior.delta_xi,
        prior.gamma0, prior.sigma_gamma2, z, g_sigma, g_xi, burnin)
    _check_chain(th_d, ga_d, mu_d, s2_d, xi2_d)
    new = state.copy()
    new.theta_j = th_d.mean(axis=0)
    new.gamma = float(ga_d.mean())
    new.mu = float(mu_d.mean())
    new.sigma2 = float(s2_d.mean())
    new.xi2 = float(xi2_d.mean())
    mu_jt_draws = th_d + ga_d[:, None] * dist[None, :]
    new.mu_j = mu_jt_draws.mean(axis=0)
    if spec.var_convention == "closed-form":
        new.var_mu_j = np.full(n, new.xi2 + prior.sigma_mu2)
    else:
        new.var_mu_j = _var_of(mu_jt_draws)
    new.draws = ChainDraws(state.route_ids, mu_j=mu_jt_draws, mu=mu_d,
                           sigma2=s2_d, xi2=xi2_d, gamma=ga_d, theta_j=th_d)
    return new


def update_independent(state: BeliefState, prior: PriorHyper,
                       signals: Sequence[QualitySignal],
                       spec: LearningModelSpec,
                       stream: SeededStream) -> BeliefState:
    """Per-route conjugate updating; a route with no signals keeps its
    prior exactly and consumes no randomness."""
    if len(state.route_ids) == 0:
        raise ValueError("empty route set")
    nj, qbar, ssj, _ = _route_stats(state.route_ids, signals)
    obs = np.flatnonzero(nj > 0)
    new = state.copy()
    if obs.size == 0:
        return new
    prior_mean = np.array([prior.route_prior(state.route_ids[j])[0] for j in obs])
    prior_var = np.array([prior.route_prior(state.route_ids[j])[1] for j in obs])
    total, burnin = spec.gibbs_total, spec.gibbs_burnin
    z = normal_array(stream, (total, obs.size))
    g_sigma = gamma_array(stream, prior.alpha_sigma + 0.5 * nj.sum(), total)
    mu_j_d, s2_d = kernels.independent_chain(
        nj[obs], qbar[obs], ssj[obs], prior_mean, prior_var,
        state.mu_j[obs], state.sigma2, prior.delta_sigma,
        z, g_sigma, burnin)
    _check_chain(mu_j_d, s2_d)
    new.mu_j[obs] = mu_j_d.mean(axis=0)
    new.var_mu_j[obs] = mu_j_d.var(axis=0)
    new.sigma2 = float(s2_d.mean())
    full_mu_j = np.tile(new.mu_j, (mu_j_d.shape[0], 1))
    full_mu_j[:, obs] = mu_j_d
    new.draws = ChainDraws(state.route_ids, mu_j=full_mu_j, sigma2=s2_d)
    return new


def update_pooling(state: BeliefState, prior: PriorHyper,
                   signals: Sequence[QualitySignal],
                   spec: LearningModelSpec,
                   stream: SeededStream) -> BeliefState:
    """Shared-mean updating: every route reports the same belief (plus a
    distance offset for the regression variant)."""
    if len(state.route_ids) == 0:
        raise ValueError("empty route set")
    n = len(state.route_ids)
    need_d = spec.rule == "pooling-regression"
    nj, qbar, ssj, dist = _route_stats(state.route_ids, signals, need_distance=need_d)
    obs = np.flatnonzero(nj > 0)
    new = state.copy()
    if obs.size == 0:
        return new
    total, burnin = spec.gibbs_total, spec.gibbs_burnin
    if spec.rule == "pooling":
        n_total = float(nj.sum())
        q_pool = float((nj * qbar).sum() / n_total)
        ss_pool = float((ssj + nj * (qbar - q_pool) ** 2).sum())
        z = normal_array(stream, total)
        g_sigma = gamma_array(stream, prior.alpha_sigma + 0.5 * n_total, total)
        mu_d, s2_d = kernels.pooling_chain(
            n_total, q_pool, ss_pool, prior.mu0,
            prior.sigma_mu2 + prior.xi2_mean,
            state.mu, state.sigma2, prior.delta_sigma, z, g_sigma, burnin)
        _check_chain(mu_d, s2_d)
        new.mu = float(mu_d.mean())
        new.mu_j = np.full(n, new.mu)
        new.var_mu_j = np.full(n, mu_d.var())
        new.sigma2 = float(s2_d.mean())
        draws_mu_j = np.tile(mu_d[:, None], (1, n))
        new.draws = ChainDraws(state.route_ids, mu_j=draws_mu_j, mu=mu_d, sigma2=s2_d)
        return new

    if spec.require_identified_slope and np.ptp(dist[obs]) == 0.0:
        raise InputError(
            "distance slope unidentified: all observed routes share one distance")
    dist = np.where(np.isfinite(dist), dist, 0.0)
    z = normal_array(stream, (total, 2))
    g_sigma = gamma_array(stream, prior.alpha_sigma + 0.5 * nj.sum(), total)
    theta0 = state.theta_j[0] if state.theta_j is not None else prior.mu0
    gamma0 = state.gamma if state.gamma is not None else prior.gamma0
    th_d, ga_d, s2_d = kernels.pooling_regression_chain(
        nj[obs], qbar[obs], ssj[obs], dist[obs], theta0, gamma0, state.sigma2,
        prior.mu0, prior.sigma_mu2 + prior.xi2_mean,
        prior.gamma0, prior.sigma_gamma2, prior.delta_sigma,
        z, g_sigma, burnin)
    _check_chain(th_d, ga_d, s2_d)
    new.theta_j = np.full(n, float(th_d.mean()))
    new.gamma = float(ga_d.mean())
    new.sigma2 = float(s2_d.mean())
    new.mu = float(th_d.mean())
    mu_jt_draws = th_d[:, None] + ga_d[:, None] * dist[None, :]
    new.mu_j = mu_jt_draws.mean(axis=0)
    new.var_mu_j = _var_of(mu_jt_draws)
    new.draws = ChainDraws(state.route_ids, mu_j=mu_jt_draws, mu=th_d,
                           sigma2=s2_d, gamma=ga_d)
    return new


def update_short_memory(state: BeliefState,
                        signals_this_period: Sequence[QualitySignal]) -> BeliefState:
    """Track the most recent delivered delay per route; 0 until the first
    experience, carried forward when nothing new is delivered."""
    new = state.copy()
    if new.last_q is None:
        new.last_q = np.zeros(len(new.route_ids))
    for s in sorted(signals_this_period, key=lambda s: s.period):
        new.last_q[new.route_index(s.route_id)] = s.delay
    new.mu_j = new.last_q.copy()
    return new


_UPDATERS = {
    "hier-simple": gibbs_update_simple,
    "hier-regression": gibbs_update_regression,
    "independent": update_independent,
    "pooling": update_pooling,
    "pooling-regression": update_pooling,
}


def _update(state, prior, signals, spec, stream):
    return _UPDATERS[spec.rule](state, prior, signals, spec, stream)


def _ig_moment_match(draws: np.ndarray) -> tuple[float, float]:
    if draws.size < 2:
        raise NumericalError(
            "degenerate chain in moment matching; run a longer chain")
    m = float(draws.mean())
    v = float(draws.var(ddof=1))
    if not np.isfinite(v) or v <= 0:
        raise NumericalError(
            "degenerate chain in moment matching; run a longer chain")
    alpha = m * m / v + 2.0
    delta = m * (alpha - 1.0)
    return alpha, delta


def pre_estimate(signals: Sequence[QualitySignal], route_ids: Sequence[str],
                 spec: LearningModelSpec, stream: SeededStream,
                 prior: PriorHyper | None = None) -> PriorHyper:
    """Run the learning rule over the pre-estimation window and moment-
    match the resulting posterior back into prior form.

    Inverse-gamma hypers come from the mean/variance of the variance
    draws (``alpha = m²/v + 2``, ``delta = m (alpha - 1)``); normal
    hypers from the mean/variance of the location draws.
    """
    if spec.rule == "short-memory":
        raise InputError("short-memory rule has no priors to pre-estimate")
    prior = prior if prior is not None else flat_priors()
    cutoff = spec.pre_estimation_periods
    window = sorted((s for s in signals if s.period <= cutoff),
                    key=lambda s: (s.period, s.route_id))
    if not window:
        return prior  # nothing delivered: the posterior is the prior, exactly
    state = initial_state(route_ids, prior, spec)
    seen: list[QualitySignal] = []
    for t in sorted({s.period for s in window}):
        seen.extend(s for s in window if s.period == t)
        state = _update(state, prior, seen, spec, stream.child("pre", t))
    draws = state.draws
    alpha_s, delta_s = _ig_moment_match(draws.sigma2)
    out = {"alpha_sigma": alpha_s, "delta_sigma": delta_s}
    if spec.rule in ("hier-simple", "hier-regression"):
        alpha_x, delta_x = _ig_moment_match(draws.xi2)
        out.update(alpha_xi=alpha_x, delta_xi=delta_x,
                   mu0=float(draws.mu.mean()),
                   sigma_mu2=float(draws.mu.var(ddof=1)))
    elif spec.rule in ("pooling", "pooling-regression"):
        out.update(mu0=float(draws.mu.mean()),
                   sigma_mu2=float(draws.mu.var(ddof=1)),
                   alpha_xi=prior.alpha_xi, delta_xi=prior.delta_xi)
    elif spec.rule == "independent":
        means = dict(prior.route_means or {})
        varis = dict(prior.route_vars or {})
        for j, r in enumerate(route_ids):
            col = draws.mu_j[:, j]
            if col.var(ddof=1) > 0:
                means[r] = float(col.mean())
                varis[r] = float(col.var(ddof=1))
        out.update(route_means=means, route_vars=varis,
                   alpha_xi=prior.alpha_xi, delta_xi=prior.delta_xi)
    if spec.rule in _REGRESSION_RULES and draws.gamma is not None:
        out.update(gamma0=float(draws.gamma.mean()),
                   sigma_gamma2=float(draws.gamma.var(ddof=1)))
    return replace(prior, **out)


@dataclass
class LearningFit:
    """Result of a full learning pass: per-period belief snapshots plus
    the final chains used for model criticism."""

    spec: LearningModelSpec
    trajectory: pd.DataFrame
    final_states: dict[str, BeliefState]
    priors: dict[str, PriorHyper]


def _customer_signals(panel_frame: pd.DataFrame) -> list[QualitySignal]:
    rows = panel_frame[panel_frame["y_star"] == 1]
    has_dist = "distance_km" in panel_frame.columns
    out = []
    for row in rows.itertuples(index=False):
        out.append(QualitySignal(
            route_id=row.route_id, period=int(row.period), delay=float(row.delay_h),
            distance_km=float(getattr(row, "distance_km", float("nan")))
            if has_dist else float("nan")))
    return out


def _snapshot_rows(cid: str, t: int, state: BeliefState, spec: LearningModelSpec):
    rows = []
    for j, r in enumerate(state.route_ids):
        rows.append({
            "customer_id": cid,
            "route_id": r,
            "period": t,
            "mu_j_E": float(state.mu_j[j]),
            "var_mu_j": float(state.var_mu_j[j]) if spec.rule != "short-memory" else np.nan,
            "mu_E": state.mu if spec.rule != "short-memory" else np.nan,
            "sigma2_E": state.sigma2 if spec.rule != "short-memory" else np.nan,
            "xi2_E": state.xi2 if spec.rule in ("hier-simple", "hier-regression") else np.nan,
            "gamma_E": state.gamma if spec.uses_distance else np.nan,
        })
    return rows


def _run_one_customer(cid: str, group: pd.DataFrame, spec: LearningModelSpec,
                      prior: PriorHyper | None, n_periods: int,
                      stream: SeededStream):
    route_ids = tuple(sorted(group["route_id"].unique()))
    signals = _customer_signals(group)
    cstream = stream.child("learn", cid)
    if spec.rule == "short-memory":
        prior = prior if prior is not None else flat_priors()
        state = initial_state(route_ids, prior, spec)
        by_period: dict[int, list[QualitySignal]] = {}
        for s in signals:
            by_period.setdefault(s.period, []).append(s)
        rows = []
        est_start = spec.pre_estimation_periods + 1
        for t in range(1, n_periods + 1):
            if t >= est_start:
                rows.extend(_snapshot_rows(cid, t, state, spec))
            if t in by_period:
                state = update_short_memory(state, by_period[t])
        return rows, state, prior

    if prior is None:
        if spec.pre_estimation_periods > 0:
            prior = pre_estimate(signals, route_ids, spec, cstream)
        else:
            prior = flat_priors()
    state = initial_state(route_ids, prior, spec)
    est_start = spec.pre_estimation_periods + 1
    cumulative: list[QualitySignal] = []
    by_period = {}
    for s in signals:
        if s.period >= est_start:
            by_period.setdefault(s.period, []).append(s)
    rows = []
    for t in range(est_start, n_periods + 1):
        rows.extend(_snapshot_rows(cid, t, state, spec))
        if t in by_period:
            cumulative.extend(by_period[t])
            try:
                state = _update(state, prior, cumulative, spec,
                                cstream.child("gibbs", t))
            except (NumericalError, InputError) as exc:
                raise type(exc)(f"customer {cid!r}, period {t}: {exc}") from exc
    return rows, state, prior


def run_learning_pass(panel, spec: LearningModelSpec,
                      stream: SeededStream,
                      priors: dict[str, PriorHyper] | None = None,
                      threads: int = 1) -> LearningFit:
    """Sequential per-period belief updating for every customer.

    Periods with no new deliveries copy the previous state exactly.
    Customers are independent, so the per-customer passes can run on a
    thread pool; each customer draws from its own substream keyed by id,
    making the result identical for any thread count.
    """
    frame = panel.frame if hasattr(panel, "frame") else panel
    n_periods = int(frame["period"].max())
    if spec.uses_distance and "distance_km" not in frame.columns:
        raise InputError(f"rule {spec.rule!r} needs a distance_km panel column")
    groups = {cid: g for cid, g in frame.groupby("customer_id", sort=True)}
    results: dict[str, tuple] = {}

    def work(cid):
        return _run_one_customer(cid, groups[cid], spec,
                                 None if priors is None else priors.get(cid),
                                 n_periods, stream)

    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            for cid, res in zip(groups, pool.map(work, groups)):
                results[cid] = res
    else:
        for cid in groups:
            results[cid] = work(cid)

    all_rows: list[dict] = []
    final_states: dict[str, BeliefState] = {}
    fitted_priors: dict[str, PriorHyper] = {}
    for cid in sorted(results):
        rows, state, prior = results[cid]
        all_rows.extend(rows)
        final_states[cid] = state
        fitted_priors[cid] = prior
    trajectory = pd.DataFrame(
        all_rows, columns=["customer_id", "route_id", "period", "mu_j_E",
                           "var_mu_j", "mu_E", "sigma2_E", "xi2_E", "gamma_E"])
    return LearningFit(spec, trajectory, final_states, fitted_priors)


def trajectory_frame(fit: LearningFit) -> pd.DataFrame:
    return fit.trajectory


def quality_loglik(panel, fit: LearningFit) -> float:
    """One-step-ahead predictive log-likelihood of the delivered delays
    over the estimation window (start-of-period beliefs; predictive
    variance is experience variance plus belief uncertainty)."""
    if fit.spec.rule == "short-memory":
        raise InputError("short-memory rule has no predictive density")
    frame = panel.frame if hasattr(panel, "frame") else panel
    est_start = fit.spec.pre_estimation_periods + 1
    obs = frame[(frame["y_star"] == 1) & (frame["period"] >= est_start)]
    merged = obs.merge(fit.trajectory, on=["customer_id", "route_id", "period"],
                       how="left", validate="many_to_one")
    if merged["mu_j_E"].isna().any():
        raise InputError("trajectory does not cover every delivered signal")
    var = merged["sigma2_E"].to_numpy() + merged["var_mu_j"].to_numpy()
    if np.any(var <= 0):
        raise NumericalError("non-positive predictive variance")
    resid = merged["delay_h"].to_numpy() - merged["mu_j_E"].to_numpy()
    return float(np.sum(-0.5 * (np.log(2.0 * math.pi * var) + resid * resid / var)))


def quality_dic(panel, fit: LearningFit) -> float:
    """Deviance information criterion from the final posterior chains:
    deviance at the posterior mean plus twice the effective parameter
    count ``p_D = mean deviance - deviance at the mean``."""
    if fit.spec.rule == "short-memory":
        raise InputError("short-memory rule has no posterior chain")
    frame = panel.frame if hasattr(panel, "frame") else panel
    est_start = fit.spec.pre_estimation_periods + 1
    obs = frame[(frame["y_star"] == 1) & (frame["period"] >= est_start)]
    total = 0.0
    for cid, group in obs.groupby("customer_id", sort=True):
        state = fit.final_states[cid]
        if state.draws is None or state.draws.mu_j is None:
            continue  # never updated, so no signals in the window either
        draws = state.draws
        idx = np.array([state.route_index(r) for r in group["route_id"]])
        q = group["delay_h"].to_numpy()
        mu_draws = draws.mu_j[:, idx]                      # (kept, n_obs)
        s2_draws = draws.sigma2[:, None]
        dev_draws = np.sum(np.log(2.0 * math.pi * s2_draws)
                           + (q[None, :] - mu_draws) ** 2 / s2_draws, axis=1)
        mu_hat = state.mu_j[idx]
        s2_hat = state.sigma2
        dev_hat = float(np.sum(np.log(2.0 * math.pi * s2_hat)
                               + (q - mu_hat) ** 2 / s2_hat))
        d_bar = float(dev_draws.mean())
        total += 2.0 * d_bar - dev_hat
    return total
