"""Synthetic panel generation and counterfactual policy simulation.

The generator produces purchase/experience panels from a known choice
process (for parameter-recovery experiments); the policy simulator runs
a cohort of simulated customers forward under configurable per-route
quality regimes, twice (baseline and scenario), with all randomness
keyed by (customer, purpose, route, period) so the two runs share
streams exactly. Under the independent learning rule that makes the
untouched route's trajectory bit-identical across runs; under spillover
learning the divergence isolates the indirect revenue effect.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.special import expit, ndtri

from shiplearn import kernels
from shiplearn.choice import UtilitySpec, quality_utility
from shiplearn.errors import InputError
from shiplearn.learning import (
    BeliefState,
    LearningModelSpec,
    PriorHyper,
    QualitySignal,
    flat_priors,
    gibbs_update_simple,
    initial_state,
)
from shiplearn.panel import ChoicePanel
from shiplearn.randcore import SeededStream, gamma_array, normal_array

__all__ = [
    "SyntheticConfig",
    "generate_synthetic_panel",
    "RegimeSegment",
    "ScenarioSpec",
    "ScenarioResult",
    "load_scenario",
    "run_policy_scenario",
    "revenue_loss",
]


# ---------------------------------------------------------------------------
# synthetic panels for parameter recovery


@dataclass(frozen=True)
class SyntheticConfig:
    """Recovery-experiment generator settings.

    The default utility is intercept + belief predictor + one extra
    covariate, with random coefficients on the first two; ``model5``
    mode instead uses an asymmetric quality function with variance
    terms, for fit-ladder experiments.
    """

    n_customers: int = 100
    n_periods: int = 50
    routes_min: int = 2
    routes_max: int = 6
    coef_mean: tuple[float, ...] = (-0.5, 0.3, -0.4)
    coef_var: tuple[float, ...] = (0.6, 0.5, 0.0)
    utility_mode: str = "symmetric"  # or "model5"
    quality_mode: str = "iid"        # or "hierarchical"
    delay_mean: float = 0.0
    delay_sd: float = 1.0
    hier_grand_sd: float = 1.0
    hier_route_sd: float = 1.0
    hier_noise_sd: float = 1.0
    gibbs_total: int = 1000
    gibbs_burnin: int = 500
    prior: PriorHyper = field(default_factory=flat_priors)

    def coef_names(self) -> list[str]:
        if self.utility_mode == "symmetric":
            return ["intercept", "mu", "x2"]
        if self.utility_mode == "model5":
            return ["intercept", "mu_pos", "mu_neg", "sigma2", "var_mu", "x2"]
        raise InputError(f"unknown utility_mode {self.utility_mode!r}")

    def utility_spec(self) -> UtilitySpec:
        if self.utility_mode == "symmetric":
            return UtilitySpec(asymmetric=False, era=False, bua=False,
                               mu_scale=1.0, var_scale=1.0)
        return UtilitySpec(asymmetric=True, era=True, bua=True,
                           mu_scale=1.0, var_scale=1.0)

    def __post_init__(self) -> None:
        names = self.coef_names()
        if len(self.coef_mean) != len(names) or len(self.coef_var) != len(names):
            raise InputError(
                f"{self.utility_mode!r} utility needs {len(names)} coefficient "
                f"means/variances ({names})")
        if not 2 <= self.routes_min <= self.routes_max:
            raise InputError("route counts must satisfy 2 <= min <= max")


def _synthetic_month(period: int) -> int:
    day = (period - 1) * 3.5
    return int(min(11, day // 30.44)) + 1


def generate_synthetic_panel(config: SyntheticConfig,
                             stream: SeededStream) -> tuple[ChoicePanel, dict]:
    """Simulate purchases and delivery experiences for a synthetic cohort.

    Every period each customer has a shipping need on one multinomial
    route; purchase follows the logit of the configured utility, with
    beliefs evolving under the simple hierarchical rule from flat
    priors; a purchased shipment is delivered in the same period and its
    delay feeds the next period's beliefs.
    """
    names = config.coef_names()
    spec = config.utility_spec()
    lspec = LearningModelSpec(rule="hier-simple", gibbs_total=config.gibbs_total,
                              gibbs_burnin=config.gibbs_burnin,
                              pre_estimation_periods=0)
    prior = config.prior
    mean = np.asarray(config.coef_mean)
    var = np.asarray(config.coef_var)

    # quantile-balanced heterogeneity draws: each coefficient's cohort of
    # normal scores is a permuted stratification of (0,1), so the realized
    # cohort mean/variance sit on the configured values rather than one
    # noisy sample of them
    coef_gen = stream.child("coefs").generator()
    scores = ndtri((np.arange(config.n_customers) + 0.5) / config.n_customers)
    coef_z = np.column_stack([scores[coef_gen.permutation(config.n_customers)]
                              for _ in names])
    coef_draws = mean[None, :] + np.sqrt(var)[None, :] * coef_z

    rows: list[dict] = []
    truth_arrival: dict[str, dict[str, float]] = {}
    truth_coefs: dict[str, dict[str, float]] = {}
    for i in range(config.n_customers):
        cid = f"c{i:04d}"
        cstream = stream.child("synth", cid)
        gen = cstream.child("setup").generator()
        n_routes = int(gen.integers(config.routes_min, config.routes_max + 1))
        route_ids = tuple(f"{cid}-r{j}" for j in range(n_routes))
        m = gen.dirichlet(np.ones(n_routes))
        distance = gen.uniform(500.0, 12000.0, size=n_routes)
        coefs = dict(zip(names, coef_draws[i]))
        truth_arrival[cid] = {r: float(p) for r, p in zip(route_ids, m)}
        truth_coefs[cid] = {n: float(v) for n, v in coefs.items()}

        if config.quality_mode == "hierarchical":
            grand = config.delay_mean + config.hier_grand_sd * gen.standard_normal()
            route_mu = grand + config.hier_route_sd * gen.standard_normal(n_routes)
            noise_sd = config.hier_noise_sd
        else:
            route_mu = np.full(n_routes, config.delay_mean)
            noise_sd = config.delay_sd

        state = initial_state(route_ids, prior, lspec)
        signals: list[QualitySignal] = []
        cum_m = np.cumsum(m)
        for t in range(1, config.n_periods + 1):
            pgen = cstream.child("period", t).generator()
            k = int(np.searchsorted(cum_m, pgen.random(), side="right").clip(0, n_routes - 1))
            x2 = pgen.standard_normal(n_routes)
            f = quality_utility(state.mu_j[k], state.sigma2, state.var_mu_j[k],
                                spec, coefs)
            v = coefs["intercept"] + f + coefs["x2"] * x2[k]
            purchased = pgen.random() < expit(v)
            delay = np.nan
            if purchased:
                delay = route_mu[k] + noise_sd * pgen.standard_normal()
            for j, rid in enumerate(route_ids):
                rows.append({
                    "customer_id": cid, "route_id": rid, "period": t,
                    "y": int(purchased and j == k),
                    "y_star": int(purchased and j == k),
                    "delay_h": delay if (purchased and j == k) else np.nan,
                    "price": 0.0, "weight_kg": 0.0,
                    "second_half_week": (t - 1) % 2,
                    "month": _synthetic_month(t),
                    "distance_km": float(distance[j]),
                    "x2": float(x2[j]),
                })
            if purchased:
                signals.append(QualitySignal(route_ids[k], t, float(delay),
                                             distance_km=float(distance[k])))
                state = gibbs_update_simple(state, prior, signals, lspec,
                                            cstream.child("gibbs", t))

    frame = pd.DataFrame(rows)
    panel = ChoicePanel(frame, n_periods=config.n_periods)
    truth = {
        "coef_names": names,
        "coef_mean": list(config.coef_mean),
        "coef_var": list(config.coef_var),
        "utility_mode": config.utility_mode,
        "quality_mode": config.quality_mode,
        "arrival": truth_arrival,
        "customer_coefs": truth_coefs,
    }
    return panel, truth


# ---------------------------------------------------------------------------
# counterfactual policy simulation


@dataclass(frozen=True)
class RegimeSegment:
    """One stretch of a route's delay distribution: from ``start_period``
    (inclusive) delays are N(mean, sd^2)."""

    start_period: int
    mean: float
    sd: float


@dataclass(frozen=True)
class ScenarioSpec:
    """A counterfactual quality process plus cohort and pricing settings."""

    regimes: dict[str, tuple[RegimeSegment, ...]]
    arrival: dict[str, float]
    horizon: int
    cohort: int
    price: float
    learning_rule: str
    utility: UtilitySpec
    coefficients: dict[str, float]
    omega: dict[str, float] = field(default_factory=dict)
    prior: PriorHyper = field(default_factory=flat_priors)
    utility_offset: float = 0.0
    gibbs_total: int = 1000
    gibbs_burnin: int = 500

    def __post_init__(self) -> None:
        if self.horizon < 1 or self.cohort < 1:
            raise InputError("horizon and cohort must be positive")
        if set(self.regimes) != set(self.arrival):
            raise InputError("arrival and regimes must cover the same routes")
        if not math.isclose(sum(self.arrival.values()), 1.0, abs_tol=1e-8):
            raise InputError("arrival weights must sum to 1")
        for route, segments in self.regimes.items():
            if not segments or segments[0].start_period != 1:
                raise InputError(f"route {route!r}: regimes must start at period 1")
            starts = [s.start_period for s in segments]
            if starts != sorted(set(starts)):
                raise InputError(f"route {route!r}: regime starts must increase")
            if starts[-1] > self.horizon:
                raise InputError(f"route {route!r}: regime starts beyond horizon")
        if self.learning_rule not in ("hier-simple", "independent", "pooling"):
            raise InputError(
                f"policy simulation supports hier-simple/independent/pooling, "
                f"got {self.learning_rule!r}")

    def routes(self) -> list[str]:
        return sorted(self.regimes)

    def regime_at(self, route: str, period: int) -> RegimeSegment:
        current = self.regimes[route][0]
        for seg in self.regimes[route]:
            if seg.start_period <= period:
                current = seg
        return current


def _prior_from_json(obj: dict) -> PriorHyper:
    kwargs = dict(obj)
    if "sigma_mu" in kwargs:
        kwargs["sigma_mu2"] = float(kwargs.pop("sigma_mu")) ** 2
    if "sigma_gamma" in kwargs:
        kwargs["sigma_gamma2"] = float(kwargs.pop("sigma_gamma")) ** 2
    return PriorHyper(**kwargs)


def load_scenario(path: str | Path,
                  rule: str | None = None) -> tuple[ScenarioSpec, ScenarioSpec]:
    """Read a scenario JSON file; returns (baseline, scenario) specs that
    differ only in quality regimes."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"scenario file not found: {path}")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"bad scenario JSON {path}: {exc}") from exc
    try:
        utility = UtilitySpec.from_label(
            obj["utility"]["spec"],
            **{k: v for k, v in obj["utility"].items() if k != "spec"})
        base_regimes: dict[str, tuple[RegimeSegment, ...]] = {}
        scen_regimes: dict[str, tuple[RegimeSegment, ...]] = {}
        for route in obj["routes"]:
            rid = route["route_id"]
            base = tuple(RegimeSegment(int(s["start_period"]), float(s["mean"]),
                                       float(s["sd"])) for s in route["baseline"])
            scen = tuple(RegimeSegment(int(s["start_period"]), float(s["mean"]),
                                       float(s["sd"]))
                         for s in route.get("scenario", route["baseline"]))
            base_regimes[rid] = base
            scen_regimes[rid] = scen
        common = dict(
            arrival={k: float(v) for k, v in obj["arrival"].items()},
            horizon=int(obj["horizon"]),
            cohort=int(obj["cohort"]),
            price=float(obj["price"]),
            learning_rule=rule or obj["learning_rule"],
            utility=utility,
            coefficients={k: float(v) for k, v in obj["coefficients"].items()},
            omega={k: float(v) for k, v in obj.get("omega", {}).items()},
            prior=_prior_from_json(obj.get("prior", {})),
            utility_offset=float(obj.get("utility_offset", 0.0)),
            gibbs_total=int(obj.get("gibbs_total", 1000)),
            gibbs_burnin=int(obj.get("gibbs_burnin", 500)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"bad scenario JSON {path}: {exc}") from exc
    return (ScenarioSpec(regimes=base_regimes, **common),
            ScenarioSpec(regimes=scen_regimes, **common))


class _SpilloverBeliefs:
    """Hierarchical (spillover) beliefs for one simulated customer."""

    def __init__(self, routes: Sequence[str], spec: ScenarioSpec):
        self.lspec = LearningModelSpec(
            rule="hier-simple", gibbs_total=spec.gibbs_total,
            gibbs_burnin=spec.gibbs_burnin, pre_estimation_periods=0)
        self.prior = spec.prior
        self.state = initial_state(routes, self.prior, self.lspec)
        self.signals: list[QualitySignal] = []

    def summaries(self, j: int) -> tuple[float, float, float]:
        s = self.state
        return float(s.mu_j[j]), float(s.sigma2), float(s.var_mu_j[j])

    def absorb(self, signal: QualitySignal, stream: SeededStream) -> None:
        self.signals.append(signal)
        self.state = gibbs_update_simple(self.state, self.prior, self.signals,
                                         self.lspec, stream)


class _IndependentBeliefs:
    """Fully route-separable beliefs: each route has its own mean prior
    and its own experience-variance chain, so experiences on one route
    cannot move another route's state (exact, not just in expectation)."""

    def __init__(self, routes: Sequence[str], spec: ScenarioSpec):
        prior = spec.prior
        self.total = spec.gibbs_total
        self.burnin = spec.gibbs_burnin
        self.alpha_sigma = prior.alpha_sigma
        self.delta_sigma = prior.delta_sigma
        self.routes = list(routes)
        n = len(self.routes)
        self.prior_mean = np.array([prior.route_prior(r)[0] for r in routes])
        self.prior_var = np.array([prior.route_prior(r)[1] for r in routes])
        self.mu = self.prior_mean.copy()
        self.var = self.prior_var.copy()
        self.sigma2 = np.full(n, prior.sigma2_mean)
        self.n = np.zeros(n)
        self.total_q = np.zeros(n)
        self.total_sq = np.zeros(n)

    def summaries(self, j: int) -> tuple[float, float, float]:
        return float(self.mu[j]), float(self.sigma2[j]), float(self.var[j])

    def absorb(self, signal: QualitySignal, stream: SeededStream) -> None:
        j = self.routes.index(signal.route_id)
        self.n[j] += 1.0
        self.total_q[j] += signal.delay
        self.total_sq[j] += signal.delay * signal.delay
        qbar = self.total_q[j] / self.n[j]
        ss = max(self.total_sq[j] - self.n[j] * qbar * qbar, 0.0)
        z = normal_array(stream, self.total)
        g = gamma_array(stream, self.alpha_sigma + 0.5 * self.n[j], self.total)
        mu_d, s2_d = kernels.pooling_chain(
            float(self.n[j]), float(qbar), float(ss),
            float(self.prior_mean[j]), float(self.prior_var[j]),
            float(self.mu[j]), float(self.sigma2[j]), self.delta_sigma,
            z, g, self.burnin)
        self.mu[j] = mu_d.mean()
        self.var[j] = mu_d.var()
        self.sigma2[j] = s2_d.mean()


class _PoolingBeliefs:
    """One shared quality belief across all routes."""

    def __init__(self, routes: Sequence[str], spec: ScenarioSpec):
        prior = spec.prior
        self.total = spec.gibbs_total
        self.burnin = spec.gibbs_burnin
        self.alpha_sigma = prior.alpha_sigma
        self.delta_sigma = prior.delta_sigma
        self.prior_mean = prior.mu0
        self.prior_var = prior.sigma_mu2 + prior.xi2_mean
        self.mu = self.prior_mean
        self.var = self.prior_var
        self.sigma2 = prior.sigma2_mean
        self.n = 0.0
        self.total_q = 0.0
        self.total_sq = 0.0

    def summaries(self, j: int) -> tuple[float, float, float]:
        return float(self.mu), float(self.sigma2), float(self.var)

    def absorb(self, signal: QualitySignal, stream: SeededStream) -> None:
        self.n += 1.0
        self.total_q += signal.delay
        self.total_sq += signal.delay * signal.delay
        qbar = self.total_q / self.n
        ss = max(self.total_sq - self.n * qbar * qbar, 0.0)
        z = normal_array(stream, self.total)
        g = gamma_array(stream, self.alpha_sigma + 0.5 * self.n, self.total)
        mu_d, s2_d = kernels.pooling_chain(
            self.n, qbar, ss, self.prior_mean, self.prior_var,
            self.mu, self.sigma2, self.delta_sigma, z, g, self.burnin)
        self.mu = mu_d.mean()
        self.var = mu_d.var()
        self.sigma2 = s2_d.mean()


_BELIEFS = {
    "hier-simple": _SpilloverBeliefs,
    "independent": _IndependentBeliefs,
    "pooling": _PoolingBeliefs,
}


def _simulate_run(spec: ScenarioSpec, stream: SeededStream) -> np.ndarray:
    """Probability paths for one run: array (cohort, horizon, n_routes).

    All randomness is keyed by (purpose, customer, route, period) from
    the caller's stream, so two runs with the same stream share draws.
    """
    routes = spec.routes()
    n_routes = len(routes)
    cum_m = np.cumsum([spec.arrival[r] for r in routes])
    random_names = sorted(spec.omega)
    probs = np.empty((spec.cohort, spec.horizon, n_routes))

    for c in range(spec.cohort):
        coef_z = stream.child("coef", c).generator().standard_normal(len(random_names))
        coefs = dict(spec.coefficients)
        for name, zval in zip(random_names, coef_z):
            coefs[name] = coefs.get(name, 0.0) + math.sqrt(spec.omega[name]) * zval
        beliefs = _BELIEFS[spec.learning_rule](routes, spec)
        for t in range(1, spec.horizon + 1):
            for j in range(n_routes):
                mu_e, sigma2_e, var_e = beliefs.summaries(j)
                f = quality_utility(mu_e, sigma2_e, var_e, spec.utility, coefs)
                v = coefs.get("intercept", 0.0) + f + spec.utility_offset
                probs[c, t - 1, j] = expit(v)
            u = stream.child("arrival", c, t).generator().random()
            k = int(np.searchsorted(cum_m, u, side="right").clip(0, n_routes - 1))
            flip = stream.child("flip", c, t).generator().random()
            if flip < probs[c, t - 1, k]:
                seg = spec.regime_at(routes[k], t)
                zq = stream.child("signal", c, routes[k], t).generator().standard_normal()
                signal = QualitySignal(routes[k], t, seg.mean + seg.sd * zq)
                if spec.learning_rule == "independent":
                    chain = stream.child("chain", c, routes[k], t)
                else:
                    chain = stream.child("chain", c, t)
                beliefs.absorb(signal, chain)
    return probs


@dataclass
class ScenarioResult:
    """Cohort-average purchase probabilities per period/route for the
    baseline and scenario runs, with per-cell revenue deltas."""

    frame: pd.DataFrame
    changed_routes: tuple[str, ...]
    price: float
    horizon: int

    def to_csv(self, path: str | Path) -> None:
        self.frame.to_csv(path, index=False)


def run_policy_scenario(scenario: ScenarioSpec, baseline: ScenarioSpec,
                        stream: SeededStream) -> ScenarioResult:
    """Run baseline and scenario with shared streams and collect the
    per-period average purchase probabilities."""
    if baseline.routes() != scenario.routes():
        raise InputError("baseline and scenario must share one route set")
    for name in ("arrival", "horizon", "cohort", "price", "learning_rule",
                 "utility", "coefficients", "omega", "prior", "utility_offset",
                 "gibbs_total", "gibbs_burnin"):
        if getattr(baseline, name) != getattr(scenario, name):
            raise InputError(f"baseline and scenario differ in {name}; only "
                             "quality regimes may change")
    routes = scenario.routes()
    base_probs = _simulate_run(baseline, stream)
    scen_probs = _simulate_run(scenario, stream)
    base_mean = base_probs.mean(axis=0)
    scen_mean = scen_probs.mean(axis=0)
    rows = []
    for t in range(1, scenario.horizon + 1):
        for j, route in enumerate(routes):
            pb = float(base_mean[t - 1, j])
            ps = float(scen_mean[t - 1, j])
            rows.append({"period": t, "route": route,
                         "avg_prob_baseline": pb, "avg_prob_scenario": ps,
                         "revenue_delta": scenario.price * (pb - ps)})
    changed = tuple(r for r in routes if baseline.regimes[r] != scenario.regimes[r])
    return ScenarioResult(frame=pd.DataFrame(rows), changed_routes=changed,
                          price=scenario.price, horizon=scenario.horizon)


def revenue_loss(result: ScenarioResult, at_period: int) -> tuple[float, float]:
    """(direct, indirect) revenue loss at one period: price times the
    baseline-minus-scenario probability gap, summed over changed routes
    (direct) and unchanged routes (indirect)."""
    if not 1 <= at_period <= result.horizon:
        raise InputError(f"period {at_period} outside 1..{result.horizon}")
    rows = result.frame[result.frame["period"] == at_period]
    direct = float(rows[rows["route"].isin(result.changed_routes)]["revenue_delta"].sum())
    indirect = float(rows[~rows["route"].isin(result.changed_routes)]["revenue_delta"].sum())
    return direct, indirect
