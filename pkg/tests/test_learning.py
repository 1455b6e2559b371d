import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import hier_posterior_grid, ig_moments, normal_logpdf
from shiplearn.errors import InputError, NumericalError
from shiplearn.learning import (
    BeliefState,
    ChainDraws,
    LearningFit,
    LearningModelSpec,
    PriorHyper,
    QualitySignal,
    flat_priors,
    gibbs_update_regression,
    gibbs_update_simple,
    initial_state,
    pre_estimate,
    quality_dic,
    quality_loglik,
    route_mean_conditional,
    run_learning_pass,
    sigma2_conditional_mean,
    update_independent,
    update_pooling,
    update_short_memory,
)
from shiplearn.panel import ChoicePanel
from shiplearn.randcore import SeededStream


def _spec(rule="hier-simple", total=1000, burnin=500, pre=0, **kw):
    return LearningModelSpec(rule=rule, gibbs_total=total, gibbs_burnin=burnin,
                             pre_estimation_periods=pre, **kw)


def _signals(*triples):
    return [QualitySignal(r, p, q) for r, p, q in triples]


# ---------------------------------------------------------------------------
# conditional-distribution algebra


def test_route_mean_conditional_equal_weight_case():
    mean, var = route_mean_conditional(1, 2.0, 0.0, 1.0, 1.0)
    assert mean == pytest.approx(1.0)
    assert var == pytest.approx(0.5)


def test_route_mean_conditional_no_signals_tracks_grand_mean():
    mean, var = route_mean_conditional(0, 0.0, -1.3, 2.0, 0.7)
    assert mean == -1.3
    assert var == 0.7


@settings(max_examples=200, deadline=None)
@given(
    n=st.integers(min_value=1, max_value=500),
    qbar=st.floats(-50, 50),
    mu=st.floats(-50, 50),
    sigma2=st.floats(0.01, 1e4),
    xi2=st.floats(0.01, 1e4),
)
def test_route_mean_conditional_is_convex_combination(n, qbar, mu, sigma2, xi2):
    mean, var = route_mean_conditional(n, qbar, mu, sigma2, xi2)
    weight = n * xi2 / (n * xi2 + sigma2)
    assert mean == pytest.approx(weight * qbar + (1 - weight) * mu, abs=1e-9)
    lo, hi = min(qbar, mu), max(qbar, mu)
    if hi - lo > 1e-9:
        assert lo < mean < hi
    assert 0 < var < min(xi2, sigma2 / n) + 1e-12


def test_route_mean_conditional_limits_in_heterogeneity():
    mean_tight, _ = route_mean_conditional(3, 2.0, -1.0, 1.0, 1e-8)
    assert mean_tight == pytest.approx(-1.0, abs=1e-6)
    mean_loose, _ = route_mean_conditional(3, 2.0, -1.0, 1.0, 1e8)
    assert mean_loose == pytest.approx(2.0, abs=1e-6)


def test_sigma2_outlier_strictly_increases_plug_in_variance():
    nj = np.array([4.0])
    qbar = np.array([0.5])
    ssj = np.array([3.0])
    mu_j = np.array([0.4])
    base = sigma2_conditional_mean(1.05, 10.0, nj, qbar, ssj, mu_j)
    outlier = math.sqrt(2.0 * base) * 1.1 + mu_j[0]
    n2 = np.array([5.0])
    q2 = np.array([(4 * 0.5 + outlier) / 5.0])
    ss2 = np.array([3.0 + 4.0 / 5.0 * (qbar[0] - outlier) ** 2])
    bumped = sigma2_conditional_mean(1.05, 10.0, n2, q2, ss2, mu_j)
    assert bumped > base


# ---------------------------------------------------------------------------
# hierarchical updates


TINY_SIGNALS = _signals(("r1", 1, 1.0), ("r1", 2, 3.0), ("r2", 2, -2.0))


def test_gibbs_update_simple_matches_grid_quadrature_oracle():
    prior = flat_priors()
    spec = _spec(total=60000, burnin=10000)  # 50k kept draws
    state = initial_state(("r1", "r2"), prior, spec)
    new = gibbs_update_simple(state, prior, TINY_SIGNALS, spec,
                              SeededStream(4).child("chain"))
    e_mu_j, e_mu = hier_posterior_grid(
        np.array([2.0, 1.0]), np.array([2.0, -2.0]), np.array([2.0, 0.0]),
        1.05, 10.0, 0.0, 900.0, 1.05, 3.0)
    assert np.all(np.abs(new.mu_j - e_mu_j) < 0.05)
    assert abs(new.mu - e_mu) < 0.05


def test_gibbs_update_simple_positivity_over_long_chain():
    prior = flat_priors()
    spec = _spec(total=10000, burnin=0)
    state = initial_state(("r1", "r2"), prior, spec)
    new = gibbs_update_simple(state, prior, TINY_SIGNALS, spec,
                              SeededStream(8).child("chain"))
    assert np.all(new.draws.sigma2 > 0)
    assert np.all(new.draws.xi2 > 0)


def test_gibbs_update_simple_rejects_empty_routes():
    prior = flat_priors()
    spec = _spec()
    state = initial_state(("r1",), prior, spec)
    state.route_ids = ()
    with pytest.raises(ValueError):
        gibbs_update_simple(state, prior, [], spec, SeededStream(1))


def test_gibbs_update_permutation_invariance():
    prior = flat_priors()
    spec = _spec()
    state = initial_state(("r1", "r2"), prior, spec)
    fwd = gibbs_update_simple(state, prior, TINY_SIGNALS, spec,
                              SeededStream(5).child("x"))
    rev = gibbs_update_simple(state, prior, TINY_SIGNALS[::-1], spec,
                              SeededStream(5).child("x"))
    # sufficient statistics make signal order irrelevant up to float reordering
    assert np.allclose(fwd.mu_j, rev.mu_j, rtol=0, atol=1e-10)
    assert fwd.sigma2 == pytest.approx(rev.sigma2, abs=1e-10)


def test_unobserved_route_tracks_grand_mean():
    prior = flat_priors()
    spec = _spec(total=4000, burnin=2000)
    state = initial_state(("r1", "r2", "r3"), prior, spec)
    signals = _signals(("r1", 1, 6.0), ("r1", 2, 5.0), ("r2", 2, 4.0),
                       ("r1", 3, 6.5), ("r2", 3, 5.5))
    new = gibbs_update_simple(state, prior, signals, spec, SeededStream(9).child("c"))
    # r3 never shipped: its mean must sit near the grand mean, not near 0
    assert abs(new.mu_j[2] - new.mu) < 0.5
    assert new.mu > 2.0


def test_var_convention_flag_switches_reported_uncertainty():
    prior = flat_priors()
    draws_spec = _spec()
    closed_spec = _spec(var_convention="closed-form")
    state = initial_state(("r1", "r2"), prior, draws_spec)
    by_draws = gibbs_update_simple(state, prior, TINY_SIGNALS, draws_spec,
                                   SeededStream(12).child("v"))
    by_form = gibbs_update_simple(state, prior, TINY_SIGNALS, closed_spec,
                                  SeededStream(12).child("v"))
    assert np.allclose(by_form.var_mu_j, by_form.xi2 + prior.sigma_mu2)
    assert not np.allclose(by_draws.var_mu_j, by_form.var_mu_j)


# ---------------------------------------------------------------------------
# regression variant


def test_regression_with_no_signals_keeps_slope_prior():
    prior = flat_priors()
    spec = _spec(rule="hier-regression", total=4000, burnin=2000)
    state = initial_state(("r1", "r2"), prior, spec)
    signals = [QualitySignal("r1", 1, 0.5, distance_km=1000.0),
               QualitySignal("r2", 1, 0.4, distance_km=4000.0)]
    new = gibbs_update_regression(state, prior, signals[:0] + signals, spec,
                                  SeededStream(3).child("g"))
    assert new.gamma is not None
    # vague slope prior and two near-identical signals: slope stays near 0
    assert abs(new.gamma) < 0.1


def test_regression_equal_distances_matches_simple_model():
    prior = flat_priors()
    stream = SeededStream(21)
    signals = [QualitySignal(r, p, q, distance_km=2000.0)
               for r, p, q in (("r1", 1, 1.0), ("r1", 2, 3.0), ("r2", 2, -2.0),
                               ("r2", 3, -1.0), ("r1", 3, 2.0))]
    spec_reg = _spec(rule="hier-regression", total=30000, burnin=15000,
                     require_identified_slope=False)
    spec_simple = _spec(total=30000, burnin=15000)
    # tight slope prior pins gamma ~ 0 so the models coincide up to the
    # grand-mean shift gamma * d
    prior_reg = PriorHyper(sigma_gamma2=1e-8)
    state_r = initial_state(("r1", "r2"), prior_reg, spec_reg)
    state_s = initial_state(("r1", "r2"), prior, spec_simple)
    new_r = gibbs_update_regression(state_r, prior_reg, signals, spec_reg,
                                    stream.child("reg"))
    new_s = gibbs_update_simple(state_s, prior, signals, spec_simple,
                                stream.child("simple"))
    assert np.all(np.abs(new_r.mu_j - new_s.mu_j) < 0.05)


def test_regression_identification_guard():
    prior = flat_priors()
    spec = _spec(rule="hier-regression")
    state = initial_state(("r1", "r2"), prior, spec)
    signals = [QualitySignal("r1", 1, 1.0, distance_km=2000.0),
               QualitySignal("r2", 1, 2.0, distance_km=2000.0)]
    with pytest.raises(InputError, match="slope unidentified"):
        gibbs_update_regression(state, prior, signals, spec, SeededStream(1))


def test_regression_recovers_distance_slope():
    true_slope = 0.5 / 1000.0  # per km
    distances = [1000.0, 3000.0, 6000.0, 9000.0]
    gen = SeededStream(17).child("gen").generator()
    signals = []
    for p in range(50):
        for j, d in enumerate(distances):
            q = 1.0 + true_slope * d + 0.8 * gen.standard_normal()
            signals.append(QualitySignal(f"r{j}", p + 1, q, distance_km=d))
    prior = flat_priors()
    spec = _spec(rule="hier-regression", total=20000, burnin=10000)
    state = initial_state(tuple(f"r{j}" for j in range(4)), prior, spec)
    new = gibbs_update_regression(state, prior, signals, spec,
                                  SeededStream(17).child("chain"))
    assert abs(new.gamma - true_slope) < 0.15 / 1000.0 * 1000.0  # +-0.15 per 1000 km
    assert abs(new.gamma * 1000.0 - 0.5) < 0.15


# ---------------------------------------------------------------------------
# independent learning


def test_independent_leaves_unobserved_route_untouched():
    prior = flat_priors()
    spec = _spec(rule="independent")
    state = initial_state(("a", "b"), prior, spec)
    before_mu, before_var = state.mu_j[1], state.var_mu_j[1]
    signals = _signals(("a", 1, 3.0), ("a", 2, 4.0))
    new = update_independent(state, prior, signals, spec, SeededStream(2).child("i"))
    assert new.mu_j[1] == before_mu
    assert new.var_mu_j[1] == before_var
    assert new.mu_j[0] != before_mu


def test_independent_posterior_consistency():
    gen = SeededStream(31).child("data").generator()
    signals = [QualitySignal("a", p + 1, float(3.0 + 2.0 * gen.standard_normal()))
               for p in range(500)]
    prior = flat_priors()
    spec = _spec(rule="independent", total=4000, burnin=2000)
    state = initial_state(("a", "b"), prior, spec)
    new = update_independent(state, prior, signals, spec, SeededStream(31).child("c"))
    assert abs(new.mu_j[0] - 3.0) < 0.3
    assert abs(new.sigma2 - 4.0) < 0.8


# ---------------------------------------------------------------------------
# pooling


def test_pooling_reports_one_shared_mean():
    prior = flat_priors()
    spec = _spec(rule="pooling")
    state = initial_state(("a", "b", "c"), prior, spec)
    signals = _signals(("a", 1, 2.0), ("b", 2, -1.0), ("c", 3, 0.5))
    new = update_pooling(state, prior, signals, spec, SeededStream(6).child("p"))
    assert new.mu_j[0] == new.mu_j[1] == new.mu_j[2]


def test_pooling_symmetric_signals_centre_on_zero():
    prior = flat_priors()
    spec = _spec(rule="pooling", total=4000, burnin=2000)
    state = initial_state(("a", "b"), prior, spec)
    signals = _signals(("a", 1, -1.0), ("b", 2, 1.0))
    new = update_pooling(state, prior, signals, spec, SeededStream(7).child("p"))
    assert abs(new.mu) < 0.2


def test_hierarchical_collapses_to_pooling_when_heterogeneity_vanishes():
    gen = SeededStream(41).child("d").generator()
    signals = [QualitySignal("a" if p % 2 else "b", p + 1,
                             float(1.5 + gen.standard_normal()))
               for p in range(60)]
    tight = PriorHyper(alpha_xi=2000.0, delta_xi=0.2)  # xi2 pinned at 1e-4
    spec_h = _spec(total=50000, burnin=25000)
    spec_p = _spec(rule="pooling", total=20000, burnin=10000)
    state_h = initial_state(("a", "b"), tight, spec_h)
    state_p = initial_state(("a", "b"), PriorHyper(), spec_p)
    hier = gibbs_update_simple(state_h, tight, signals, spec_h,
                               SeededStream(41).child("h"))
    pool = update_pooling(state_p, PriorHyper(), signals, spec_p,
                          SeededStream(41).child("p"))
    assert np.all(np.abs(hier.mu_j - pool.mu) < 0.02)


# ---------------------------------------------------------------------------
# short memory


def test_short_memory_rules():
    spec = _spec(rule="short-memory")
    state = initial_state(("a", "b"), flat_priors(), spec)
    assert state.mu_j.tolist() == [0.0, 0.0]  # never shipped
    state = update_short_memory(state, _signals(("a", 1, 4.0)))
    assert state.mu_j[0] == 4.0
    state = update_short_memory(state, _signals(("a", 2, -2.0)))
    assert state.mu_j[0] == -2.0
    unchanged = update_short_memory(state, [])
    assert unchanged.mu_j.tolist() == state.mu_j.tolist()


# ---------------------------------------------------------------------------
# pre-estimation


def test_pre_estimate_moment_match_round_trip():
    # sampling a known inverse gamma and refitting recovers its parameters
    from shiplearn.learning import _ig_moment_match
    draws = 50.0 / SeededStream(3).child("g").generator().standard_gamma(6.0, 100_000)
    alpha, delta = _ig_moment_match(draws)
    assert abs(alpha - 6.0) < 0.3
    assert abs(delta - 50.0) < 4.0


def test_pre_estimate_without_signals_keeps_the_prior_exactly():
    spec = _spec(pre=24)
    prior = pre_estimate([], ("a", "b"), spec, SeededStream(13).child("pre"))
    assert prior == flat_priors()


def test_pre_estimate_with_one_signal_tightens_the_location_prior():
    # one delivery near 0 pulls the vague grand mean toward it and
    # collapses its variance to the (sigma^2 + xi^2)-driven scale
    spec = _spec(pre=24, total=30000, burnin=5000)
    prior = pre_estimate(_signals(("a", 3, 0.5)), ("a", "b"), spec,
                         SeededStream(13).child("pre"))
    assert abs(prior.mu0) < 10.0
    assert 1.0 < prior.sigma_mu2 < 30.0 ** 2
    assert prior.alpha_sigma > 2.0 and prior.delta_sigma > 0.0
    assert prior.alpha_xi > 2.0 and prior.delta_xi > 0.0


def test_pre_estimate_population_scales_are_plausible():
    # hierarchical-world signals sized like real transport delays
    stream = SeededStream(55)
    fitted = []
    for i in range(12):
        gen = stream.child("cust", i).generator()
        routes = tuple(f"r{j}" for j in range(3))
        route_mu = -0.8 + 1.5 * gen.standard_normal(3)
        signals = []
        for p in range(1, 25):
            if gen.random() < 0.55:
                j = int(gen.integers(3))
                q = route_mu[j] + 3.0 * gen.standard_normal()
                signals.append(QualitySignal(routes[j], p, float(q)))
        spec = _spec(pre=24, total=2000, burnin=1000)
        fitted.append(pre_estimate(signals, routes, spec, stream.child("pre", i)))
    alpha_sigma = np.mean([p.alpha_sigma for p in fitted])
    delta_sigma = np.mean([p.delta_sigma for p in fitted])
    mu0 = np.mean([p.mu0 for p in fitted])
    sigma_mu = np.mean([math.sqrt(p.sigma_mu2) for p in fitted])
    alpha_xi = np.mean([p.alpha_xi for p in fitted])
    delta_xi = np.mean([p.delta_xi for p in fitted])
    # order-of-magnitude check against typical fitted-prior scales
    assert 2.0 < alpha_sigma < 25.0
    assert 5.0 < delta_sigma < 250.0
    assert -4.0 < mu0 < 2.0
    assert 0.2 < sigma_mu < 6.0
    assert 1.5 < alpha_xi < 10.0
    assert 0.5 < delta_xi < 50.0


def test_pre_estimate_degenerate_chain_raises():
    spec = _spec(pre=24, total=2, burnin=1)
    signals = _signals(("a", 1, 1.0))
    with pytest.raises(NumericalError, match="longer chain"):
        pre_estimate(signals, ("a", "b"), spec, SeededStream(1).child("pre"))


# ---------------------------------------------------------------------------
# learning pass over a panel


def _panel_from_rows(rows, n_periods):
    frame = pd.DataFrame(rows)
    for col in ("price", "weight_kg"):
        frame[col] = 0.0
    frame["second_half_week"] = (frame["period"] - 1) % 2
    frame["month"] = 1
    return ChoicePanel(frame, n_periods=n_periods)


def _grid_rows(cid, routes, periods, deliveries):
    rows = []
    for r in routes:
        for t in range(1, periods + 1):
            q = deliveries.get((r, t))
            rows.append({"customer_id": cid, "route_id": r, "period": t,
                         "y": int(q is not None), "y_star": int(q is not None),
                         "delay_h": q if q is not None else np.nan})
    return rows


def test_learning_pass_copies_state_when_nothing_is_delivered():
    panel = _panel_from_rows(
        _grid_rows("c1", ["a", "b"], 8, {("a", 1): 2.0, ("b", 2): -1.0}), 8)
    spec = _spec(pre=0)
    fit = run_learning_pass(panel, spec, SeededStream(10))
    traj = fit.trajectory
    late = traj[traj["period"] >= 3].pivot_table(index="period", columns="route_id",
                                                 values="mu_j_E")
    # no deliveries after period 2: snapshot identical from period 3 onward
    assert late.nunique().max() == 1


def test_learning_pass_severe_delay_moves_all_summaries_up():
    deliveries = {("a", t): 0.3 * ((-1) ** t) for t in range(1, 7)}
    deliveries[("b", 2)] = 0.5
    deliveries[("b", 4)] = -0.5
    base_panel = _panel_from_rows(_grid_rows("c1", ["a", "b"], 10, deliveries), 10)
    shocked = dict(deliveries)
    shocked[("b", 7)] = 9.0  # severe delay
    shock_panel = _panel_from_rows(_grid_rows("c1", ["a", "b"], 10, shocked), 10)
    spec = _spec(pre=0, total=4000, burnin=2000)
    base = run_learning_pass(base_panel, spec, SeededStream(3)).trajectory
    shock = run_learning_pass(shock_panel, spec, SeededStream(3)).trajectory

    def at(traj, period, route, col):
        row = traj[(traj.period == period) & (traj.route_id == route)]
        return float(row[col].iloc[0])

    assert at(shock, 8, "b", "mu_j_E") > at(base, 8, "b", "mu_j_E") + 1.0
    assert at(shock, 8, "b", "mu_E") > at(base, 8, "b", "mu_E")
    assert at(shock, 8, "b", "sigma2_E") > at(base, 8, "b", "sigma2_E") * 1.5


def test_learning_pass_variance_matches_plug_in_identity():
    # Rao-Blackwell check: averaging the conditional-mean formula for the
    # experience variance over the chain reproduces the sampler's estimate
    deliveries = {("a", t): float(np.sin(t)) for t in range(1, 13)}
    deliveries.update({("b", t): float(np.cos(t)) for t in range(2, 13, 3)})
    panel = _panel_from_rows(_grid_rows("c1", ["a", "b"], 13, deliveries), 13)
    spec = _spec(pre=0, total=20000, burnin=10000)
    fit = run_learning_pass(panel, spec, SeededStream(77))
    state = fit.final_states["c1"]
    draws = state.draws
    signals = panel.frame[panel.frame.y_star == 1]
    nj = np.array([(signals.route_id == r).sum() for r in state.route_ids], float)
    qbar = np.array([signals[signals.route_id == r].delay_h.mean()
                     for r in state.route_ids])
    ssj = np.array([((signals[signals.route_id == r].delay_h - qbar[j]) ** 2).sum()
                    for j, r in enumerate(state.route_ids)])
    plug_in = np.array([
        sigma2_conditional_mean(1.05, 10.0, nj, qbar, ssj, draws.mu_j[k])
        for k in range(draws.mu_j.shape[0])])
    n_eff = plug_in.size / 20.0  # conservative effective sample size
    mcse = 3.0 * max(plug_in.std(), draws.sigma2.std()) / math.sqrt(n_eff)
    assert abs(plug_in.mean() - state.sigma2) < mcse


# ---------------------------------------------------------------------------
# fit statistics


def _manual_fit(trajectory_rows, spec):
    traj = pd.DataFrame(trajectory_rows)
    return LearningFit(spec, traj, {}, {})


def test_quality_loglik_single_signal_at_predictive_mode():
    spec = _spec(pre=0)
    rows = [{"customer_id": "c1", "route_id": "a", "period": 1,
             "mu_j_E": 1.7, "var_mu_j": 0.6, "mu_E": 0.0,
             "sigma2_E": 0.4, "xi2_E": 1.0, "gamma_E": np.nan}]
    panel = _panel_from_rows(
        _grid_rows("c1", ["a"], 1, {("a", 1): 1.7}), 1)
    ll = quality_loglik(panel, _manual_fit(rows, spec))
    assert ll == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
    assert ll == pytest.approx(normal_logpdf(1.7, 1.7, 1.0), abs=1e-12)


def test_quality_loglik_rejects_nonpositive_variance():
    spec = _spec(pre=0)
    rows = [{"customer_id": "c1", "route_id": "a", "period": 1,
             "mu_j_E": 0.0, "var_mu_j": -0.5, "mu_E": 0.0,
             "sigma2_E": 0.2, "xi2_E": 1.0, "gamma_E": np.nan}]
    panel = _panel_from_rows(_grid_rows("c1", ["a"], 1, {("a", 1): 0.0}), 1)
    with pytest.raises(NumericalError):
        quality_loglik(panel, _manual_fit(rows, spec))


def test_quality_dic_point_mass_posterior_has_zero_complexity():
    spec = _spec(pre=0)
    panel = _panel_from_rows(
        _grid_rows("c1", ["a"], 2, {("a", 1): 1.0, ("a", 2): 2.0}), 2)
    state = BeliefState(
        route_ids=("a",), mu_j=np.array([1.4]), var_mu_j=np.array([0.0]),
        mu=1.4, sigma2=2.0, xi2=1.0,
        draws=ChainDraws(("a",), mu_j=np.full((100, 1), 1.4),
                         sigma2=np.full(100, 2.0)))
    fit = LearningFit(spec, pd.DataFrame(), {"c1": state}, {})
    dic = quality_dic(panel, fit)
    dev_hat = -2.0 * (normal_logpdf(1.0, 1.4, 2.0) + normal_logpdf(2.0, 1.4, 2.0))
    assert dic == pytest.approx(dev_hat, abs=1e-9)  # p_D = 0


def test_short_memory_has_no_likelihood_or_dic():
    panel = _panel_from_rows(_grid_rows("c1", ["a"], 2, {("a", 1): 1.0}), 2)
    fit = _manual_fit([], _spec(rule="short-memory"))
    with pytest.raises(InputError):
        quality_loglik(panel, fit)
    with pytest.raises(InputError):
        quality_dic(panel, fit)


def test_learning_pass_is_deterministic_and_thread_stable():
    deliveries = {("a", t): float(np.sin(t)) for t in range(1, 9)}
    deliveries[("b", 3)] = 1.0
    rows = _grid_rows("c1", ["a", "b"], 9, deliveries)
    rows += _grid_rows("c2", ["a", "c"], 9, {("a", 2): 0.5, ("c", 5): -2.0})
    panel = _panel_from_rows(rows, 9)
    spec = _spec(pre=0)
    one = run_learning_pass(panel, spec, SeededStream(7), threads=1).trajectory
    two = run_learning_pass(panel, spec, SeededStream(7), threads=4).trajectory
    pd.testing.assert_frame_equal(one, two)
