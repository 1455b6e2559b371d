import json
import math
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from shiplearn.choice import UtilitySpec
from shiplearn.errors import InputError
from shiplearn.learning import LearningModelSpec, PriorHyper, run_learning_pass
from shiplearn.randcore import SeededStream
from shiplearn.scenario import (
    RegimeSegment,
    ScenarioSpec,
    SyntheticConfig,
    generate_synthetic_panel,
    load_scenario,
    revenue_loss,
    run_policy_scenario,
)

BUNDLED = Path(str(resources.files("shiplearn") / "scenarios"))


def _small_spec(rule="hier-simple", shift=None, cohort=24, horizon=14,
                omega=None):
    regimes = {
        "A": (RegimeSegment(1, 0.0, 5.0),) if shift is None else
             (RegimeSegment(1, 0.0, 5.0), shift),
        "B": (RegimeSegment(1, 0.0, 5.0),),
    }
    return ScenarioSpec(
        regimes=regimes, arrival={"A": 0.5, "B": 0.5}, horizon=horizon,
        cohort=cohort, price=2288.0, learning_rule=rule,
        utility=UtilitySpec.from_label("a+era+bua", mu_scale=1.0),
        coefficients={"intercept": -0.131, "mu_pos": -0.0871,
                      "mu_neg": -0.0498, "sigma2": -0.0375, "var_mu": -0.0676},
        omega=omega if omega is not None else {"intercept": 0.0589},
        prior=PriorHyper(alpha_sigma=8.0, delta_sigma=175.0, mu0=-0.77,
                         sigma_mu2=1.3225, alpha_xi=2.37, delta_xi=13.0),
        gibbs_total=400, gibbs_burnin=200)


# ---------------------------------------------------------------------------
# synthetic panel generation


def test_generator_shapes_and_route_counts():
    config = SyntheticConfig(n_customers=12, n_periods=20)
    panel, truth = generate_synthetic_panel(config, SeededStream(3))
    frame = panel.frame
    assert frame["period"].max() == 20
    per_customer = frame.groupby("customer_id")["route_id"].nunique()
    assert per_customer.between(2, 6).all()
    assert set(truth["arrival"]) == set(frame["customer_id"].unique())
    for per_route in truth["arrival"].values():
        assert sum(per_route.values()) == pytest.approx(1.0)
    panel.validate()  # at most one purchase per (customer, period)


def test_generator_zero_heterogeneity_gives_identical_coefficients():
    config = SyntheticConfig(n_customers=6, n_periods=6,
                             coef_var=(0.0, 0.0, 0.0))
    _, truth = generate_synthetic_panel(config, SeededStream(5))
    coefs = [tuple(v.values()) for v in truth["customer_coefs"].values()]
    assert all(c == pytest.approx(coefs[0]) for c in coefs)


def test_generator_delay_moments():
    config = SyntheticConfig(n_customers=320, n_periods=90,
                             gibbs_total=300, gibbs_burnin=150)
    panel, _ = generate_synthetic_panel(config, SeededStream(11))
    delays = panel.frame.loc[panel.frame.y_star == 1, "delay_h"]
    assert len(delays) > 10_000
    assert abs(delays.mean()) < 0.02
    assert abs(delays.std() - 1.0) < 0.02


def test_generator_beliefs_are_refittable():
    config = SyntheticConfig(n_customers=4, n_periods=12)
    panel, _ = generate_synthetic_panel(config, SeededStream(7))
    spec = LearningModelSpec(rule="hier-simple", pre_estimation_periods=0)
    fit = run_learning_pass(panel, spec, SeededStream(8))
    merged = panel.frame.merge(fit.trajectory,
                               on=["customer_id", "route_id", "period"])
    assert len(merged) == len(panel.frame)
    assert np.isfinite(merged["mu_j_E"]).all()


def test_generator_validates_config():
    with pytest.raises(InputError):
        SyntheticConfig(coef_mean=(1.0,))
    with pytest.raises(InputError):
        SyntheticConfig(routes_min=1)
    with pytest.raises(InputError):
        SyntheticConfig(utility_mode="nope")


# ---------------------------------------------------------------------------
# scenario specs and loading


def test_scenario_spec_validation():
    good = _small_spec()
    assert good.routes() == ["A", "B"]
    with pytest.raises(InputError, match="start at period 1"):
        replace(good, regimes={"A": (RegimeSegment(2, 0.0, 1.0),),
                               "B": (RegimeSegment(1, 0.0, 1.0),)})
    with pytest.raises(InputError, match="sum to 1"):
        replace(good, arrival={"A": 0.6, "B": 0.6})
    with pytest.raises(InputError, match="same routes"):
        replace(good, arrival={"A": 0.5, "C": 0.5})
    with pytest.raises(InputError):
        replace(good, learning_rule="short-memory")


def test_regime_lookup():
    spec = _small_spec(shift=RegimeSegment(10, 5.0, 5.0))
    assert spec.regime_at("A", 9).mean == 0.0
    assert spec.regime_at("A", 10).mean == 5.0
    assert spec.regime_at("B", 12).mean == 0.0


def test_bundled_scenarios_load():
    for name in ("s6_mean_shift.json", "appD_variance.json"):
        baseline, scenario = load_scenario(BUNDLED / name)
        assert baseline.routes() == ["A", "B"]
        assert baseline.cohort == 200
        assert scenario.price == 2288.0
        assert baseline.regimes != scenario.regimes
    with pytest.raises(InputError):
        load_scenario(BUNDLED / "missing.json")


# ---------------------------------------------------------------------------
# policy runs (small cohorts: these check structure, not dollar targets)


def test_baseline_self_comparison_is_identically_zero():
    base = _small_spec()
    result = run_policy_scenario(base, base, SeededStream(5))
    assert (result.frame["revenue_delta"] == 0.0).all()
    assert result.changed_routes == ()


def test_mismatched_configs_are_rejected():
    base = _small_spec()
    other = replace(base, cohort=base.cohort + 1)
    with pytest.raises(InputError, match="cohort"):
        run_policy_scenario(other, base, SeededStream(5))


def test_pooling_routes_share_one_probability_path():
    base = _small_spec(rule="pooling")
    scen = replace(base, regimes={
        "A": (RegimeSegment(1, 0.0, 5.0), RegimeSegment(8, 5.0, 5.0)),
        "B": (RegimeSegment(1, 0.0, 5.0),)})
    result = run_policy_scenario(scen, base, SeededStream(6))
    pivot_b = result.frame.pivot(index="period", columns="route",
                                 values="avg_prob_baseline")
    pivot_s = result.frame.pivot(index="period", columns="route",
                                 values="avg_prob_scenario")
    assert np.array_equal(pivot_b["A"], pivot_b["B"])
    assert np.array_equal(pivot_s["A"], pivot_s["B"])
    direct, indirect = revenue_loss(result, result.horizon)
    assert direct == pytest.approx(indirect)


def test_independent_rule_leaves_untouched_route_bit_identical():
    base = _small_spec(rule="independent")
    scen = replace(base, regimes={
        "A": (RegimeSegment(1, 0.0, 5.0), RegimeSegment(8, 5.0, 5.0)),
        "B": (RegimeSegment(1, 0.0, 5.0),)})
    result = run_policy_scenario(scen, base, SeededStream(7))
    b_rows = result.frame[result.frame["route"] == "B"]
    assert np.array_equal(b_rows["avg_prob_baseline"].to_numpy(),
                          b_rows["avg_prob_scenario"].to_numpy())
    direct, indirect = revenue_loss(result, result.horizon)
    assert indirect == 0.0
    assert direct > 0.0


def test_pre_change_periods_are_bit_identical_under_every_rule():
    for rule in ("hier-simple", "independent", "pooling"):
        base = _small_spec(rule=rule)
        scen = replace(base, regimes={
            "A": (RegimeSegment(1, 0.0, 5.0), RegimeSegment(8, 5.0, 5.0)),
            "B": (RegimeSegment(1, 0.0, 5.0),)})
        result = run_policy_scenario(scen, base, SeededStream(9))
        early = result.frame[result.frame["period"] < 8]
        assert np.array_equal(early["avg_prob_baseline"].to_numpy(),
                              early["avg_prob_scenario"].to_numpy()), rule


def test_spillover_shift_drags_down_the_untouched_route():
    base = _small_spec(cohort=60, horizon=16)
    scen = replace(base, regimes={
        "A": (RegimeSegment(1, 0.0, 5.0), RegimeSegment(6, 6.0, 5.0)),
        "B": (RegimeSegment(1, 0.0, 5.0),)})
    result = run_policy_scenario(scen, base, SeededStream(10))
    direct, indirect = revenue_loss(result, 16)
    assert direct > 0.0
    assert indirect > 0.0
    assert direct > indirect


def test_symmetric_baseline_routes_agree_within_monte_carlo_band():
    base = _small_spec(cohort=60, horizon=12)
    result = run_policy_scenario(base, base, SeededStream(12))
    frame = result.frame
    gap = (frame[frame.route == "A"]["avg_prob_baseline"].to_numpy()
           - frame[frame.route == "B"]["avg_prob_baseline"].to_numpy())
    band = 3.0 * 0.5 / math.sqrt(60)
    assert np.all(np.abs(gap) < band)


def test_revenue_loss_bounds_and_zero_delta():
    base = _small_spec()
    result = run_policy_scenario(base, base, SeededStream(5))
    assert revenue_loss(result, 1) == (0.0, 0.0)
    with pytest.raises(InputError):
        revenue_loss(result, 0)
    with pytest.raises(InputError):
        revenue_loss(result, result.horizon + 1)
