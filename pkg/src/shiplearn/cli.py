"""Command-line orchestration for the full pipeline.

Commands: ``fit-learning``, ``fit-choice``, ``compare``, ``simulate``,
``generate``, ``recover``. Every run writes a ``manifest.json`` capturing
the configuration, seed, package version and output hashes, so reruns
with the same seed are byte-reproducible. Exit codes: 0 success, 2 input
error, 3 internal numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd

import shiplearn
from shiplearn import choice, evaluate, learning, scenario
from shiplearn.errors import InputError, NumericalError
from shiplearn.panel import PANEL_COLUMNS, ChoicePanel
from shiplearn.randcore import SeededStream

LEARNING_RULES_ALL = ("hier-simple", "hier-regression", "independent",
                      "pooling", "pooling-regression", "short-memory")
_DIC_RULES = ("hier-simple", "hier-regression", "independent",
              "pooling", "pooling-regression")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                    outputs: list[Path]) -> Path:
    # out_dir is where the manifest itself lives; recording it would make
    # otherwise-identical runs differ byte-wise
    config = {k: v for k, v in sorted(vars(args).items())
              if k not in ("func", "command", "out_dir")}
    manifest = {
        "command": command,
        "config": {k: str(v) if isinstance(v, Path) else v for k, v in config.items()},
        "version": shiplearn.__version__,
        "outputs": {p.name: _sha256(p) for p in sorted(outputs)},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def _default_controls(panel: ChoicePanel, est_start: int) -> list[str]:
    """Control columns with actual variation over the estimation window."""
    frame = panel.frame[panel.frame["period"] >= est_start]
    controls: list[str] = []
    for name in ("price", "weight_kg", "second_half_week", "month"):
        values = frame[name].to_numpy(float)
        if np.isfinite(values).all() and np.ptp(values) > 0:
            controls.append(name)
    skip = set(PANEL_COLUMNS) | {"distance_km", "pieces"}
    for name in frame.columns:
        if name in skip:
            continue
        values = frame[name].to_numpy(float)
        if np.isfinite(values).all() and np.ptp(values) > 0:
            controls.append(name)
    return controls


def _learning_spec(args: argparse.Namespace, rule: str) -> learning.LearningModelSpec:
    return learning.LearningModelSpec(
        rule=rule, gibbs_total=args.gibbs_total, gibbs_burnin=args.gibbs_burnin,
        pre_estimation_periods=args.pre_periods,
        var_convention=args.var_convention)


def cmd_fit_learning(args: argparse.Namespace) -> list[Path]:
    out_dir = Path(args.out_dir)
    panel = ChoicePanel.from_csv(args.panel)
    panel.validate()
    if args.rule == "all":
        rules = ["hier-simple", "independent", "pooling"]
        if "distance_km" in panel.frame.columns:
            rules += ["hier-regression", "pooling-regression"]
        rules.append("short-memory")
    else:
        rules = [args.rule]
    stream = SeededStream(args.seed)
    outputs: list[Path] = []
    report = []
    for rule in rules:
        spec = _learning_spec(args, rule)
        fit = learning.run_learning_pass(panel, spec, stream.child("fit", rule),
                                         threads=args.threads)
        traj_path = out_dir / f"trajectory_{rule}.csv"
        fit.trajectory.to_csv(traj_path, index=False)
        outputs.append(traj_path)
        entry: dict = {"rule": rule}
        if rule in _DIC_RULES:
            ll = learning.quality_loglik(panel, fit)
            entry["neg_loglik"] = -ll
            entry["dic"] = learning.quality_dic(panel, fit)
        report.append(entry)
    report_path = out_dir / "learning_fit.json"
    report_path.write_text(json.dumps({"models": report}, indent=2, sort_keys=True)
                           + "\n", encoding="utf-8")
    outputs.append(report_path)
    return outputs


def cmd_fit_choice(args: argparse.Namespace) -> list[Path]:
    out_dir = Path(args.out_dir)
    panel = ChoicePanel.from_csv(args.panel)
    traj_path = Path(args.trajectory)
    if not traj_path.exists():
        raise InputError(f"trajectory file not found: {traj_path}")
    trajectory = pd.read_csv(traj_path)
    est_start = int(trajectory["period"].min())
    spec = choice.UtilitySpec.from_label(
        args.spec, mu_scale=args.mu_scale, var_scale=args.var_scale)
    controls = (args.controls.split(",") if args.controls
                else _default_controls(panel, est_start))
    controls = [c for c in controls if c]
    random_names = [r for r in args.random.split(",") if r]
    if args.no_heterogeneity:
        random_names = []
    ds = choice.build_dataset(panel, trajectory, spec, controls=controls,
                              random_names=random_names, est_start=est_start)
    config = choice.LikelihoodConfig(
        heterogeneity_draws=args.draws, multi_start=args.starts,
        max_iterations=args.max_iterations)
    fitted = choice.estimate_sml(ds, config, stream=SeededStream(args.seed))
    out_path = out_dir / "choice_fit.json"
    fitted.to_json(out_path)
    return [out_path]


def cmd_compare(args: argparse.Namespace) -> list[Path]:
    out_dir = Path(args.out_dir)
    outputs: list[Path] = []
    if args.choice_fits:
        reports = []
        for path in args.choice_fits:
            path = Path(path)
            if not path.exists():
                raise InputError(f"fit file not found: {path}")
            obj = json.loads(path.read_text(encoding="utf-8"))
            reports.append(evaluate.FitReport(
                label=f"{path.stem}:{obj['spec']}", loglik=float(obj["loglik"]),
                n_params=int(obj["n_params"])))
        csv_path = out_dir / "choice_rank.csv"
        csv_path.write_text(evaluate.rank_table_csv(reports), encoding="utf-8")
        md_path = out_dir / "choice_rank.md"
        md_path.write_text(evaluate.rank_table_markdown(reports), encoding="utf-8")
        outputs += [csv_path, md_path]
    if args.learning_fits:
        rows = []
        for path in args.learning_fits:
            path = Path(path)
            if not path.exists():
                raise InputError(f"fit file not found: {path}")
            obj = json.loads(path.read_text(encoding="utf-8"))
            for entry in obj["models"]:
                if "neg_loglik" in entry:
                    rows.append({"source": path.stem, **entry})
        frame = pd.DataFrame(rows).sort_values("dic").reset_index(drop=True)
        csv_path = out_dir / "learning_rank.csv"
        frame.to_csv(csv_path, index=False)
        outputs.append(csv_path)
    if not outputs:
        raise InputError("nothing to compare: pass --choice-fits and/or --learning-fits")
    return outputs


def _resolve_scenario(name: str) -> Path:
    path = Path(name)
    if path.exists():
        return path
    stem = name.removesuffix(".json")
    bundle = resources.files("shiplearn") / "scenarios" / f"{stem}.json"
    if bundle.is_file():
        return Path(str(bundle))
    raise InputError(f"scenario not found: {name}")


def cmd_simulate(args: argparse.Namespace) -> list[Path]:
    out_dir = Path(args.out_dir)
    path = _resolve_scenario(args.scenario)
    baseline, scen = scenario.load_scenario(path, rule=args.rule)
    result = scenario.run_policy_scenario(scen, baseline, SeededStream(args.seed))
    at_period = args.at_period if args.at_period else result.horizon
    direct, indirect = scenario.revenue_loss(result, at_period)
    csv_path = out_dir / "scenario_result.csv"
    result.to_csv(csv_path)
    loss_path = out_dir / "loss_summary.json"
    loss_path.write_text(json.dumps({
        "scenario": path.name,
        "learning_rule": scen.learning_rule,
        "at_period": at_period,
        "price": result.price,
        "changed_routes": list(result.changed_routes),
        "direct_loss": direct,
        "indirect_loss": indirect,
    }, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return [csv_path, loss_path]


def _synthetic_config(args: argparse.Namespace) -> scenario.SyntheticConfig:
    return scenario.SyntheticConfig(
        n_customers=args.customers, n_periods=args.periods,
        quality_mode=args.quality_mode, utility_mode="symmetric")


def cmd_generate(args: argparse.Namespace) -> list[Path]:
    out_dir = Path(args.out_dir)
    config = _synthetic_config(args)
    panel, truth = scenario.generate_synthetic_panel(config, SeededStream(args.seed))
    panel_path = out_dir / "panel.csv"
    panel.to_csv(panel_path)
    truth_path = out_dir / "truth.json"
    truth_path.write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
    return [panel_path, truth_path]


def run_recovery(seed: int, customers: int, periods: int, draws: int,
                 starts: int, out_dir: Path,
                 threads: int = 1) -> tuple[dict, Path, Path]:
    """Generate a synthetic panel, re-fit learning and choice models, and
    report truth vs estimate vs standard error per parameter.

    Chains run longer than the default fitting schedule so the refitted
    belief predictors carry little chain noise into the choice stage.
    """
    config = scenario.SyntheticConfig(n_customers=customers, n_periods=periods,
                                      gibbs_total=3000, gibbs_burnin=1000)
    stream = SeededStream(seed)
    panel, truth = scenario.generate_synthetic_panel(config, stream.child("gen"))
    lspec = learning.LearningModelSpec(rule="hier-simple", pre_estimation_periods=0,
                                       gibbs_total=3000, gibbs_burnin=1000)
    fit = learning.run_learning_pass(panel, lspec, stream.child("learn"),
                                     threads=threads)
    spec = choice.UtilitySpec(asymmetric=False, era=False, bua=False,
                              mu_scale=1.0, var_scale=1.0)
    ds = choice.build_dataset(panel, fit.trajectory, spec, controls=("x2",),
                              random_names=("intercept", "mu"), est_start=1)
    # antithetic completion keeps every customer's draw block mean-balanced,
    # which measurably reduces the finite-draw downward bias on the
    # heterogeneity variances at 100 draws
    cfg = choice.LikelihoodConfig(heterogeneity_draws=draws, multi_start=starts,
                                  antithetic=True)
    fitted = choice.estimate_sml(ds, cfg, stream=stream.child("sml"))

    name_map = {"intercept": "intercept", "mu": "mu", "x2": "x2"}
    truth_mean = dict(zip(truth["coef_names"], truth["coef_mean"]))
    truth_var = dict(zip(truth["coef_names"], truth["coef_var"]))
    rows = []
    for name in ds.names:
        est = fitted.estimates[name]
        se = fitted.std_errors.get(name)
        tr = truth_mean.get(name_map.get(name, name))
        flagged = (se is not None and tr is not None
                   and abs(est - tr) > 3.0 * se)
        rows.append({"parameter": name, "truth": tr, "estimate": est,
                     "std_error": se, "flagged": bool(flagged)})
    for name, omega in fitted.omega.items():
        se = fitted.omega_se.get(name)
        tr = truth_var.get(name_map.get(name, name))
        flagged = se is not None and tr is not None and abs(omega - tr) > 3.0 * se
        rows.append({"parameter": f"omega({name})", "truth": tr, "estimate": omega,
                     "std_error": se, "flagged": bool(flagged)})
    report = {
        "parameters": rows,
        "loglik": fitted.loglik,
        "converged": fitted.converged,
        "n_draws": draws,
        "seed": seed,
    }
    report_path = out_dir / "recovery_report.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                           encoding="utf-8")
    # arrival-weight recovery pairs, ready for scatter plotting
    pairs = []
    for cid, per_route in sorted(truth["arrival"].items()):
        est_scores = fitted.mbar.get(cid, {})
        probs = choice.arrival_softmax({r: est_scores.get(r, 0.0) for r in per_route})
        for (route, true_m), est_m in zip(sorted(per_route.items()), probs):
            pairs.append({"customer_id": cid, "route_id": route,
                          "true_m": true_m, "estimated_m": float(est_m)})
    pairs_path = out_dir / "multinomial_recovery.csv"
    pd.DataFrame(pairs).to_csv(pairs_path, index=False)
    return report, report_path, pairs_path


def cmd_recover(args: argparse.Namespace) -> list[Path]:
    out_dir = Path(args.out_dir)
    _, report_path, pairs_path = run_recovery(
        args.seed, args.customers, args.periods, args.draws, args.starts,
        out_dir, threads=args.threads)
    return [report_path, pairs_path]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shiplearn",
        description="Spillover learning and shipping-choice estimation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out-dir", type=Path, default=Path("."))

    p = sub.add_parser("fit-learning", help="fit learning rules to a panel")
    common(p)
    p.add_argument("--panel", required=True)
    p.add_argument("--rule", default="hier-simple",
                   choices=("all",) + LEARNING_RULES_ALL)
    p.add_argument("--gibbs-total", type=int, default=1000)
    p.add_argument("--gibbs-burnin", type=int, default=500)
    p.add_argument("--pre-periods", type=int, default=24)
    p.add_argument("--var-convention", default="draws",
                   choices=("draws", "closed-form"))
    p.set_defaults(func=cmd_fit_learning)

    p = sub.add_parser("fit-choice", help="estimate the purchase model by SML")
    common(p)
    p.add_argument("--panel", required=True)
    p.add_argument("--trajectory", required=True)
    p.add_argument("--spec", default="a+era+bua")
    p.add_argument("--controls", default="")
    p.add_argument("--random", default="intercept,sigma2,var_mu")
    p.add_argument("--no-heterogeneity", action="store_true",
                   help="force all coefficients fixed (omega = 0)")
    p.add_argument("--draws", type=int, default=100)
    p.add_argument("--starts", type=int, default=3)
    p.add_argument("--max-iterations", type=int, default=1000)
    p.add_argument("--mu-scale", type=float, default=2.0)
    p.add_argument("--var-scale", type=float, default=10.0)
    p.set_defaults(func=cmd_fit_choice)

    p = sub.add_parser("compare", help="rank fitted models")
    common(p)
    p.add_argument("--choice-fits", nargs="*", default=[])
    p.add_argument("--learning-fits", nargs="*", default=[])
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("simulate", help="run a counterfactual quality scenario")
    common(p)
    p.add_argument("--scenario", required=True,
                   help="scenario JSON path or bundled name "
                        "(s6_mean_shift, appD_variance)")
    p.add_argument("--rule", default=None,
                   choices=(None, "hier-simple", "independent", "pooling"))
    p.add_argument("--at-period", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("generate", help="generate a synthetic panel")
    common(p)
    p.add_argument("--customers", type=int, default=100)
    p.add_argument("--periods", type=int, default=50)
    p.add_argument("--quality-mode", default="iid",
                   choices=("iid", "hierarchical"))
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("recover", help="full parameter-recovery experiment")
    common(p)
    p.add_argument("--customers", type=int, default=100)
    p.add_argument("--periods", type=int, default=50)
    p.add_argument("--draws", type=int, default=100)
    p.add_argument("--starts", type=int, default=3)
    p.set_defaults(func=cmd_recover)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        outputs = args.func(args)
        _write_manifest(out_dir, args.command, args, outputs)
        return 0
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
