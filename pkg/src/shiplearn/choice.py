"""Demand arrival + binary-logit purchase model with belief predictors.

A customer's shipping need arrives each period with probability one
(identification fixes the arrival intensity at 1) and lands on route j
with multinomial weight ``m_ij = softmax(mbar_ij)``, the first route the
customer ever purchased anchored at 0. Conditional on a need, purchase
follows a logit in price/controls plus a quality function of the
customer's current beliefs. Individual heterogeneity enters through
normally distributed random coefficients (diagonal covariance) and is
integrated out by simulated maximum likelihood over Halton draws.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
import scipy.optimize
from scipy.special import expit

from shiplearn.errors import InputError, NumericalError
from shiplearn.randcore import HaltonGrid, SeededStream, halton_sequence, normal_quantile
from scipy.special import ndtri

__all__ = [
    "UtilitySpec",
    "LikelihoodConfig",
    "ChoiceCoefficients",
    "ChoiceDataset",
    "FittedChoiceModel",
    "quality_utility",
    "choice_probability",
    "purchase_probability",
    "arrival_softmax",
    "build_dataset",
    "simulated_loglik",
    "estimate_sml",
]

UTILITY_LABELS = ("symmetric", "a", "a+era", "a+era+bua", "a+era+bua+q")


@dataclass(frozen=True)
class UtilitySpec:
    """Shape of the quality function and predictor scalings.

    Scaled predictors: mean-quality terms divided by ``mu_scale``,
    variance terms by ``var_scale``, price and weight by their scales.
    """

    asymmetric: bool = True
    quadratic: bool = False
    era: bool = False   # experience-variability term
    bua: bool = False   # belief-uncertainty term
    mu_scale: float = 2.0
    var_scale: float = 10.0
    price_scale: float = 5000.0
    weight_scale: float = 3000.0

    def __post_init__(self) -> None:
        if self.quadratic and not self.asymmetric:
            raise ValueError("quadratic quality terms require the asymmetric form")
        for name in ("mu_scale", "var_scale", "price_scale", "weight_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_label(cls, label: str, **scales) -> "UtilitySpec":
        key = label.lower()
        if key in ("s", "symmetric"):
            return cls(asymmetric=False, **scales)
        if key == "a":
            return cls(asymmetric=True, **scales)
        if key == "a+era":
            return cls(asymmetric=True, era=True, **scales)
        if key == "a+era+bua":
            return cls(asymmetric=True, era=True, bua=True, **scales)
        if key == "a+era+bua+q":
            return cls(asymmetric=True, era=True, bua=True, quadratic=True, **scales)
        raise InputError(f"unknown utility spec {label!r}; expected one of {UTILITY_LABELS}")

    @property
    def label(self) -> str:
        if not self.asymmetric:
            return "symmetric"
        parts = ["a"]
        if self.era:
            parts.append("era")
        if self.bua:
            parts.append("bua")
        if self.quadratic:
            parts.append("q")
        return "+".join(parts)

    def quality_columns(self) -> list[str]:
        cols = ["mu"] if not self.asymmetric else ["mu_pos", "mu_neg"]
        if self.quadratic:
            cols += ["mu_pos_sq", "mu_neg_sq"]
        if self.era:
            cols.append("sigma2")
        if self.bua:
            cols.append("var_mu")
        return cols


@dataclass(frozen=True)
class LikelihoodConfig:
    heterogeneity_draws: int = 100
    halton_skip: int = 0
    antithetic: bool = False
    optimizer_tol: float = 1e-8
    gradient_tol: float = 1e-6
    max_iterations: int = 1000
    multi_start: int = 3
    jitter_sd: float = 0.1
    fd_step: float = 1e-5

    def __post_init__(self) -> None:
        if self.heterogeneity_draws < 1:
            raise ValueError("need at least one heterogeneity draw")


@dataclass
class ChoiceCoefficients:
    """Population coefficient means, heterogeneity variances, and arrival
    parameters (anchor route fixed at 0, arrival intensity fixed at 1)."""

    beta: dict[str, float]
    omega: dict[str, float] = field(default_factory=dict)
    mbar: dict[str, dict[str, float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, value in self.omega.items():
            if value < 0:
                raise ValueError(f"omega[{name}] must be >= 0")


def quality_utility(mu_e: float, sigma2_e: float, var_mu: float,
                    spec: UtilitySpec, coeffs: Mapping[str, float]) -> float:
    """Quality contribution to utility for one (customer, route, period)."""
    if not np.isfinite(mu_e):
        raise InputError("belief row is missing a mean-quality estimate")
    mu_s = mu_e / spec.mu_scale
    f = 0.0
    if spec.asymmetric:
        pos, neg = max(mu_s, 0.0), min(mu_s, 0.0)
        f += coeffs.get("mu_pos", 0.0) * pos + coeffs.get("mu_neg", 0.0) * neg
        if spec.quadratic:
            f += coeffs.get("mu_pos_sq", 0.0) * pos * pos \
                + coeffs.get("mu_neg_sq", 0.0) * neg * neg
    else:
        f += coeffs.get("mu", 0.0) * mu_s
    if spec.era:
        if not np.isfinite(sigma2_e):
            raise InputError("belief row is missing an experience-variance estimate")
        f += coeffs.get("sigma2", 0.0) * (sigma2_e / spec.var_scale)
    if spec.bua:
        if not np.isfinite(var_mu):
            raise InputError("belief row is missing a belief-uncertainty estimate")
        f += coeffs.get("var_mu", 0.0) * (var_mu / spec.var_scale)
    return f


def choice_probability(v: float | np.ndarray):
    """Logistic purchase probability, overflow-safe: stays strictly
    positive down to the subnormal floor instead of flushing to 0."""
    arr = np.asarray(v, dtype=np.float64)
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    e = np.exp(arr[~pos])
    out[~pos] = e / (1.0 + e)
    if np.ndim(v) == 0:
        return float(out)
    return out


def purchase_probability(lam: float, m_ij: float, v: float) -> float:
    """Unconditional purchase probability: arrival intensity times route
    weight times the conditional logit probability."""
    if not 0.0 < lam <= 1.0:
        raise ValueError("arrival intensity must be in (0, 1]")
    if not 0.0 <= m_ij <= 1.0:
        raise ValueError("route weight must be in [0, 1]")
    return lam * m_ij * float(choice_probability(v))


def arrival_softmax(mbar: Mapping[str, float] | Sequence[float]) -> np.ndarray:
    """Route arrival weights from unconstrained scores: softmax, strictly
    positive, summing to one."""
    values = np.asarray(list(mbar.values()) if isinstance(mbar, Mapping) else mbar,
                        dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty arrival score vector")
    e = np.exp(values - values.max())
    return e / e.sum()


@dataclass
class ChoiceDataset:
    """Design matrix plus the cell/customer bookkeeping the simulated
    likelihood needs. Rows are sorted by (customer, period, route) so
    cells and customers are contiguous slices."""

    X: np.ndarray
    names: list[str]
    y: np.ndarray
    customers: list[str]
    route_sets: list[list[str]]
    anchor_local: np.ndarray
    row_customer: np.ndarray
    row_flat_route: np.ndarray      # flat (customer, local-route) index per row
    cell_starts: np.ndarray         # row index starting each (customer, period) cell
    cell_customer: np.ndarray
    cell_purchase_row: np.ndarray   # row with y=1 in the cell, or -1
    cust_cell_starts: np.ndarray    # cell index starting each customer block
    route_offsets: np.ndarray       # flat offset of each customer's route block
    random_names: list[str]
    random_cols: np.ndarray
    spec: UtilitySpec
    est_start: int

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def n_flat_routes(self) -> int:
        return int(self.route_offsets[-1])

    @property
    def free_positions(self) -> np.ndarray:
        free = []
        for i, routes in enumerate(self.route_sets):
            for j in range(len(routes)):
                if j != self.anchor_local[i]:
                    free.append(self.route_offsets[i] + j)
        return np.asarray(free, dtype=np.int64)

    @property
    def n_parameters(self) -> int:
        return self.X.shape[1] + len(self.random_names) + len(self.free_positions)


def build_dataset(panel, trajectory: pd.DataFrame, spec: UtilitySpec,
                  controls: Sequence[str] = ("price", "weight_kg",
                                             "second_half_week", "month"),
                  random_names: Sequence[str] = ("intercept", "sigma2", "var_mu"),
                  est_start: int = 25) -> ChoiceDataset:
    """Join the panel with belief trajectories and assemble the design.

    ``controls`` names panel columns ("month" expands to dummies against
    the first month present); ``random_names`` picks which coefficients
    get heterogeneity and must name design columns.
    """
    frame = panel.frame if hasattr(panel, "frame") else panel
    frame = frame[frame["period"] >= est_start]
    merged = frame.merge(trajectory, on=["customer_id", "route_id", "period"],
                         how="left", validate="one_to_one")
    if merged["mu_j_E"].isna().any():
        n_bad = int(merged["mu_j_E"].isna().sum())
        raise InputError(f"trajectory misses {n_bad} panel cells")
    merged = merged.sort_values(["customer_id", "period", "route_id"],
                                kind="mergesort").reset_index(drop=True)

    cols: dict[str, np.ndarray] = {"intercept": np.ones(len(merged))}
    mu_s = merged["mu_j_E"].to_numpy(float) / spec.mu_scale
    if spec.asymmetric:
        cols["mu_pos"] = np.maximum(mu_s, 0.0)
        cols["mu_neg"] = np.minimum(mu_s, 0.0)
        if spec.quadratic:
            cols["mu_pos_sq"] = cols["mu_pos"] ** 2
            cols["mu_neg_sq"] = cols["mu_neg"] ** 2
    else:
        cols["mu"] = mu_s
    if spec.era:
        sig = merged["sigma2_E"].to_numpy(float) / spec.var_scale
        if np.isnan(sig).any():
            raise InputError("trajectory lacks experience-variance estimates "
                             "needed by the era term")
        cols["sigma2"] = sig
    if spec.bua:
        var = merged["var_mu_j"].to_numpy(float) / spec.var_scale
        if np.isnan(var).any():
            raise InputError("trajectory lacks belief-uncertainty estimates "
                             "needed by the bua term")
        cols["var_mu"] = var

    for name in controls:
        if name == "month":
            months = sorted(merged["month"].unique())
            for m in months[1:]:
                cols[f"month_{int(m)}"] = (merged["month"] == m).to_numpy(float)
        elif name == "price":
            cols["price"] = merged["price"].to_numpy(float) / spec.price_scale
        elif name == "weight_kg":
            cols["weight"] = merged["weight_kg"].to_numpy(float) / spec.weight_scale
        elif name in merged.columns:
            cols[name] = merged[name].to_numpy(float)
        else:
            raise InputError(f"control column {name!r} not in panel")
    for name, values in cols.items():
        if not np.all(np.isfinite(values)):
            raise InputError(f"design column {name!r} has non-finite values")

    names = list(cols)
    X = np.column_stack([cols[n] for n in names])
    y = merged["y"].to_numpy(np.int8)

    customers = sorted(merged["customer_id"].unique())
    cust_index = {c: i for i, c in enumerate(customers)}
    row_customer = merged["customer_id"].map(cust_index).to_numpy(np.int64)

    route_sets: list[list[str]] = []
    anchor_local = np.zeros(len(customers), dtype=np.int64)
    offsets = [0]
    full = panel.frame if hasattr(panel, "frame") else panel
    for i, cid in enumerate(customers):
        g = merged[merged["customer_id"] == cid]
        routes = sorted(g["route_id"].unique())
        route_sets.append(routes)
        offsets.append(offsets[-1] + len(routes))
        # anchor = first route ever purchased, over the whole panel
        hist = full[(full["customer_id"] == cid) & (full["y"] == 1)]
        if len(hist):
            first = hist.loc[hist["period"].idxmin(), "route_id"]
            if first in routes:
                anchor_local[i] = routes.index(first)
    route_offsets = np.asarray(offsets, dtype=np.int64)

    local = np.empty(len(merged), dtype=np.int64)
    for i, cid in enumerate(customers):
        mask = row_customer == i
        lookup = {r: j for j, r in enumerate(route_sets[i])}
        local[mask] = [lookup[r] for r in merged.loc[mask, "route_id"]]
    row_flat_route = route_offsets[row_customer] + local

    cell_key = merged["customer_id"].astype(str) + "\x00" + merged["period"].astype(str)
    change = np.ones(len(merged), dtype=bool)
    change[1:] = cell_key.to_numpy()[1:] != cell_key.to_numpy()[:-1]
    cell_starts = np.flatnonzero(change)
    cell_id = np.cumsum(change) - 1
    cell_customer = row_customer[cell_starts]
    cell_purchase_row = np.full(cell_starts.shape, -1, dtype=np.int64)
    purchase_rows = np.flatnonzero(y == 1)
    cell_purchase_row[cell_id[purchase_rows]] = purchase_rows
    cust_change = np.ones(len(cell_customer), dtype=bool)
    cust_change[1:] = cell_customer[1:] != cell_customer[:-1]
    cust_cell_starts = np.flatnonzero(cust_change)

    random_names = [r for r in random_names if r in names]
    random_cols = np.asarray([names.index(r) for r in random_names], dtype=np.int64)
    return ChoiceDataset(
        X=np.ascontiguousarray(X), names=names, y=y, customers=customers,
        route_sets=route_sets, anchor_local=anchor_local,
        row_customer=row_customer, row_flat_route=row_flat_route,
        cell_starts=cell_starts, cell_customer=cell_customer,
        cell_purchase_row=cell_purchase_row, cust_cell_starts=cust_cell_starts,
        route_offsets=route_offsets, random_names=random_names,
        random_cols=random_cols, spec=spec, est_start=est_start)


def make_heterogeneity_draws(ds: ChoiceDataset, config: LikelihoodConfig) -> np.ndarray:
    """Halton points mapped through the normal quantile, one block of
    ``heterogeneity_draws`` rows per customer (customers in sorted order,
    so the assignment is permutation-stable).

    By default each block is completed antithetically: half the draws are
    Halton normal scores, half their reflections. A finite unscrambled
    Halton window at a non-power count is stratum imbalanced, and the
    resulting nonzero score mean both biases heterogeneity estimates and
    spoils quadrature-level accuracy; reflection zeroes the first moment
    of every block exactly.
    """
    n_cust = len(ds.customers)
    n_dim = len(ds.random_names)
    r = config.heterogeneity_draws
    if n_dim == 0:
        return np.zeros((n_cust, 1, 0))
    if config.antithetic and r >= 2:
        half = (r + 1) // 2
        grid = HaltonGrid(dimension=n_dim, count=half * n_cust,
                          skip=config.halton_skip)
        z_half = ndtri(halton_sequence(grid)).reshape(n_cust, half, n_dim)
        return np.concatenate([z_half, -z_half], axis=1)[:, :r, :]
    grid = HaltonGrid(dimension=n_dim, count=r * n_cust, skip=config.halton_skip)
    points = halton_sequence(grid)
    return ndtri(points).reshape(n_cust, r, n_dim)


def _segment_softmax(flat: np.ndarray, starts: np.ndarray) -> np.ndarray:
    seg_of = np.repeat(np.arange(len(starts)), np.diff(np.append(starts, len(flat))))
    seg_max = np.maximum.reduceat(flat, starts)
    e = np.exp(flat - seg_max[seg_of])
    seg_sum = np.add.reduceat(e, starts)
    return e / seg_sum[seg_of]


def _expand_draws(ds: ChoiceDataset, z: np.ndarray) -> list[np.ndarray]:
    """Row-expanded draw matrices, one (n_rows, n_draws) array per random
    coefficient; computed once and reused across objective evaluations."""
    return [np.ascontiguousarray(z[ds.row_customer, :, d])
            for d in range(z.shape[2])]


def _sml_core(beta: np.ndarray, sd: np.ndarray, mbar_free: np.ndarray,
              ds: ChoiceDataset, z_rows: list[np.ndarray], n_draws: int,
              want_grad: bool):
    n_rows = ds.n_rows
    n_cells = len(ds.cell_starts)
    n_cust = len(ds.customers)

    mbar_flat = np.zeros(ds.n_flat_routes)
    free_pos = ds.free_positions
    mbar_flat[free_pos] = mbar_free
    m_flat = _segment_softmax(mbar_flat, ds.route_offsets[:-1])
    m_row = m_flat[ds.row_flat_route]

    base = ds.X @ beta
    v = np.empty((n_rows, n_draws))
    v[:] = base[:, None]
    for d, col in enumerate(ds.random_cols):
        if sd[d] != 0.0:
            v += (ds.X[:, col] * sd[d])[:, None] * z_rows[d][:, :n_draws]

    p = expit(v)
    q = m_row[:, None] * p
    cell_q = np.add.reduceat(q, ds.cell_starts, axis=0)

    has_purchase = ds.cell_purchase_row >= 0
    # With unit arrival intensity the purchase mass stays strictly below 1
    # except when a trial point saturates the logit in float arithmetic;
    # clamp so line searches see a finite, steeply penalized value. The
    # guard itself matters for future arrival-intensity variants.
    if np.any(cell_q[~has_purchase] >= 1.0):
        if not np.all(np.isfinite(cell_q)):
            raise NumericalError("non-finite purchase mass in a no-purchase cell")
        np.minimum(cell_q, 1.0 - 1e-12, out=cell_q)

    ln_cell = np.empty((n_cells, n_draws))
    pr = ds.cell_purchase_row[has_purchase]
    # log choice probability only needed on the few purchase rows
    ln_cell[has_purchase] = np.log(m_row[pr])[:, None] - np.logaddexp(0.0, -v[pr])
    ln_cell[~has_purchase] = np.log1p(-cell_q[~has_purchase])

    ln_l = np.add.reduceat(ln_cell, ds.cust_cell_starts, axis=0)  # (n_cust, R)
    m_max = ln_l.max(axis=1)
    lse = m_max + np.log(np.exp(ln_l - m_max[:, None]).sum(axis=1))
    sll = float((lse - math.log(n_draws)).sum())
    if not want_grad:
        return sll, None

    w_draws = np.exp(ln_l - lse[:, None])        # per-customer draw weights
    w_rows = w_draws[ds.row_customer]            # (n_rows, R)

    cell_of_row = np.repeat(np.arange(n_cells),
                            np.diff(np.append(ds.cell_starts, n_rows)))
    np_row = ~has_purchase[cell_of_row]
    purchase_rows = ds.cell_purchase_row[has_purchase]
    cq_np = cell_q[cell_of_row[np_row]]
    denom = 1.0 - cq_np
    w = np.zeros((n_rows, n_draws))
    w[purchase_rows] = 1.0 - p[purchase_rows]
    w[np_row] = q[np_row] * (p[np_row] - 1.0) / denom
    np.multiply(w, w_rows, out=w)                # draw-weighted row weights

    a_row = w.sum(axis=1)
    grad_beta = ds.X.T @ a_row
    grad_log_sd = np.empty(len(ds.random_cols))
    for d, col in enumerate(ds.random_cols):
        b = np.einsum("nr,nr->n", w, z_rows[d][:, :n_draws])
        grad_log_sd[d] = float(sd[d] * np.dot(ds.X[:, col], b))

    # arrival scores: purchase cells contribute (1{chosen} - m) regardless
    # of draw; no-purchase cells contribute -(q_k - m_k * cell_q) / (1 - cell_q)
    purch_count = np.bincount(ds.row_flat_route[purchase_rows],
                              minlength=ds.n_flat_routes).astype(float)
    n_purch_cust = np.bincount(ds.cell_customer[has_purchase], minlength=n_cust)
    grad_mbar_flat = purch_count - n_purch_cust[
        np.repeat(np.arange(n_cust), np.diff(ds.route_offsets))] * m_flat
    t = (m_row[np_row, None] * cq_np - q[np_row]) / denom
    c_row = np.einsum("nr,nr->n", w_rows[np_row], t)
    grad_mbar_flat += np.bincount(ds.row_flat_route[np_row], weights=c_row,
                                  minlength=ds.n_flat_routes)
    grad = np.concatenate([grad_beta, grad_log_sd, grad_mbar_flat[free_pos]])
    return sll, grad


def _pack_from_coeffs(ds: ChoiceDataset, coeffs: ChoiceCoefficients):
    beta = np.array([coeffs.beta.get(n, 0.0) for n in ds.names])
    sd = np.array([math.sqrt(coeffs.omega.get(n, 0.0)) for n in ds.random_names])
    free = []
    for i, cid in enumerate(ds.customers):
        per = coeffs.mbar.get(cid, {})
        for j, route in enumerate(ds.route_sets[i]):
            if j != ds.anchor_local[i]:
                free.append(per.get(route, 0.0))
    return beta, sd, np.asarray(free, dtype=np.float64)


def simulated_loglik(ds: ChoiceDataset, coeffs: ChoiceCoefficients,
                     config: LikelihoodConfig) -> float:
    """Simulated log-likelihood at fixed coefficients: per customer, the
    log of the average over draws of the product of period factors,
    accumulated in log space."""
    beta, sd, mbar_free = _pack_from_coeffs(ds, coeffs)
    z = make_heterogeneity_draws(ds, config)
    if np.all(sd == 0.0):
        z = z[:, :1, :]  # degenerate mixing distribution: one draw suffices
    z_rows = _expand_draws(ds, z)
    sll, _ = _sml_core(beta, sd, mbar_free, ds, z_rows, z.shape[1],
                       want_grad=False)
    return sll


@dataclass
class FittedChoiceModel:
    names: list[str]
    estimates: dict[str, float]
    std_errors: dict[str, float | None]
    omega: dict[str, float]
    omega_se: dict[str, float | None]
    mbar: dict[str, dict[str, float]]
    loglik: float
    converged: bool
    n_params: int
    n_draws: int
    spec_label: str
    scalings: dict[str, float]
    message: str = ""

    def coefficients(self) -> ChoiceCoefficients:
        return ChoiceCoefficients(beta=dict(self.estimates),
                                  omega=dict(self.omega),
                                  mbar={c: dict(r) for c, r in self.mbar.items()})

    def to_json(self, path: str | Path | None = None) -> str:
        payload = {
            "coefficients": [
                {"name": n, "estimate": self.estimates[n],
                 "std_error": self.std_errors.get(n)} for n in self.names],
            "omega": [
                {"name": n, "variance": self.omega[n],
                 "std_error": self.omega_se.get(n)} for n in self.omega],
            "arrival_scores": self.mbar,
            "loglik": self.loglik,
            "converged": self.converged,
            "n_params": self.n_params,
            "n_draws": self.n_draws,
            "spec": self.spec_label,
            "scalings": self.scalings,
            "message": self.message,
        }
        text = json.dumps(payload, indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text


def _unpack_vector(p: np.ndarray, ds: ChoiceDataset):
    k = ds.X.shape[1]
    d = len(ds.random_names)
    return p[:k], np.exp(p[k:k + d]), p[k + d:]


def estimate_sml(ds: ChoiceDataset, config: LikelihoodConfig,
                 stream: SeededStream | None = None,
                 init: ChoiceCoefficients | None = None) -> FittedChoiceModel:
    """Maximize the simulated log-likelihood.

    The same Halton draws are reused at every evaluation, so the
    objective is deterministic. Heterogeneity variances are optimized as
    log standard deviations and reported as variances; standard errors
    come from a finite-difference Hessian of the analytic gradient at
    the optimum (delta method back to the variance scale).
    """
    z = make_heterogeneity_draws(ds, config)
    z_rows = _expand_draws(ds, z)
    n_draws = z.shape[1]
    k = ds.X.shape[1]
    d = len(ds.random_names)

    if init is not None:
        beta0, sd0, mbar0 = _pack_from_coeffs(ds, init)
        sd0 = np.maximum(sd0, 1e-3)
    else:
        beta0 = np.zeros(k)
        sd0 = np.full(d, 0.5)
        mbar0 = np.zeros(len(ds.free_positions))
    p0 = np.concatenate([beta0, np.log(sd0) if d else np.empty(0), mbar0])

    def objective(p):
        beta, sd, mbar_free = _unpack_vector(p, ds)
        sll, grad = _sml_core(beta, sd, mbar_free, ds, z_rows, n_draws,
                              want_grad=True)
        return -sll, -grad

    stream = stream if stream is not None else SeededStream(0)
    jitter_gen = stream.child("sml-starts").generator()
    best = None
    for start in range(max(1, config.multi_start)):
        p_init = p0 if start == 0 else p0 + config.jitter_sd * jitter_gen.standard_normal(p0.size)
        res = scipy.optimize.minimize(
            objective, p_init, jac=True, method="L-BFGS-B",
            options={"maxiter": config.max_iterations,
                     "ftol": config.optimizer_tol,
                     "gtol": config.gradient_tol})
        if best is None or res.fun < best.fun:
            best = res
    assert best is not None
    p_hat = best.x
    sll = -float(best.fun)
    converged = bool(best.success)

    # observed information from central differences of the analytic gradient
    h = config.fd_step
    n_p = p_hat.size
    hess = np.empty((n_p, n_p))
    for a in range(n_p):
        stepped = p_hat.copy()
        stepped[a] += h
        _, g_plus = objective(stepped)
        stepped[a] -= 2 * h
        _, g_minus = objective(stepped)
        hess[:, a] = (g_plus - g_minus) / (2.0 * h)
    hess = 0.5 * (hess + hess.T)
    se = np.full(n_p, np.nan)
    se_ok = False
    try:
        cov = np.linalg.inv(hess)
        diag = np.diag(cov)
        if np.all(diag > 0):
            se = np.sqrt(diag)
            se_ok = True
    except np.linalg.LinAlgError:
        pass

    beta_hat, sd_hat, mbar_hat = _unpack_vector(p_hat, ds)
    estimates = {n: float(b) for n, b in zip(ds.names, beta_hat)}
    std_errors = {n: (float(se[i]) if se_ok else None) for i, n in enumerate(ds.names)}
    omega = {n: float(s * s) for n, s in zip(ds.random_names, sd_hat)}
    omega_se = {}
    for i, n in enumerate(ds.random_names):
        if se_ok:
            # delta method: variance = exp(2u) so se_var = 2 var se_u
            omega_se[n] = float(2.0 * omega[n] * se[k + i])
        else:
            omega_se[n] = None
    mbar: dict[str, dict[str, float]] = {}
    pos = 0
    for i, cid in enumerate(ds.customers):
        per = {}
        for j, route in enumerate(ds.route_sets[i]):
            if j == ds.anchor_local[i]:
                per[route] = 0.0
            else:
                per[route] = float(mbar_hat[pos])
                pos += 1
        mbar[cid] = per

    spec = ds.spec
    return FittedChoiceModel(
        names=ds.names, estimates=estimates, std_errors=std_errors,
        omega=omega, omega_se=omega_se, mbar=mbar, loglik=sll,
        converged=converged, n_params=int(n_p), n_draws=config.heterogeneity_draws,
        spec_label=spec.label,
        scalings={"mu": spec.mu_scale, "var": spec.var_scale,
                  "price": spec.price_scale, "weight": spec.weight_scale},
        message=str(best.message))
