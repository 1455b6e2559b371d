"""Data model and ingestion: shipment records -> period-gridded choice panel.

A period is half a week (84 hours). Shipment starts become purchase
indicators ``y``; deliveries become delivery indicators ``y_star`` with
the observed transport delay (actual minus planned delivery, hours,
negative = early). The panel grid covers every (customer, route, period)
cell for the customer's route set, with covariates interpolated and
prices imputed from a log-price regression where needed.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from io import StringIO
from pathlib import Path

import numpy as np
import pandas as pd

from shiplearn.errors import InputError
from shiplearn.randcore import SeededStream

__all__ = [
    "PERIOD_HOURS",
    "ShipmentRecord",
    "ChoicePanel",
    "PriceModel",
    "read_shipments_csv",
    "build_periods",
    "filter_customers",
    "interpolate_covariates",
    "fit_price_model",
    "predict_price",
    "impute_prices",
    "great_circle_distance",
    "synthetic_price_rows",
]

PERIOD_HOURS = 84.0  # half a week

PANEL_COLUMNS = [
    "customer_id", "route_id", "period", "y", "y_star", "delay_h",
    "price", "weight_kg", "second_half_week", "month",
]

SHIPMENT_COLUMNS = [
    "customer_id", "route_id", "start_ts", "delivery_ts", "planned_ts",
    "weight_kg", "pieces", "olat", "olon", "dlat", "dlon",
]


@dataclass(frozen=True)
class ShipmentRecord:
    customer_id: str
    route_id: str
    start_ts: datetime
    delivery_ts: datetime
    planned_ts: datetime
    weight_kg: float
    pieces: int
    olat: float
    olon: float
    dlat: float
    dlon: float

    @property
    def transport_delay_hours(self) -> float:
        return (self.delivery_ts - self.planned_ts).total_seconds() / 3600.0


@dataclass
class ChoicePanel:
    """Period-gridded purchase/delivery panel.

    ``frame`` holds one row per (customer, route, period) with at least
    the canonical columns; extra covariate columns (``distance_km``,
    ``pieces``, synthetic regressors) ride along when present.
    """

    frame: pd.DataFrame
    n_periods: int = 0

    def __post_init__(self) -> None:
        missing = [c for c in PANEL_COLUMNS if c not in self.frame.columns]
        if missing:
            raise InputError(f"panel is missing columns: {missing}")
        if self.n_periods == 0:
            self.n_periods = int(self.frame["period"].max())

    def validate(self) -> None:
        starts = self.frame.groupby(["customer_id", "period"])["y"].sum()
        if (starts > 1).any():
            bad = starts[starts > 1].index[0]
            raise InputError(f"more than one purchase in cell {bad}")

    def route_sets(self) -> dict[str, tuple[str, ...]]:
        return {cid: tuple(sorted(g["route_id"].unique()))
                for cid, g in self.frame.groupby("customer_id")}

    def to_csv(self, path: str | Path) -> None:
        extras = [c for c in self.frame.columns if c not in PANEL_COLUMNS]
        self.frame[PANEL_COLUMNS + extras].to_csv(path, index=False)

    @classmethod
    def from_csv(cls, path: str | Path) -> "ChoicePanel":
        path = Path(path)
        if not path.exists():
            raise InputError(f"panel file not found: {path}")
        try:
            frame = pd.read_csv(path)
        except Exception as exc:
            raise InputError(f"cannot parse panel CSV {path}: {exc}") from exc
        missing = [c for c in PANEL_COLUMNS if c not in frame.columns]
        if missing:
            raise InputError(f"panel CSV {path} is missing columns {missing}")
        frame["period"] = frame["period"].astype(int)
        frame["customer_id"] = frame["customer_id"].astype(str)
        frame["route_id"] = frame["route_id"].astype(str)
        return cls(frame)


def _parse_ts(value: str, line_no: int, column: str) -> datetime:
    try:
        ts = datetime.fromisoformat(value.replace("Z", "+00:00"))
    except ValueError as exc:
        raise InputError(f"line {line_no}: bad {column} timestamp {value!r}") from exc
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def read_shipments_csv(path: str | Path) -> list[ShipmentRecord]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"shipments file not found: {path}")
    records: list[ShipmentRecord] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != SHIPMENT_COLUMNS:
            raise InputError(
                f"{path}: expected header {','.join(SHIPMENT_COLUMNS)}")
        for i, row in enumerate(reader, start=2):
            try:
                records.append(ShipmentRecord(
                    customer_id=row["customer_id"],
                    route_id=row["route_id"],
                    start_ts=_parse_ts(row["start_ts"], i, "start_ts"),
                    delivery_ts=_parse_ts(row["delivery_ts"], i, "delivery_ts"),
                    planned_ts=_parse_ts(row["planned_ts"], i, "planned_ts"),
                    weight_kg=float(row["weight_kg"]),
                    pieces=int(row["pieces"]),
                    olat=float(row["olat"]), olon=float(row["olon"]),
                    dlat=float(row["dlat"]), dlon=float(row["dlon"]),
                ))
            except (KeyError, ValueError) as exc:
                raise InputError(f"{path} line {i}: {exc}") from exc
    return records


def great_circle_distance(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Haversine distance in km on a sphere of mean radius 6371 km."""
    for lat in (lat1, lat2):
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude out of range: {lat}")
    for lon in (lon1, lon2):
        if not -180.0 <= lon <= 180.0:
            raise ValueError(f"longitude out of range: {lon}")
    rlat1, rlon1, rlat2, rlon2 = map(math.radians, (lat1, lon1, lat2, lon2))
    dlat = rlat2 - rlat1
    dlon = rlon2 - rlon1
    a = math.sin(dlat / 2.0) ** 2 + math.cos(rlat1) * math.cos(rlat2) * math.sin(dlon / 2.0) ** 2
    return 6371.0 * 2.0 * math.asin(min(1.0, math.sqrt(a)))


def _default_epoch(records: list[ShipmentRecord]) -> datetime:
    first = min(r.start_ts for r in records)
    return first.replace(hour=0, minute=0, second=0, microsecond=0)


def build_periods(records: list[ShipmentRecord],
                  epoch: datetime | None = None) -> ChoicePanel:
    """Slice shipments onto the 84-hour period grid.

    Starts map to ``floor((start - epoch) / 84h)``, deliveries likewise
    (a delivery often lands in a later period than its start). When one
    customer starts shipments on several routes in the same period, only
    the route with the highest total start count for that customer is
    kept for that period. Records delivered before they start, or
    started before the epoch, are rejected with a diagnostic count.
    """
    if not records:
        raise InputError("no shipment records")
    records = sorted(records, key=lambda r: (r.start_ts, r.customer_id, r.route_id))
    epoch = epoch if epoch is not None else _default_epoch(records)
    diagnostics = {"delivery_before_start": 0, "before_epoch": 0}
    clean: list[ShipmentRecord] = []
    for r in records:
        if r.delivery_ts < r.start_ts:
            diagnostics["delivery_before_start"] += 1
            continue
        if r.start_ts < epoch:
            diagnostics["before_epoch"] += 1
            continue
        clean.append(r)
    if not clean:
        raise InputError(f"all records rejected: {diagnostics}")

    def period_of(ts: datetime) -> int:
        return 1 + int((ts - epoch).total_seconds() // (PERIOD_HOURS * 3600.0))

    totals: dict[tuple[str, str], int] = {}
    for r in clean:
        totals[(r.customer_id, r.route_id)] = totals.get((r.customer_id, r.route_id), 0) + 1

    # collapse multi-route starts within one (customer, period)
    by_cell: dict[tuple[str, int], list[ShipmentRecord]] = {}
    for r in clean:
        by_cell.setdefault((r.customer_id, period_of(r.start_ts)), []).append(r)
    kept: list[ShipmentRecord] = []
    for (cid, _t), cell in by_cell.items():
        routes = {r.route_id for r in cell}
        if len(routes) > 1:
            best = max(routes, key=lambda rt: (totals[(cid, rt)], rt))
            cell = [r for r in cell if r.route_id == best]
        kept.extend(cell)

    n_periods = max(period_of(r.delivery_ts) for r in kept)
    n_periods = max(n_periods, max(period_of(r.start_ts) for r in kept))

    route_info: dict[tuple[str, str], dict] = {}
    for r in kept:
        key = (r.customer_id, r.route_id)
        if key not in route_info:
            route_info[key] = {
                "distance_km": great_circle_distance(r.olat, r.olon, r.dlat, r.dlon)}

    rows: dict[tuple[str, str, int], dict] = {}
    for (cid, rid), info in route_info.items():
        for t in range(1, n_periods + 1):
            day = (t - 1) * PERIOD_HOURS / 24.0
            month = (epoch + timedelta(days=day)).month
            rows[(cid, rid, t)] = {
                "customer_id": cid, "route_id": rid, "period": t,
                "y": 0, "y_star": 0, "delay_h": np.nan,
                "price": np.nan, "weight_kg": np.nan,
                "second_half_week": (t - 1) % 2, "month": month,
                "distance_km": info["distance_km"], "pieces": np.nan,
            }
    for r in kept:
        start_cell = rows[(r.customer_id, r.route_id, period_of(r.start_ts))]
        start_cell["y"] = 1
        start_cell["weight_kg"] = r.weight_kg
        start_cell["pieces"] = float(r.pieces)
        deliver_cell = rows[(r.customer_id, r.route_id, period_of(r.delivery_ts))]
        delay = r.transport_delay_hours
        if deliver_cell["y_star"] == 1:
            # rare: several deliveries land in one cell; average them
            deliver_cell["delay_h"] = 0.5 * (deliver_cell["delay_h"] + delay)
        else:
            deliver_cell["y_star"] = 1
            deliver_cell["delay_h"] = delay

    frame = pd.DataFrame(sorted(rows.values(),
                                key=lambda d: (d["customer_id"], d["route_id"], d["period"])))
    panel = ChoicePanel(frame, n_periods=n_periods)
    panel.diagnostics = diagnostics  # type: ignore[attr-defined]
    panel.epoch = epoch  # type: ignore[attr-defined]
    return panel


def filter_customers(panel: ChoicePanel,
                     first_window: int = 24,
                     min_first: int = 5,
                     min_rest: int = 15,
                     min_routes: int = 2,
                     max_routes: int = 10,
                     max_top_share: float = 0.70,
                     max_shipments: int = 100) -> ChoicePanel:
    """Retain customers with enough activity for estimation.

    Defaults: at least 5 starts in the pre-estimation window and 15 in
    the remainder, 2..10 routes, top-route share at most 70%, and at
    most 100 shipments in total. Idempotent; exclusion counts are left
    on the returned panel's ``exclusions`` attribute.
    """
    frame = panel.frame
    if panel.n_periods < first_window + 1:
        raise InputError(
            f"panel spans {panel.n_periods} periods; need more than {first_window}")
    counts = {"too_few_early": 0, "too_few_late": 0, "route_count": 0,
              "top_share": 0, "too_many_shipments": 0}
    keep: list[str] = []
    for cid, g in frame.groupby("customer_id", sort=True):
        starts = g[g["y"] == 1]
        n_first = int((starts["period"] <= first_window).sum())
        n_rest = int((starts["period"] > first_window).sum())
        n_total = len(starts)
        route_counts = starts.groupby("route_id").size()
        n_routes = int((route_counts > 0).sum())
        top_share = float(route_counts.max() / n_total) if n_total else 1.0
        if n_first < min_first:
            counts["too_few_early"] += 1
        elif n_rest < min_rest:
            counts["too_few_late"] += 1
        elif not (min_routes <= n_routes <= max_routes):
            counts["route_count"] += 1
        elif top_share > max_top_share:
            counts["top_share"] += 1
        elif n_total > max_shipments:
            counts["too_many_shipments"] += 1
        else:
            keep.append(cid)
    # drop grid rows for routes the customer never started shipments on
    out = frame[frame["customer_id"].isin(keep)]
    used = out.loc[out["y"] == 1, ["customer_id", "route_id"]].drop_duplicates()
    out = out.merge(used, on=["customer_id", "route_id"], how="inner")
    out = out.reset_index(drop=True)
    result = ChoicePanel(out, n_periods=panel.n_periods)
    result.exclusions = counts  # type: ignore[attr-defined]
    return result


def interpolate_covariates(panel: ChoicePanel) -> ChoicePanel:
    """Fill missing weight/pieces with the customer-route observed mean.

    Observed cells are untouched. A customer-route pair with no observed
    shipment violates the precondition and raises.
    """
    frame = panel.frame.copy()
    cols = [c for c in ("weight_kg", "pieces") if c in frame.columns]
    for col in cols:
        means = frame[frame["y"] == 1].groupby(["customer_id", "route_id"])[col].mean()
        if means.isna().any():
            bad = means[means.isna()].index[0]
            raise InputError(f"customer-route {bad} has no observed {col}")
        keys = pd.MultiIndex.from_frame(frame[["customer_id", "route_id"]])
        if keys.difference(means.index).size > 0:
            bad = keys.difference(means.index)[0]
            raise InputError(f"customer-route {bad} has no observed shipments")
        fill = means.reindex(keys).to_numpy()
        vals = frame[col].to_numpy(dtype=float)
        frame[col] = np.where(np.isnan(vals), fill, vals)
    return ChoicePanel(frame, n_periods=panel.n_periods)


@dataclass
class PriceModel:
    """Log-price regression: intercept + distance and weight slopes plus
    sparse additive categorical effects (first level is the reference)."""

    intercept: float
    distance_slope: float
    weight_slope: float
    categorical_effects: dict[str, dict[str, float]] = field(default_factory=dict)
    r_squared: float = float("nan")

    def predict_ln_price(self, distance_km: float, weight_kg: float,
                         levels: dict[str, str] | None = None) -> float:
        ln_p = self.intercept + self.distance_slope * distance_km \
            + self.weight_slope * weight_kg
        for factor, table in self.categorical_effects.items():
            level = None if levels is None else levels.get(factor)
            if level is None:
                continue
            effect = table.get(str(level))
            if effect is None:
                warnings.warn(f"unseen {factor} level {level!r}; using 0 effect",
                              stacklevel=2)
                effect = 0.0
            ln_p += effect
        return ln_p


PRICE_FACTORS = ["weight_break", "month", "to_country", "pieces"]
PRICE_CSV_COLUMNS = ["ln_price", "distance_km", "weight_kg"] + PRICE_FACTORS


def _price_design(rows: pd.DataFrame) -> tuple[np.ndarray, list[str]]:
    n = len(rows)
    columns: list[np.ndarray] = [np.ones(n), rows["distance_km"].to_numpy(float),
                                 rows["weight_kg"].to_numpy(float)]
    names = ["intercept", "distance_km", "weight_kg"]
    for factor in PRICE_FACTORS:
        levels = sorted(rows[factor].astype(str).unique())
        for level in levels[1:]:  # first level is the reference
            columns.append((rows[factor].astype(str) == level).to_numpy(float))
            names.append(f"{factor}={level}")
    return np.column_stack(columns), names


def fit_price_model(rows: pd.DataFrame) -> PriceModel:
    """Ordinary least squares on log price.

    Raises naming the collinear columns if the dummy-coded design is
    rank-deficient.
    """
    missing = [c for c in PRICE_CSV_COLUMNS if c not in rows.columns]
    if missing:
        raise InputError(f"price rows missing columns {missing}")
    X, names = _price_design(rows)
    y = rows["ln_price"].to_numpy(float)
    rank = np.linalg.matrix_rank(X)
    if rank < X.shape[1]:
        # name offending columns via pivoted QR
        from scipy.linalg import qr
        _, _, pivots = qr(X, mode="economic", pivoting=True)
        bad = sorted(names[p] for p in pivots[rank:])
        raise InputError(f"price design is rank deficient; collinear columns: {bad}")
    beta, _, _, _ = np.linalg.lstsq(X, y, rcond=None)
    fitted = X @ beta
    ss_res = float(np.sum((y - fitted) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    effects: dict[str, dict[str, float]] = {f: {} for f in PRICE_FACTORS}
    for name, value in zip(names[3:], beta[3:]):
        factor, level = name.split("=", 1)
        effects[factor][level] = float(value)
    for factor in PRICE_FACTORS:
        ref = sorted(rows[factor].astype(str).unique())[0]
        effects[factor][ref] = 0.0
    return PriceModel(
        intercept=float(beta[0]), distance_slope=float(beta[1]),
        weight_slope=float(beta[2]), categorical_effects=effects,
        r_squared=1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0)


def predict_price(model: PriceModel, distance_km: float, weight_kg: float,
                  levels: dict[str, str] | None = None) -> float:
    """Price in currency units: exp of the fitted log price."""
    return math.exp(model.predict_ln_price(distance_km, weight_kg, levels))


# chargeable-weight ladder used to bucket panel weights into break levels
WEIGHT_BREAKS = [45.0, 100.0, 300.0, 500.0, 1000.0]


def _weight_break_level(weight: float) -> str:
    for bound in WEIGHT_BREAKS:
        if weight < bound:
            return f"<{bound:g}"
    return f">={WEIGHT_BREAKS[-1]:g}"


def impute_prices(panel: ChoicePanel, model: PriceModel,
                  to_country: dict[str, str] | None = None) -> ChoicePanel:
    """Fill the panel's price column from the log-price model.

    ``to_country`` optionally maps route ids to destination-country
    levels; unknown levels predict with 0 effect.
    """
    frame = panel.frame.copy()
    if "distance_km" not in frame.columns:
        raise InputError("panel needs a distance_km column to impute prices")
    prices = np.empty(len(frame))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for i, row in enumerate(frame.itertuples(index=False)):
            levels = {
                "weight_break": _weight_break_level(float(row.weight_kg)),
                "month": str(int(row.month)),
                "pieces": str(int(row.pieces)) if "pieces" in frame.columns
                and not pd.isna(row.pieces) else None,
            }
            if to_country is not None:
                levels["to_country"] = to_country.get(row.route_id)
            levels = {k: v for k, v in levels.items() if v is not None}
            prices[i] = predict_price(model, float(row.distance_km),
                                      float(row.weight_kg), levels)
    frame["price"] = prices
    return ChoicePanel(frame, n_periods=panel.n_periods)


def synthetic_price_rows(stream: SeededStream, n: int,
                         intercept: float = 4.50,
                         distance_slope: float = 1.15e-5,
                         weight_slope: float = 1.65e-6,
                         noise_sd: float = 0.0) -> pd.DataFrame:
    """Generate price-regression rows from known coefficients (defaults
    sized like real air-freight quotes) for fitting and round-trip tests."""
    gen = stream.generator()
    months = [str(m) for m in range(1, 13)]
    countries = [f"C{k}" for k in range(8)]
    pieces = [str(p) for p in (1, 2, 3, 5)]
    month_fx = {m: 0.0 if i == 0 else gen.normal(0, 0.05)
                for i, m in enumerate(sorted(months))}
    country_fx = {c: 0.0 if i == 0 else gen.normal(0, 0.3)
                  for i, c in enumerate(sorted(countries))}
    pieces_fx = {p: 0.0 if i == 0 else gen.normal(0, 0.1)
                 for i, p in enumerate(sorted(pieces))}
    breaks = sorted({_weight_break_level(w) for w in [10, 50, 150, 400, 700, 1500]})
    break_fx = {b: 0.0 if i == 0 else gen.normal(0, 0.2)
                for i, b in enumerate(breaks)}
    rows = []
    for _ in range(n):
        dist = float(gen.uniform(500, 15000))
        weight = float(gen.uniform(5, 4000))
        month = months[gen.integers(12)]
        country = countries[gen.integers(len(countries))]
        piece = pieces[gen.integers(len(pieces))]
        wb = _weight_break_level(weight)
        ln_p = (intercept + distance_slope * dist + weight_slope * weight
                + month_fx[month] + country_fx[country] + pieces_fx[piece]
                + break_fx[wb] + (gen.normal(0, noise_sd) if noise_sd > 0 else 0.0))
        rows.append({"ln_price": ln_p, "distance_km": dist, "weight_kg": weight,
                     "weight_break": wb, "month": month, "to_country": country,
                     "pieces": piece})
    return pd.DataFrame(rows)
