"""Small builders for hand-made panels and trajectories."""

from __future__ import annotations

import numpy as np
import pandas as pd

from shiplearn.panel import ChoicePanel


def panel_from_rows(rows, n_periods):
    frame = pd.DataFrame(rows)
    if "price" not in frame.columns:
        frame["price"] = 0.0
    if "weight_kg" not in frame.columns:
        frame["weight_kg"] = 0.0
    frame["second_half_week"] = (frame["period"] - 1) % 2
    frame["month"] = 1
    return ChoicePanel(frame, n_periods=n_periods)


def grid_rows(cid, routes, periods, deliveries, purchases=None):
    """Full (route, period) grid; ``deliveries`` maps (route, period) to a
    delay, ``purchases`` optionally marks extra y=1 cells without delivery."""
    purchases = purchases or {}
    rows = []
    for r in routes:
        for t in range(1, periods + 1):
            q = deliveries.get((r, t))
            rows.append({
                "customer_id": cid, "route_id": r, "period": t,
                "y": int(q is not None or (r, t) in purchases),
                "y_star": int(q is not None),
                "delay_h": q if q is not None else np.nan,
            })
    return rows


def flat_trajectory(cid, routes, periods, mu=0.0, var_mu=1.0, sigma2=1.0,
                    xi2=1.0, start=1):
    rows = []
    for r in routes:
        for t in range(start, periods + 1):
            rows.append({"customer_id": cid, "route_id": r, "period": t,
                         "mu_j_E": mu, "var_mu_j": var_mu, "mu_E": mu,
                         "sigma2_E": sigma2, "xi2_E": xi2, "gamma_E": np.nan})
    return pd.DataFrame(rows)
