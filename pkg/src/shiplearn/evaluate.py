"""Model-comparison statistics and ranking tables."""

from __future__ import annotations

from dataclasses import dataclass, replace

import pandas as pd

__all__ = ["FitReport", "aic", "rank_models", "rank_table_markdown", "rank_table_csv"]


@dataclass(frozen=True)
class FitReport:
    """Fit summary for one model: label, log-likelihood, parameter count,
    and (for Bayesian learning models only) a DIC value."""

    label: str
    loglik: float
    n_params: int
    dic: float | None = None
    rank_ll: int | None = None
    rank_aic: int | None = None

    @property
    def neg_loglik(self) -> float:
        return -self.loglik

    @property
    def aic(self) -> float:
        return aic(self.loglik, self.n_params)


def aic(ll: float, k: int) -> float:
    """Akaike information criterion, 2k - 2 ll."""
    if k < 0:
        raise ValueError("parameter count must be non-negative")
    return 2.0 * k - 2.0 * ll


def rank_models(reports: list[FitReport]) -> list[FitReport]:
    """Rank by log-likelihood (higher is better) and AIC (lower is
    better) independently; 1 is best. Ties break toward fewer
    parameters, then label order."""
    if len(reports) < 2:
        raise ValueError("need at least two reports to rank")
    by_ll = sorted(reports, key=lambda r: (-r.loglik, r.n_params, r.label))
    by_aic = sorted(reports, key=lambda r: (r.aic, r.n_params, r.label))
    ll_rank = {id(r): i + 1 for i, r in enumerate(by_ll)}
    aic_rank = {id(r): i + 1 for i, r in enumerate(by_aic)}
    return [replace(r, rank_ll=ll_rank[id(r)], rank_aic=aic_rank[id(r)])
            for r in reports]


def _rank_frame(reports: list[FitReport]) -> pd.DataFrame:
    ranked = rank_models(reports)
    return pd.DataFrame([
        {"model": r.label, "neg_loglik": r.neg_loglik, "aic": r.aic,
         "dic": r.dic if r.dic is not None else "",
         "n_params": r.n_params, "rank_ll": r.rank_ll, "rank_aic": r.rank_aic}
        for r in ranked])


def rank_table_csv(reports: list[FitReport]) -> str:
    return _rank_frame(reports).to_csv(index=False)


def rank_table_markdown(reports: list[FitReport]) -> str:
    frame = _rank_frame(reports)
    header = "| " + " | ".join(frame.columns) + " |"
    sep = "|" + "|".join("---" for _ in frame.columns) + "|"
    lines = [header, sep]
    for row in frame.itertuples(index=False):
        cells = []
        for value in row:
            cells.append(f"{value:.4f}" if isinstance(value, float) else str(value))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
