"""Probabilistic and point forecast metrics: quantile-approximated CRPS, MASE
against a seasonal-naive scale, OWA, midrank aggregation, and Pearson r.

Scores that cannot be computed are reported as absent with a reason, never as
infinities, so rank aggregation stays finite.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .quantile import QUANTILE_LEVELS, QuantileForecast, pinball


@dataclass(frozen=True)
class Score:
    value: float | None
    reason: str | None = None

    @property
    def absent(self) -> bool:
        return self.value is None


def crps_quantile(forecast: QuantileForecast, truth: np.ndarray,
                  observed: np.ndarray | None = None) -> Score:
    """2 x mean pinball over the nine levels, averaged over scored positions.
    The forecast should be sorted; `truth` is (V, H)."""
    truth = np.asarray(truth, dtype=np.float64)
    q = forecast.values
    if truth.shape != q.shape[:2]:
        raise ValueError(f"truth {truth.shape} vs forecast {q.shape[:2]}")
    scored = np.ones_like(truth, dtype=bool) if observed is None else np.asarray(observed, dtype=bool)
    if not scored.any():
        return Score(None, "no scored positions")
    per = pinball(truth[..., None], q, QUANTILE_LEVELS).mean(axis=-1)
    return Score(float(2.0 * per[scored].mean()))


def mase(point_forecast: np.ndarray, truth: np.ndarray, insample: np.ndarray,
         season_length: int = 1) -> Score:
    """Mean |forecast - truth| over the horizon, divided by the in-sample mean
    |x_t - x_{t-season}|."""
    point_forecast = np.asarray(point_forecast, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    insample = np.asarray(insample, dtype=np.float64)
    if insample.shape[-1] <= season_length:
        return Score(None, f"insample shorter than season {season_length}")
    denom = np.abs(insample[..., season_length:] - insample[..., :-season_length]).mean()
    if denom == 0.0:
        return Score(None, "zero scale (constant seasonal in-sample)")
    return Score(float(np.abs(point_forecast - truth).mean() / denom))


def owa(mase_f: Score, crps_f: Score, mase_naive: Score, crps_naive: Score) -> Score:
    """0.5 * (MASE_f/MASE_naive + CRPS_f/CRPS_naive)."""
    for s, what in ((mase_f, "MASE"), (crps_f, "CRPS"), (mase_naive, "naive MASE"),
                    (crps_naive, "naive CRPS")):
        if s.absent:
            return Score(None, f"{what} absent: {s.reason}")
    if mase_naive.value <= 0 or crps_naive.value <= 0:
        return Score(None, "non-positive naive score")
    return Score(0.5 * (mase_f.value / mase_naive.value + crps_f.value / crps_naive.value))


def seasonal_naive(insample: np.ndarray, horizon: int, season_length: int = 1) -> np.ndarray:
    """Repeat the last observed season across the horizon. (V, H)."""
    insample = np.atleast_2d(np.asarray(insample, dtype=np.float64))
    if insample.shape[-1] < season_length:
        raise ValueError("insample shorter than one season")
    season = insample[..., -season_length:]
    reps = -(-horizon // season_length)
    return np.tile(season, (1, reps))[..., :horizon]


def seasonal_naive_quantiles(insample: np.ndarray, horizon: int,
                             season_length: int = 1) -> QuantileForecast:
    """Point seasonal-naive forecast replicated across all nine levels."""
    point = seasonal_naive(insample, horizon, season_length)
    return QuantileForecast(values=np.repeat(point[..., None], len(QUANTILE_LEVELS), axis=-1),
                            space="real")


def rank_models(scores: dict[str, dict[str, Score | float | None]]) -> dict[str, float]:
    """Average rank per model over datasets: rank 1 is the lowest score, ties
    get the mean of the tied ranks, datasets with any absent score are excluded."""
    models: list[str] = sorted({m for per in scores.values() for m in per})
    sums = {m: 0.0 for m in models}
    used = 0
    for dataset in sorted(scores):
        per = scores[dataset]
        vals = {}
        skip = False
        for m in models:
            s = per.get(m)
            v = s.value if isinstance(s, Score) else s
            if v is None:
                skip = True
                break
            vals[m] = v
        if skip:
            continue
        used += 1
        ordered = sorted(vals.items(), key=lambda kv: kv[1])
        i = 0
        while i < len(ordered):
            j = i
            while j + 1 < len(ordered) and ordered[j + 1][1] == ordered[i][1]:
                j += 1
            midrank = (i + j) / 2.0 + 1.0
            for kk in range(i, j + 1):
                sums[ordered[kk][0]] += midrank
            i = j + 1
    if used == 0:
        return {m: float("nan") for m in models}
    return {m: sums[m] / used for m in models}


def pearson(a: np.ndarray, b: np.ndarray) -> Score:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size != b.size or a.size < 2:
        return Score(None, "need two same-length series of length >= 2")
    if np.std(a) == 0 or np.std(b) == 0:
        return Score(None, "constant input")
    return Score(float(np.corrcoef(a, b)[0, 1]))


@dataclass
class MetricReport:
    """Per-(dataset, model) scores plus per-model average ranks."""

    entries: list[dict]  # {dataset, model, metric, value, reason}
    ranks: dict[str, float]

    def to_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump({"entries": self.entries, "ranks": self.ranks}, f, indent=1)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["dataset", "model", "metric", "value", "reason"])
            for e in self.entries:
                writer.writerow([e["dataset"], e["model"], e["metric"],
                                 "" if e["value"] is None else repr(e["value"]),
                                 e.get("reason") or ""])


def build_report(scores: dict[str, dict[str, dict[str, Score]]],
                 rank_metric: str = "crps") -> MetricReport:
    """scores[dataset][model][metric] -> Score."""
    entries = []
    for dataset in sorted(scores):
        for model in sorted(scores[dataset]):
            for metric, s in sorted(scores[dataset][model].items()):
                entries.append({"dataset": dataset, "model": model, "metric": metric,
                                "value": s.value, "reason": s.reason})
    rank_in = {
        dataset: {model: per[rank_metric] for model, per in models.items() if rank_metric in per}
        for dataset, models in scores.items()
    }
    return MetricReport(entries=entries, ranks=rank_models(rank_in))
