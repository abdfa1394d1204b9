"""Quantile outputs: pinball loss and its closed-form gradient, the nine-level
forecast record, inference-time sorting, and real-space clamping."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

QUANTILE_LEVELS = np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
MEDIAN_IDX = 4
CLAMP_FACTOR = 1e4


@dataclass
class QuantileForecast:
    """Nine quantile levels per variate per future timestep.

    `values` is (V, H, 9); `space` tags whether entries live in the model's
    scaled space or in real units.
    """

    values: np.ndarray
    space: str = "scaled"  # "scaled" | "real"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[-1] != len(QUANTILE_LEVELS):
            raise ValueError(f"forecast values must be (V, H, 9), got {self.values.shape}")
        if self.space not in ("scaled", "real"):
            raise ValueError(f"unknown space tag {self.space!r}")

    @property
    def levels(self) -> np.ndarray:
        return QUANTILE_LEVELS

    @property
    def horizon(self) -> int:
        return self.values.shape[1]

    def median(self) -> np.ndarray:
        """(V, H) sorted tau=0.5 output."""
        return np.sort(self.values, axis=-1)[..., MEDIAN_IDX]


def pinball(y, q_hat, tau):
    """(y - q)(tau - 1[y < q]); >= 0, zero iff y == q."""
    y = np.asarray(y, dtype=np.float64)
    q = np.asarray(q_hat, dtype=np.float64)
    return (y - q) * (tau - (y < q))


def pinball_grad(y, q_hat, tau):
    """d pinball / d q_hat: exactly -tau (y > q), 0 (y == q), 1 - tau (y < q)."""
    y = np.asarray(y, dtype=np.float64)
    q = np.asarray(q_hat, dtype=np.float64)
    return np.where(y > q, -tau, np.where(y < q, 1.0 - tau, 0.0))


def quantile_loss(y, q_hat_vec, observed=None) -> tuple[float, float]:
    """Mean pinball over the nine levels, averaged over observed positions.

    `y` is (...,), `q_hat_vec` is (..., 9). Positions where `observed` is False
    are excluded. Returns (loss, weight); weight 0 flags that every target was
    unobserved (loss is then 0).
    """
    y = np.asarray(y, dtype=np.float64)
    q = np.asarray(q_hat_vec, dtype=np.float64)
    if q.shape[-1] != len(QUANTILE_LEVELS):
        raise ValueError(f"expected 9 quantiles on the last axis, got {q.shape}")
    per_level = pinball(y[..., None], q, QUANTILE_LEVELS)
    per_pos = per_level.mean(axis=-1)
    if observed is None:
        w = np.ones_like(per_pos)
    else:
        w = np.asarray(observed, dtype=np.float64)
    total_w = float(w.sum())
    if total_w == 0.0:
        return 0.0, 0.0
    return float((per_pos * w).sum() / total_w), total_w


def sort_quantiles(forecast: QuantileForecast) -> QuantileForecast:
    """Sort along the level axis to prevent quantile crossing (inference only,
    never inside the training loss)."""
    return QuantileForecast(values=np.sort(forecast.values, axis=-1), space=forecast.space)


def clamp_forecast(forecast: QuantileForecast, ctx_min, ctx_max, anchor_scale,
                   factor: float = CLAMP_FACTOR) -> QuantileForecast:
    """Clip real-space quantiles to the observed context's min/max, each
    extended by `factor` times the scaler's scale at the final context position."""
    if forecast.space != "real":
        raise ValueError("clamp_forecast applies to real-space forecasts")
    ctx_min = np.asarray(ctx_min, dtype=np.float64).reshape(-1, 1, 1)
    ctx_max = np.asarray(ctx_max, dtype=np.float64).reshape(-1, 1, 1)
    anchor = np.asarray(anchor_scale, dtype=np.float64).reshape(-1, 1, 1)
    if np.any(anchor <= 0):
        raise ValueError("anchor_scale must be positive")
    lo = ctx_min - factor * anchor
    hi = ctx_max + factor * anchor
    return QuantileForecast(values=np.clip(forecast.values, lo, hi), space="real")


FORECAST_HEADER = ["variate", "t"] + [f"q{int(tau * 100)}" for tau in QUANTILE_LEVELS]


def write_forecast_csv(path, forecast: QuantileForecast, names: list[str] | None = None) -> None:
    """Columns (variate, t, q10..q90), one row per variate per future step."""
    v_n, h, _ = forecast.values.shape
    names = names or [f"v{i}" for i in range(v_n)]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(FORECAST_HEADER)
        for v in range(v_n):
            for t in range(h):
                writer.writerow([names[v], t] + [repr(float(x)) for x in forecast.values[v, t]])


def read_forecast_csv(path) -> tuple[QuantileForecast, list[str]]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != FORECAST_HEADER:
            raise ValueError(f"unexpected forecast header {header}")
        rows = list(reader)
    names: list[str] = []
    for r in rows:
        if r[0] not in names:
            names.append(r[0])
    h = len(rows) // len(names)
    values = np.zeros((len(names), h, len(QUANTILE_LEVELS)))
    for r in rows:
        v = names.index(r[0])
        t = int(r[1])
        values[v, t] = [float(x) for x in r[2:]]
    return QuantileForecast(values=values, space="real"), names
