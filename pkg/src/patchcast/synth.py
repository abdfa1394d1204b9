"""Synthetic series: multi-scale sinusoidal mixtures, a simplified stochastic
prior (piecewise trend + changepoints + season + AR noise), and constrained
mixture sampling over named sources.

Everything is deterministic given (spec, rng) and emits fully-finite,
fully-observed series.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pipeline import RawSeries


@dataclass
class GeneratorSpec:
    kind: str = "sinusoid_mixture"  # "sinusoid_mixture" | "stochastic_prior"
    periods: list[float] = field(default_factory=lambda: [500.0, 100.0, 20.0])
    amplitudes: list[float] | None = None  # defaults to equal (1.0 each)
    noise_std: float = 0.05
    n_variates: int = 1
    # stochastic-prior knobs (ranges are lists so specs survive JSON round trips)
    changepoint_rate: float = 3.0  # expected changepoints per series
    trend_slope_scale: float = 2.0  # slopes ~ N(0, (scale/T)^2) per segment
    season_period_range: list[float] = field(default_factory=lambda: [8.0, 256.0])
    season_amp_range: list[float] = field(default_factory=lambda: [0.0, 1.0])
    ar_coeff_range: list[float] = field(default_factory=lambda: [0.0, 0.9])
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in ("sinusoid_mixture", "stochastic_prior"):
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.amplitudes is None:
            self.amplitudes = [1.0] * len(self.periods)
        if len(self.amplitudes) != len(self.periods):
            raise ValueError("periods and amplitudes must have the same length")
        if any(p <= 1 for p in self.periods):
            raise ValueError("periods must exceed 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


def gen_sinusoid_mixture(spec: GeneratorSpec, length: int, rng: np.random.Generator) -> RawSeries:
    """Sum of sinusoids with random phases plus Gaussian noise, fully observed."""
    if spec.periods and length < max(spec.periods):
        raise ValueError(f"length {length} shorter than max period {max(spec.periods)}")
    t = np.arange(length)
    values = np.zeros((spec.n_variates, length))
    for v in range(spec.n_variates):
        for period, amp in zip(spec.periods, spec.amplitudes):
            phase = rng.uniform(0.0, 2.0 * np.pi)
            values[v] += amp * np.sin(2.0 * np.pi * t / period + phase)
        if spec.noise_std > 0:
            values[v] += rng.normal(0.0, spec.noise_std, size=length)
    return RawSeries(values=values, observed=np.ones_like(values, dtype=bool))


def gen_stochastic_prior(spec: GeneratorSpec, length: int, rng: np.random.Generator) -> RawSeries:
    """Piecewise-linear trend with a Poisson number of changepoints, one random
    seasonal component, and AR(1) noise."""
    values = np.zeros((spec.n_variates, length))
    t = np.arange(length)
    for v in range(spec.n_variates):
        n_cp = rng.poisson(spec.changepoint_rate)
        cps = np.sort(rng.integers(1, max(length, 2), size=n_cp)) if n_cp else np.array([], dtype=int)
        bounds = np.concatenate([[0], cps, [length]])
        # continuous piecewise-linear trend: one slope per point, integrated
        point_slopes = np.zeros(length)
        for a, b in zip(bounds[:-1], bounds[1:]):
            if b > a:
                point_slopes[a:b] = rng.normal(0.0, spec.trend_slope_scale / max(length, 1))
        trend = rng.normal(0.0, 1.0) + np.concatenate([[0.0], np.cumsum(point_slopes[:-1])])
        lo, hi = spec.season_period_range
        period = rng.uniform(lo, hi)
        amp = rng.uniform(*spec.season_amp_range)
        season = amp * np.sin(2.0 * np.pi * t / period + rng.uniform(0.0, 2.0 * np.pi))
        noise = np.zeros(length)
        if spec.noise_std > 0:
            phi = rng.uniform(*spec.ar_coeff_range)
            eps = rng.normal(0.0, spec.noise_std, size=length)
            prev = 0.0
            for i in range(length):
                prev = phi * prev + eps[i]
                noise[i] = prev
        values[v] = trend + season + noise
    return RawSeries(values=values, observed=np.ones_like(values, dtype=bool))


def generate(spec: GeneratorSpec, length: int, rng: np.random.Generator) -> RawSeries:
    if spec.kind == "sinusoid_mixture":
        return gen_sinusoid_mixture(spec, length, rng)
    return gen_stochastic_prior(spec, length, rng)


@dataclass
class MixtureConfig:
    """Named source weights on a constrained probability simplex."""

    weights: dict[str, float]
    bounds: dict[str, tuple[float, float]] = field(default_factory=dict)

    def names(self) -> list[str]:
        return sorted(self.weights)


def validate_mixture(config: MixtureConfig, tol: float = 1e-9) -> list[str]:
    """Bound and simplex violations, one message each; empty list = valid."""
    violations = []
    total = sum(config.weights.values())
    if abs(total - 1.0) > tol:
        violations.append(f"sum != 1 (got {total})")
    for name, w in sorted(config.weights.items()):
        if w < 0:
            violations.append(f"{name}: negative weight {w}")
        lo, hi = config.bounds.get(name, (0.0, 1.0))
        if not (lo - tol <= w <= hi + tol):
            violations.append(f"{name}: weight {w} outside bounds [{lo}, {hi}]")
    return violations


def sample_source(config: MixtureConfig, rng: np.random.Generator) -> str:
    """Categorical draw over source names with the configured weights."""
    violations = validate_mixture(config)
    if violations:
        raise ValueError("invalid mixture: " + "; ".join(violations))
    names = config.names()
    probs = np.array([config.weights[n] for n in names])
    return names[rng.choice(len(names), p=probs / probs.sum())]
