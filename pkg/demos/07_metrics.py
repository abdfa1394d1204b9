"""Scoring probabilistic forecasts: CRPS, MASE, OWA, and average ranks.

CRPS here is the quantile approximation (twice the mean pinball over the nine
deciles), MASE normalizes against the in-sample seasonal-naive error, and OWA
averages both ratios against the seasonal-naive baseline, which scores exactly
1.0 by construction.
"""

import numpy as np

from patchcast.harness import evaluate_forecast
from patchcast.metrics import rank_models, seasonal_naive_quantiles
from patchcast.quantile import QUANTILE_LEVELS, QuantileForecast
from patchcast.synth import GeneratorSpec, gen_sinusoid_mixture

rng = np.random.default_rng(0)
family = GeneratorSpec(periods=[24.0], amplitudes=[2.0], noise_std=0.3)
series = gen_sinusoid_mixture(family, 360, rng)
insample, truth = series.values[:, :300], series.values[:, 300:]
horizon = truth.shape[1]
season = 24

def noisy_forecast(quality):
    """A synthetic forecaster: the truth blurred by `quality` noise."""
    center = truth + rng.normal(0, quality, size=truth.shape)
    spread = np.abs(rng.normal(0, quality, size=truth.shape)) + quality
    qs = center[..., None] + spread[..., None] * (QUANTILE_LEVELS - 0.5) * 2.5
    return QuantileForecast(values=np.sort(qs, axis=-1), space="real")

models = {"sharp": 0.1, "decent": 0.5, "sloppy": 1.5}
print(f"{'model':<16}{'CRPS':>8}{'MASE':>8}{'OWA':>8}")
per_dataset = {}
for name, quality in models.items():
    scores = evaluate_forecast(noisy_forecast(quality), truth, insample, season)
    print(f"{name:<16}{scores['crps'].value:>8.3f}{scores['mase'].value:>8.3f}"
          f"{scores['owa'].value:>8.3f}")
    per_dataset.setdefault("demo", {})[name] = scores["crps"]

naive = seasonal_naive_quantiles(insample, horizon, season)
scores = evaluate_forecast(naive, truth, insample, season)
print(f"{'seasonal naive':<16}{scores['crps'].value:>8.3f}{scores['mase'].value:>8.3f}"
      f"{scores['owa'].value:>8.3f}   (OWA exactly 1 by construction)")

print("\naverage CRPS ranks over four bootstrapped datasets:")
datasets = {}
for d in range(4):
    datasets[f"d{d}"] = {name: evaluate_forecast(noisy_forecast(q), truth, insample,
                                                 season)["crps"]
                         for name, q in models.items()}
for model, rank in sorted(rank_models(datasets).items(), key=lambda kv: kv[1]):
    print(f"  {model:<10} {rank:.2f}")
