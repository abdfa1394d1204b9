"""patchcast: a desk-scale patched time-series forecasting stack.

Numpy-backed components: a minimal reverse-mode autodiff core, a
width-transferable parametrization, a causal scaling pipeline, a dual-axis
patched transformer, span-mask training and parallel decoding, a nine-level
quantile head, an orthogonalizing matrix optimizer, synthetic generators,
probabilistic forecast metrics, and a training/sweep/forecast harness.
"""

from .autodiff import Tensor, finite_diff_check, no_grad
from .decoding import MaskPlan, KVCache, apply_mask, block_decode, sample_mask, single_pass_forecast
from .harness import RunConfig, SweepSpec, forecast_series, long_horizon_study, mu_check, sweep, train
from .model import GEOMETRY_PRESETS, CapacityError, Model, ModelConfig, config_from_preset
from .mup import MuMetadata, ResidualScales, effective_weight, init_param, residual_scales, update_multiplier
from .optim import Schedule, clip_gradients, normuon_step, adamw_step, orthogonalize, wsd_lr
from .pipeline import PatchGrid, RawSeries, ScaledSeries, arcsinh_transform, causal_scale, forward_fill, inverse_transform, patchify
from .quantile import QUANTILE_LEVELS, QuantileForecast, clamp_forecast, pinball, pinball_grad, quantile_loss, sort_quantiles
from .synth import GeneratorSpec, MixtureConfig, gen_sinusoid_mixture, gen_stochastic_prior, sample_source, validate_mixture

__version__ = "0.1.0"
