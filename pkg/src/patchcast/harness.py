"""Run orchestration: span-mask training, hyperparameter sweeps, the
learning-rate transfer check across widths, forecasting, latency measurement,
and the long-horizon stability study.

Every entry point is deterministic given (config, seed), wall-clock fields
excluded. Defaults follow the tuned optimum where one exists (optimizer,
schedule shape, masking parameters); geometry and step counts default to
desk-scale presets.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from .autodiff import Tensor
from .decoding import (
    DEFAULT_C_MAX,
    DEFAULT_P_MAX,
    block_decode,
    sample_mask,
    apply_mask,
    single_pass_forecast,
)
from .metrics import (
    Score,
    build_report,
    crps_quantile,
    mase,
    owa,
    pearson,
    seasonal_naive,
    seasonal_naive_quantiles,
)
from .model import GEOMETRY_PRESETS, CapacityError, Model, ModelConfig
from .optim import CLIP_THRESHOLD, Schedule, TrainingOptimizer, clip_gradients, wsd_lr
from .pipeline import (
    RawSeries,
    apply_arcsinh,
    causal_scale,
    forward_fill,
    patchify,
    read_series_csv,
    write_series_csv,
)
from .quantile import (
    QUANTILE_LEVELS,
    QuantileForecast,
    clamp_forecast,
    sort_quantiles,
    write_forecast_csv,
)
from .synth import GeneratorSpec, MixtureConfig, generate, sample_source

# Proxy-scale schedule optimum; shorter runs scale these proportions.
REFERENCE_STEPS = 30000
REFERENCE_WARMUP = 6000
REFERENCE_DECAY = 10500


@dataclass
class RunConfig:
    geometry: str = "64/4/1"
    context_length: int = 512
    patch_size: int = 32
    max_variates: int = 32
    parametrization: str = "ump"
    dtype: str = "float32"
    norm_eps: float = 1e-4

    # optimizer (tuned optimum)
    normuon_eta: float = 0.65
    normuon_mu: float = 0.96
    normuon_beta2: float = 0.999
    normuon_weight_decay: float = 2e-8
    adamw_eta: float = 0.012
    adamw_beta1: float = 0.91
    adamw_beta2: float = 0.972
    clip_threshold: float = CLIP_THRESHOLD

    # schedule; None = scale the 6000/10500-of-30000 proportions to `steps`
    steps: int = 2000
    warmup_steps: int | None = None
    decay_steps: int | None = None
    decay_shape: str = "linear"

    # masking
    c_max: int = DEFAULT_C_MAX
    p_max: float = DEFAULT_P_MAX
    loss_only_masked: bool = False

    # data
    sources: dict = field(default_factory=lambda: {
        "sinusoids": asdict(GeneratorSpec(kind="sinusoid_mixture",
                                          periods=[64.0, 32.0, 16.0], noise_std=0.05))
    })
    mixture: dict = field(default_factory=lambda: {"sinusoids": 1.0})

    batch_size: int = 8
    seed: int = 0
    out_dir: str = "runs/default"

    # validation
    val_horizon: int = 64
    val_series: int = 8
    val_season: int = 16

    def model_config(self) -> ModelConfig:
        geo = GEOMETRY_PRESETS[self.geometry]
        return ModelConfig(context_length=self.context_length, patch_size=self.patch_size,
                           max_variates=self.max_variates, parametrization=self.parametrization,
                           dtype=self.dtype, norm_eps=self.norm_eps, **geo)

    def schedule(self) -> Schedule:
        warmup = self.warmup_steps
        decay = self.decay_steps
        if warmup is None:
            warmup = REFERENCE_WARMUP if self.steps >= REFERENCE_STEPS else round(
                self.steps * REFERENCE_WARMUP / REFERENCE_STEPS)
        if decay is None:
            decay = REFERENCE_DECAY if self.steps >= REFERENCE_STEPS else round(
                self.steps * REFERENCE_DECAY / REFERENCE_STEPS)
        return Schedule(total_steps=self.steps, warmup_steps=warmup, decay_steps=decay,
                        decay_shape=self.decay_shape)

    def generator_specs(self) -> dict[str, GeneratorSpec]:
        return {name: GeneratorSpec(**spec) for name, spec in self.sources.items()}

    def mixture_config(self) -> MixtureConfig:
        return MixtureConfig(weights=dict(self.mixture))

    def to_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=1)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as f:
            return cls(**json.load(f))


@dataclass
class TrainResult:
    losses: np.ndarray
    lr_multipliers: np.ndarray
    grad_norms: np.ndarray
    checkpoint_dir: str | None
    config: RunConfig
    model: Model | None = None


def sample_training_batch(config: RunConfig, specs, mixture, rng):
    """One batch: per sample, draw a source, generate, scale, patchify, and
    apply a fresh mask plan (shared across the sample's variates).

    Returns (masked values, masked mask, targets, weights), all (B, V, N, P).
    """
    patches, masks, targets, weights = [], [], [], []
    for _ in range(config.batch_size):
        name = sample_source(mixture, rng)
        series = generate(specs[name], config.context_length, rng)
        grid = patchify(apply_arcsinh(causal_scale(forward_fill(series), config.patch_size)),
                        config.patch_size)
        plan = sample_mask(grid.n_patches, rng, config.c_max, config.p_max)
        masked = apply_mask(grid, plan)
        w = 1.0 - grid.mask  # only originally-observed entries carry loss
        if config.loss_only_masked:
            w = w * masked.mask
        patches.append(masked.patches)
        masks.append(masked.mask)
        targets.append(grid.patches)
        weights.append(w)
    return (np.stack(patches), np.stack(masks), np.stack(targets), np.stack(weights))


def training_loss(model: Model, tensors, patches, masks, targets, weights) -> Tensor:
    """Masked mean pinball over the nine levels and all observed positions."""
    out = model.forward(patches, masks, tensors=tensors)
    elems = out.pinball(targets[..., None], QUANTILE_LEVELS)
    total_w = float(weights.sum())
    if total_w == 0.0:
        return elems.sum() * 0.0
    return (elems * weights[..., None]).sum() * (1.0 / (total_w * len(QUANTILE_LEVELS)))


def train(config: RunConfig, save: bool = True, log_every: int = 0) -> TrainResult:
    """Span-mask training: sample batch -> scale -> patchify -> mask -> forward
    -> pinball loss -> clip -> partitioned optimizer steps under the WSD
    schedule. Seed-deterministic; aborts with diagnostics on non-finite loss."""
    rng = np.random.default_rng(config.seed)
    model = Model(config.model_config(), seed=config.seed)
    optimizer = TrainingOptimizer(
        model, eta_matrix=config.normuon_eta, eta_other=config.adamw_eta,
        normuon_kw=dict(mu=config.normuon_mu, beta2=config.normuon_beta2,
                        weight_decay=config.normuon_weight_decay),
        adamw_kw=dict(beta1=config.adamw_beta1, beta2=config.adamw_beta2),
    )
    schedule = config.schedule()
    specs = config.generator_specs()
    mixture = config.mixture_config()

    losses = np.zeros(config.steps)
    mults = np.zeros(config.steps)
    norms = np.zeros(config.steps)
    for step in range(config.steps):
        batch = sample_training_batch(config, specs, mixture, rng)
        tensors = model.make_tensors(requires_grad=True)
        loss = training_loss(model, tensors, *batch)
        loss_val = float(loss.data)
        mult = wsd_lr(schedule, step)
        if not math.isfinite(loss_val):
            raise RuntimeError(
                f"non-finite loss at step {step}: loss={loss_val}, "
                f"lr_multiplier={mult}, last_grad_norm={norms[step - 1] if step else 0.0}"
            )
        loss.backward()
        grads = {n: t.grad for n, t in tensors.items() if t.grad is not None}
        gnorm = clip_gradients(grads, config.clip_threshold)
        optimizer.step(grads, mult)
        losses[step], mults[step], norms[step] = loss_val, mult, gnorm
        if log_every and (step % log_every == 0 or step == config.steps - 1):
            print(f"step {step:6d}  loss {loss_val:.5f}  lr_mult {mult:.3f}  gnorm {gnorm:.3f}")

    ckpt = None
    if save:
        os.makedirs(config.out_dir, exist_ok=True)
        ckpt = os.path.join(config.out_dir, "checkpoint")
        model.save(ckpt)
        config.to_json(os.path.join(config.out_dir, "config.json"))
        with open(os.path.join(config.out_dir, "loss.csv"), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "loss", "lr_multiplier", "grad_norm"])
            for i in range(config.steps):
                writer.writerow([i, repr(float(losses[i])), repr(float(mults[i])), repr(float(norms[i]))])
    return TrainResult(losses=losses, lr_multipliers=mults, grad_norms=norms,
                       checkpoint_dir=ckpt, config=config, model=model)


# -- forecasting -----------------------------------------------------------------


@dataclass
class ForecastOutput:
    forecast: QuantileForecast  # real space, sorted, clamped
    names: list[str]
    truth_scaler: tuple[np.ndarray, np.ndarray]  # (loc, scale) at final context position


def forecast_series(model: Model, series: RawSeries, horizon: int,
                    mode: str = "single_pass", block_size: int | None = None) -> ForecastOutput:
    """Full inference pipeline: forward-fill, causal scale, arcsinh, patchify,
    decode, sort, inverse-transform, clamp."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    p = model.config.patch_size
    k = -(-horizon // p)
    filled = forward_fill(series)
    scaled = causal_scale(filled, p)
    grid = patchify(apply_arcsinh(scaled), p)

    cap = model.config.max_patches
    if mode == "single_pass":
        if k >= cap:
            raise CapacityError(
                f"horizon {horizon} needs {k} patches, capacity is {cap}; use block mode"
            )
        if grid.n_patches + k > cap:
            keep = cap - k
            grid = replace(grid, patches=grid.patches[:, -keep:], mask=grid.mask[:, -keep:])
        fc = single_pass_forecast(model, grid, k)
    elif mode == "block":
        b = block_size or min(k, max(1, cap // 4))
        b = min(b, k)
        fc = block_decode(model, grid, k, b)
    else:
        raise ValueError(f"unknown decode mode {mode!r}")

    fc = sort_quantiles(fc)
    loc = scaled.loc[:, -1][:, None, None]
    scale = scaled.scale[:, -1][:, None, None]
    real = QuantileForecast(values=np.sinh(fc.values) * scale + loc, space="real")
    obs = filled.observed
    ctx_min = np.array([filled.values[v][obs[v]].min() if obs[v].any() else 0.0
                        for v in range(filled.n_variates)])
    ctx_max = np.array([filled.values[v][obs[v]].max() if obs[v].any() else 0.0
                        for v in range(filled.n_variates)])
    real = clamp_forecast(real, ctx_min, ctx_max, scaled.scale[:, -1])
    real = QuantileForecast(values=real.values[:, :horizon], space="real")
    return ForecastOutput(forecast=real, names=list(series.names),
                          truth_scaler=(scaled.loc[:, -1], scaled.scale[:, -1]))


def forecast_to_csv(model: Model, series_csv: str, horizon: int, out_csv: str,
                    mode: str = "single_pass", block_size: int | None = None) -> ForecastOutput:
    series = read_series_csv(series_csv)
    out = forecast_series(model, series, horizon, mode, block_size)
    write_forecast_csv(out_csv, out.forecast, out.names)
    return out


# -- evaluation --------------------------------------------------------------------


def evaluate_forecast(forecast: QuantileForecast, truth: np.ndarray, insample: np.ndarray,
                      season_length: int = 1) -> dict[str, Score]:
    """CRPS / MASE / OWA for one (forecast, truth) pair against the
    seasonal-naive baseline computed from the in-sample series."""
    horizon = truth.shape[-1]
    naive_point = seasonal_naive(insample, horizon, season_length)
    naive_q = seasonal_naive_quantiles(insample, horizon, season_length)
    med = np.sort(forecast.values, axis=-1)[..., 4]
    scores = {
        "crps": crps_quantile(forecast, truth),
        "mase": mase(med, truth, insample, season_length),
    }
    naive_scores = {
        "crps": crps_quantile(naive_q, truth),
        "mase": mase(naive_point, truth, insample, season_length),
    }
    scores["owa"] = owa(scores["mase"], scores["crps"],
                        naive_scores["mase"], naive_scores["crps"])
    scores["naive_crps"] = naive_scores["crps"]
    scores["naive_mase"] = naive_scores["mase"]
    return scores


def evaluate_files(forecast_csv: str, truth_csv: str, insample_csv: str,
                   season_length: int = 1, out_dir: str | None = None):
    """Score a forecast CSV against truth/insample series CSVs; emit the report
    as JSON and flat CSV when out_dir is given."""
    from .quantile import read_forecast_csv

    fc, _ = read_forecast_csv(forecast_csv)
    truth = read_series_csv(truth_csv)
    insample = read_series_csv(insample_csv)
    scores = evaluate_forecast(fc, truth.values[:, :fc.horizon], insample.values, season_length)
    report = build_report({"eval": {"model": {k: v for k, v in scores.items()
                                              if not k.startswith("naive_")}}})
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        report.to_json(os.path.join(out_dir, "metrics.json"))
        report.to_csv(os.path.join(out_dir, "metrics.csv"))
    return scores, report


# -- sweeps and the width-transfer check ---------------------------------------------


@dataclass
class SweepSpec:
    grid: dict[str, list]  # config field -> candidate values
    objective: str = "pinball"  # "pinball" | "crps" | "mase"
    trials: int | None = None  # None = full grid

    def __post_init__(self):
        if not self.grid or any(len(v) == 0 for v in self.grid.values()):
            raise ValueError("sweep grid needs at least one parameter with candidate values")
        size = 1
        for v in self.grid.values():
            size *= len(v)
        if self.trials is not None and self.trials < 1:
            raise ValueError("trial budget must be >= 1")


def _grid_points(grid: dict[str, list]) -> list[dict]:
    points = [{}]
    for key in sorted(grid):
        points = [dict(p, **{key: v}) for p in points for v in grid[key]]
    return points


def validation_objective(model: Model, config: RunConfig, objective: str) -> float:
    """Held-out objective on a generator seed disjoint from training."""
    rng = np.random.default_rng(config.seed + 991)
    specs = config.generator_specs()
    mixture = config.mixture_config()
    if objective == "pinball":
        cfg = replace(config, batch_size=config.val_series)
        batch = sample_training_batch(cfg, specs, mixture, rng)
        return float(training_loss(model, model.make_tensors(False), *batch).data)
    # forecast-based objectives, normalized by the seasonal-naive baseline
    vals = []
    for _ in range(config.val_series):
        name = sample_source(mixture, rng)
        series = generate(specs[name], config.context_length + config.val_horizon, rng)
        ctx = RawSeries(values=series.values[:, :config.context_length],
                        observed=series.observed[:, :config.context_length],
                        names=list(series.names))
        truth = series.values[:, config.context_length:]
        out = forecast_series(model, ctx, config.val_horizon, mode="single_pass")
        scores = evaluate_forecast(out.forecast, truth, ctx.values, config.val_season)
        s, ns = scores[objective], scores[f"naive_{objective}"]
        if s.value is not None and ns.value not in (None, 0.0):
            vals.append(s.value / ns.value)
    return float(np.mean(vals)) if vals else float("inf")


def sweep(spec: SweepSpec, base_config: RunConfig, out_csv: str | None = None) -> list[dict]:
    """Grid (or seeded random subset) search; each trial trains and scores on a
    held-out generator seed. Failures are recorded and the sweep continues."""
    points = _grid_points(spec.grid)
    if spec.trials is not None and spec.trials < len(points):
        rng = np.random.default_rng(base_config.seed)
        idx = rng.choice(len(points), size=spec.trials, replace=False)
        points = [points[i] for i in sorted(idx)]
    rows = []
    for i, point in enumerate(points):
        cfg = replace(base_config, **point,
                      out_dir=os.path.join(base_config.out_dir, f"trial{i:03d}"))
        row = dict(trial=i, **point)
        try:
            result = train(cfg, save=False)
            row["objective"] = validation_objective(result.model, cfg, spec.objective)
            row["final_loss"] = float(result.losses[-min(100, cfg.steps):].mean())
            row["error"] = ""
        except Exception as exc:  # noqa: BLE001 - trial failures are data
            row.update(objective=float("inf"), final_loss=float("inf"), error=str(exc))
        rows.append(row)
    if out_csv:
        _write_rows(out_csv, rows)
    return rows


def best_trial(rows: list[dict]) -> dict:
    return min(rows, key=lambda r: r["objective"])


def mu_check(widths: list[int], lr_grid: list[float], base_config: RunConfig,
             out_csv: str | None = None, log_every: int = 0) -> dict:
    """Learning-rate transfer report: train at every (width, lr), record the
    final training loss, and measure how far the per-width argmin drifts.

    `final loss` is the mean over the last 100 steps (or the last 10%% for very
    short runs). Diverged runs score +inf and stay in the table.
    """
    if len(widths) < 3 or len(lr_grid) < 5:
        raise ValueError("need at least 3 widths and 5 learning-rate grid points")
    rows = []
    argmin: dict[int, int] = {}
    for width in widths:
        if width % 64 != 0:
            raise ValueError(f"width {width} not a multiple of the 64 head dim")
        geometry_key = f"mu{width}"
        GEOMETRY_PRESETS[geometry_key] = dict(d_model=width, n_layers=4, n_heads=width // 64)
        best, best_i = float("inf"), -1
        for i, lr in enumerate(lr_grid):
            cfg = replace(base_config, geometry=geometry_key, normuon_eta=lr,
                          out_dir=os.path.join(base_config.out_dir, f"w{width}_lr{i}"))
            t0 = time.perf_counter()
            try:
                result = train(cfg, save=False)
                tail = max(10, min(100, cfg.steps // 10))
                final = float(result.losses[-tail:].mean())
            except (RuntimeError, FloatingPointError) as exc:
                final = float("inf")
            rows.append(dict(width=width, lr=lr, final_loss=final,
                             seconds=time.perf_counter() - t0))
            if log_every:
                print(f"width {width:4d}  lr {lr:<10.6g} final loss {final:.5f} "
                      f"({rows[-1]['seconds']:.1f}s)")
            if final < best:
                best, best_i = final, i
        argmin[width] = best_i
    drift = max(abs(argmin[a] - argmin[b]) for a in widths for b in widths)
    report = {"rows": rows, "argmin_index": argmin,
              "argmin_lr": {w: lr_grid[i] for w, i in argmin.items()},
              "max_drift_steps": drift,
              "parametrization": base_config.parametrization}
    if out_csv:
        _write_rows(out_csv, rows)
    return report


# -- latency and the long-horizon study -------------------------------------------------


def bench_latency(model: Model, horizons: list[int], modes: list[str],
                  block_size: int = 4, context_patches: int | None = None,
                  repeats: int = 5, warmups: int = 2, seed: int = 0) -> list[dict]:
    """Median wall-clock of >= `repeats` runs after warmups, plus the exact
    forward-pass count, for each (horizon, mode)."""
    p = model.config.patch_size
    cap = model.config.max_patches
    rng = np.random.default_rng(seed)
    rows = []
    for horizon in horizons:
        k = -(-horizon // p)
        n_ctx = context_patches or max(1, min(cap - k, cap // 2))
        spec = GeneratorSpec(periods=[], noise_std=1.0)
        series = generate(spec, n_ctx * p, rng)
        grid = patchify(apply_arcsinh(causal_scale(series, p)), p)
        for mode in modes:
            def run():
                if mode == "single_pass":
                    return single_pass_forecast(model, grid, k)
                return block_decode(model, grid, k, min(block_size, k))

            for _ in range(warmups):
                run()
            before = model.forward_calls
            run()
            passes = model.forward_calls - before
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                run()
                times.append(time.perf_counter() - t0)
            rows.append(dict(horizon=horizon, mode=mode,
                             block_size=(block_size if mode == "block" else ""),
                             forward_passes=passes,
                             median_seconds=float(np.median(times))))
    return rows


def long_horizon_study(model: Model, horizons=(2048, 4096, 8192), n_series: int = 20,
                       block_size: int | None = None, seed: int = 0,
                       periods=(500.0, 100.0, 20.0), out_dir: str | None = None) -> list[dict]:
    """Block-decode held-out multi-scale sinusoid mixtures far past the training
    context; report Pearson r of the median forecast per (horizon, series),
    plus a truth-vs-itself control row per horizon."""
    p = model.config.patch_size
    ctx_len = model.config.context_length
    spec = GeneratorSpec(periods=list(periods), noise_std=0.05)
    rows = []
    b = block_size or max(1, model.config.max_patches // 4)
    for horizon in horizons:
        rng = np.random.default_rng(seed)
        for s_idx in range(n_series):
            series = generate(spec, ctx_len + horizon, rng)
            ctx = RawSeries(values=series.values[:, :ctx_len],
                            observed=series.observed[:, :ctx_len])
            truth = series.values[:, ctx_len:]
            out = forecast_series(model, ctx, horizon, mode="block", block_size=b)
            med = out.forecast.median()
            r = pearson(med[0], truth[0])
            rows.append(dict(horizon=horizon, series=s_idx,
                             pearson=(float("nan") if r.absent else r.value)))
            if out_dir and s_idx == 0:
                os.makedirs(out_dir, exist_ok=True)
                write_forecast_csv(os.path.join(out_dir, f"forecast_h{horizon}.csv"),
                                   out.forecast)
                write_series_csv(os.path.join(out_dir, f"truth_h{horizon}.csv"),
                                 RawSeries(values=truth, observed=np.ones_like(truth, bool)))
        control = pearson(truth[0], truth[0])
        rows.append(dict(horizon=horizon, series="control",
                         pearson=control.value))
    if out_dir:
        _write_rows(os.path.join(out_dir, "pearson.csv"), rows)
    return rows


def _write_rows(path, rows: list[dict]) -> None:
    if not rows:
        return
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
