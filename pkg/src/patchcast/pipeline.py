"""Input pipeline: gap filling, causal location/scale, arcsinh compression,
patchification with a mask channel, and the inverse map back to real space.

Series are (variates, T) arrays with a parallel boolean observed grid. The
causal scaler keeps running mean/std over observed points, frozen within each
patch (statistics for patch k use only observations strictly before the patch
start), so training and decoding see identical normalization.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

PATCH_SIZE = 32
SCALE_FLOOR = 1e-10
BACKFILL_MIN_OBS = 8


@dataclass
class RawSeries:
    """A multivariate series with per-point observed flags."""

    values: np.ndarray  # (V, T)
    observed: np.ndarray  # (V, T) bool
    interval: str = ""
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        self.observed = np.atleast_2d(np.asarray(self.observed, dtype=bool))
        if self.values.shape != self.observed.shape:
            raise ValueError(f"values {self.values.shape} / observed {self.observed.shape} mismatch")
        if self.values.shape[1] < 1:
            raise ValueError("series needs at least one timestep")
        if not np.all(np.isfinite(self.values[self.observed])):
            raise ValueError("observed values must be finite")
        if not self.names:
            self.names = [f"v{i}" for i in range(self.values.shape[0])]

    @property
    def n_variates(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]


@dataclass
class ScaledSeries:
    """Per-point z = (x - loc) / scale with the causal statistics that made it."""

    z: np.ndarray  # (V, T)
    loc: np.ndarray  # (V, T)
    scale: np.ndarray  # (V, T), >= SCALE_FLOOR
    observed: np.ndarray  # (V, T) bool


@dataclass
class PatchGrid:
    """Patched model input: values plus the binary mask channel.

    mask is 1 exactly where an entry is unobserved or span-masked, 0 elsewhere.
    `pad_steps` records left-padding added to reach a multiple of the patch size.
    """

    patches: np.ndarray  # (V, N, P)
    mask: np.ndarray  # (V, N, P) in {0, 1}
    patch_size: int = PATCH_SIZE
    pad_steps: int = 0

    @property
    def n_variates(self) -> int:
        return self.patches.shape[0]

    @property
    def n_patches(self) -> int:
        return self.patches.shape[1]

    def missing_patches(self) -> np.ndarray:
        """(V, N) bool: patches with every entry masked."""
        return self.mask.astype(bool).all(axis=-1)


def forward_fill(series: RawSeries) -> RawSeries:
    """Fill gaps after the first observation with the last observed value and
    mark them observed; leading gaps stay unobserved."""
    values = series.values.copy()
    observed = series.observed.copy()
    for v in range(series.n_variates):
        obs_idx = np.flatnonzero(series.observed[v])
        if obs_idx.size == 0:
            continue
        first = obs_idx[0]
        # index of most recent observation at each t
        carry = np.maximum.accumulate(np.where(series.observed[v], np.arange(series.length), -1))
        fill = (~series.observed[v]) & (np.arange(series.length) > first)
        values[v, fill] = series.values[v, carry[fill]]
        observed[v, fill] = True
    return RawSeries(values=values, observed=observed, interval=series.interval,
                     names=list(series.names))


def causal_scale(series: RawSeries, patch_size: int = PATCH_SIZE,
                 min_obs: int = BACKFILL_MIN_OBS,
                 scale_floor: float = SCALE_FLOOR) -> ScaledSeries:
    """Running per-variate mean/std over observed points, frozen within patches.

    Patch k uses statistics over observations in patches < k. Leading patches
    with fewer than `min_obs` prior observations take the first statistics
    computed with >= `min_obs` observations (backfill). A variate with no
    observations gets loc 0 and the floor scale.
    """
    v_n, t_n = series.values.shape
    loc = np.zeros((v_n, t_n))
    scale = np.full((v_n, t_n), scale_floor)
    n_patches = -(-t_n // patch_size)
    for v in range(v_n):
        obs = series.observed[v]
        vals = np.where(obs, series.values[v], 0.0)
        cnt = np.cumsum(obs)
        s1 = np.cumsum(vals)
        s2 = np.cumsum(vals**2)

        def stats_at(c, a, b):
            # mean/std over the first observations summing to (c, a, b)
            mean = a / c
            var = max(b / c - mean**2, 0.0)
            return mean, max(np.sqrt(var), scale_floor)

        total = cnt[-1]
        if total == 0:
            continue
        # backfill target: statistics at the min_obs-th observation (or all of them)
        k_obs = min(min_obs, total)
        pos = np.searchsorted(cnt, k_obs)
        bf_loc, bf_scale = stats_at(cnt[pos], s1[pos], s2[pos])
        for k in range(n_patches):
            start = k * patch_size
            end = min(start + patch_size, t_n)
            prior = cnt[start - 1] if start > 0 else 0
            if prior >= min_obs:
                p_loc, p_scale = stats_at(prior, s1[start - 1], s2[start - 1])
            else:
                p_loc, p_scale = bf_loc, bf_scale
            loc[v, start:end] = p_loc
            scale[v, start:end] = p_scale
    z = np.where(series.observed, (series.values - loc) / scale, 0.0)
    return ScaledSeries(z=z, loc=loc, scale=scale, observed=series.observed.copy())


def arcsinh_transform(z):
    """log(z + sqrt(z^2 + 1)): odd, monotone, ~z near 0, ~sign(z) log(2|z|) far out."""
    return np.arcsinh(z)


def inverse_transform(q_scaled, loc, scale):
    """Exact inverse of scale-then-arcsinh: sinh(q) * scale + loc."""
    return np.sinh(q_scaled) * scale + loc


def apply_arcsinh(scaled: ScaledSeries) -> ScaledSeries:
    """Model-space series: arcsinh applied after location/scale normalization."""
    return replace(scaled, z=arcsinh_transform(scaled.z))


def patchify(scaled: ScaledSeries, patch_size: int = PATCH_SIZE) -> PatchGrid:
    """Split into contiguous non-overlapping patches; the mask channel is set
    from the observed flags. Left-pads with unobserved entries when T is not a
    multiple of the patch size, keeping recent data aligned with the last patch."""
    v_n, t_n = scaled.z.shape
    pad = (-t_n) % patch_size
    z = scaled.z
    obs = scaled.observed
    if pad:
        z = np.concatenate([np.zeros((v_n, pad)), z], axis=1)
        obs = np.concatenate([np.zeros((v_n, pad), dtype=bool), obs], axis=1)
    n = z.shape[1] // patch_size
    patches = z.reshape(v_n, n, patch_size)
    mask = (~obs).astype(np.float64).reshape(v_n, n, patch_size)
    return PatchGrid(patches=patches, mask=mask, patch_size=patch_size, pad_steps=pad)


def unpatchify(grid: PatchGrid) -> np.ndarray:
    """(V, T) values, with any left-padding stripped."""
    v_n, n, p = grid.patches.shape
    flat = grid.patches.reshape(v_n, n * p)
    return flat[:, grid.pad_steps:]


def read_series_csv(path) -> RawSeries:
    """One row per timestep, one column per variate, empty cell = unobserved."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = list(reader)
    t_n, v_n = len(rows), len(header)
    values = np.zeros((v_n, t_n))
    observed = np.zeros((v_n, t_n), dtype=bool)
    for t, row in enumerate(rows):
        for v in range(v_n):
            cell = row[v].strip() if v < len(row) else ""
            if cell:
                values[v, t] = float(cell)
                observed[v, t] = True
    return RawSeries(values=values, observed=observed, names=list(header))


def write_series_csv(path, series: RawSeries) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(series.names)
        for t in range(series.length):
            writer.writerow([
                repr(float(series.values[v, t])) if series.observed[v, t] else ""
                for v in range(series.n_variates)
            ])
