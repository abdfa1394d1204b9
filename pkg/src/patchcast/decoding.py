"""Contiguous patch masking: the training mask sampler, single-pass parallel
forecasting, and block decoding with median commits and KV-cache reuse.

Masking scan semantics: one masking probability p ~ U(0, p_max) per sequence;
scanning positions left to right, each not-yet-masked position starts a span
with probability p, of length c ~ U{1..c_max}, truncated at the sequence end.
At inference the masked set is the trailing horizon.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .model import Model, CapacityError
from .pipeline import PatchGrid
from .quantile import QuantileForecast, MEDIAN_IDX

DEFAULT_C_MAX = 16
DEFAULT_P_MAX = 0.4


@dataclass(frozen=True)
class MaskPlan:
    """A sampled set of contiguous masked spans over patch indices."""

    spans: tuple[tuple[int, int], ...]  # (start, length), non-overlapping, sorted
    sampled_p: float
    n_patches: int

    @property
    def masked_set(self) -> frozenset[int]:
        return frozenset(i for s, c in self.spans for i in range(s, s + c))

    @property
    def span_lengths(self) -> list[int]:
        return [c for _, c in self.spans]


def sample_mask(n_patches: int, rng: np.random.Generator,
                c_max: int = DEFAULT_C_MAX, p_max: float = DEFAULT_P_MAX) -> MaskPlan:
    """Sample a training MaskPlan. Defaults are the sweep optimum (c_max=16,
    p_max=0.4). Reproducible: the same rng state yields the same plan."""
    if n_patches < 1 or c_max < 1 or not (0.0 <= p_max <= 1.0):
        raise ValueError(f"bad mask-sampler arguments N={n_patches}, c_max={c_max}, p_max={p_max}")
    p = float(rng.uniform(0.0, p_max))
    spans: list[tuple[int, int]] = []
    i = 0
    while i < n_patches:
        if rng.uniform() < p:
            c = int(rng.integers(1, c_max + 1))
            c = min(c, n_patches - i)
            spans.append((i, c))
            i += c
        else:
            i += 1
    return MaskPlan(spans=tuple(spans), sampled_p=p, n_patches=n_patches)


def apply_mask(grid: PatchGrid, plan: MaskPlan) -> PatchGrid:
    """Zero the values of masked patches and set their mask channel to 1 for
    every variate. The caller keeps the original grid as the loss target."""
    if plan.n_patches != grid.n_patches:
        raise ValueError(f"plan covers {plan.n_patches} patches, grid has {grid.n_patches}")
    patches = grid.patches.copy()
    mask = grid.mask.copy()
    for start, length in plan.spans:
        patches[:, start:start + length, :] = 0.0
        mask[:, start:start + length, :] = 1.0
    return replace(grid, patches=patches, mask=mask)


class KVCache:
    """Per-layer time-attention keys/values for committed patches of ONE decode
    session. The variate-axis layer is never cached (it is non-causal and is
    recomputed each round). Evicting from the left supports sliding windows."""

    def __init__(self, model: Model, session: object):
        self.model_id = id(model)
        self.session = session
        self.n_layers = model.config.n_layers
        self._k: list[np.ndarray | None] = [None] * self.n_layers
        self._v: list[np.ndarray | None] = [None] * self.n_layers
        self.missing: np.ndarray | None = None  # (B, V, N_cached)
        self.positions: np.ndarray = np.zeros(0, dtype=int)

    @property
    def n_patches(self) -> int:
        return len(self.positions)

    def check_session(self, model: Model, session: object) -> None:
        if id(model) != self.model_id or session is not self.session:
            raise RuntimeError("KV cache reused across decode sessions")

    def layer(self, i: int) -> dict:
        return {"k": self._k[i], "v": self._v[i], "missing": self.missing,
                "positions": self.positions}

    def append(self, new_kv: list, missing: np.ndarray, positions: np.ndarray, upto: int) -> None:
        """Keep the first `upto` new patches' keys/values as committed context."""
        if upto == 0:
            return
        for i, kv in enumerate(new_kv):
            if kv is None:
                continue
            k, v = kv[0][:, :, :, :upto], kv[1][:, :, :, :upto]
            self._k[i] = k if self._k[i] is None else np.concatenate([self._k[i], k], axis=3)
            self._v[i] = v if self._v[i] is None else np.concatenate([self._v[i], v], axis=3)
        m = missing[:, :, :upto]
        self.missing = m if self.missing is None else np.concatenate([self.missing, m], axis=2)
        self.positions = np.concatenate([self.positions, positions[:upto]])

    def evict_before(self, first_pos: int) -> None:
        keep = self.positions >= first_pos
        if keep.all():
            return
        for i in range(self.n_layers):
            if self._k[i] is not None:
                self._k[i] = self._k[i][:, :, :, keep]
                self._v[i] = self._v[i][:, :, :, keep]
        self.missing = self.missing[:, :, keep]
        self.positions = self.positions[keep]

    def clear(self) -> None:
        self._k = [None] * self.n_layers
        self._v = [None] * self.n_layers
        self.missing = None
        self.positions = np.zeros(0, dtype=int)


def _masked_extension(grid: PatchGrid, k: int) -> PatchGrid:
    """Append k fully-masked horizon patches."""
    v_n, _, p = grid.patches.shape
    z = np.zeros((v_n, k, p), dtype=grid.patches.dtype)
    return replace(grid,
                   patches=np.concatenate([grid.patches, z], axis=1),
                   mask=np.concatenate([grid.mask, np.ones_like(z)], axis=1))


def _quantiles_at(out: np.ndarray, start: int, count: int) -> np.ndarray:
    """(V, count*P, 9) from head output (V, N, P, 9)."""
    v_n, _, p, q = out.shape
    return out[:, start:start + count].reshape(v_n, count * p, q)


def single_pass_forecast(model: Model, context: PatchGrid, k: int) -> QuantileForecast:
    """Forecast k patches in exactly one forward pass: append k fully-masked
    patches and read the head at those positions. Scaled space."""
    n = context.n_patches
    if n + k > model.config.max_patches:
        raise CapacityError(
            f"context {n} + horizon {k} patches exceeds capacity "
            f"{model.config.max_patches}; use block decoding (mode='block')"
        )
    ext = _masked_extension(context, k)
    out = model.forward_grid(ext)
    return QuantileForecast(values=_quantiles_at(out.data, n, k), space="scaled")


def block_decode(model: Model, context: PatchGrid, k: int, block: int,
                 use_cache: bool = True) -> QuantileForecast:
    """Forecast k patches in ceil(k/block) rounds, committing the sorted median
    of each round as observed context (mask channel cleared) for the next.

    Each round is one forward pass. With the cache on, time-attention keys and
    values of committed patches are reused; the first round is exactly the
    single-pass computation, so block == k reproduces single_pass_forecast
    bitwise. Beyond the model's capacity the context window slides left;
    cached entries keep the representations they were computed with.
    """
    if not (1 <= block <= k):
        raise ValueError(f"block size {block} must lie in [1, horizon {k}]")
    cap = model.config.max_patches
    if block >= cap:
        raise CapacityError(f"block size {block} needs at least one context patch (capacity {cap})")

    session = object()
    cache = KVCache(model, session) if use_cache else None
    work = replace(context, patches=context.patches.copy(), mask=context.mask.copy())
    chunks: list[np.ndarray] = []
    base = 0  # absolute patch index of work's first patch
    done = 0
    while done < k:
        b = min(block, k - done)
        # slide the window so context + new masked block fits capacity
        overflow = work.n_patches + b - cap
        if overflow > 0:
            work = replace(work, patches=work.patches[:, overflow:], mask=work.mask[:, overflow:])
            base += overflow
        ext = _masked_extension(work, b)
        n_ctx = work.n_patches
        if cache is not None:
            cache.check_session(model, session)
            cache.evict_before(base)
            # everything not in the cache is new: uncached context (round 1, or
            # the medians committed last round) plus the fresh masked block
            new_start = cache.n_patches
            n_commit = n_ctx - new_start
            new_patches = ext.patches[:, new_start:]
            new_mask = ext.mask[:, new_start:]
            positions = np.arange(base + new_start, base + n_ctx + b)
            out_t, new_kv, missing = model.forward(
                new_patches, new_mask, positions=positions, kv_cache=cache
            )
            cache.append(new_kv, missing, positions, upto=n_commit)
            q = _quantiles_at(out_t.data[0], n_commit, b)
        else:
            # same absolute positions as the cached path so both modes agree
            out = model.forward(ext.patches, ext.mask,
                                positions=np.arange(base, base + n_ctx + b))
            q = _quantiles_at(out.data[0], n_ctx, b)
        chunks.append(q)
        # commit sorted tau=0.5 in scaled space, clear the mask channel
        med = np.sort(q, axis=-1)[..., MEDIAN_IDX]
        v_n = work.n_variates
        p = model.config.patch_size
        med_patches = med.reshape(v_n, b, p).astype(work.patches.dtype)
        work = replace(work,
                       patches=np.concatenate([work.patches, med_patches], axis=1),
                       mask=np.concatenate([work.mask, np.zeros_like(med_patches)], axis=1))
        pending = b
        done += b
    return QuantileForecast(values=np.concatenate(chunks, axis=1), space="scaled")
