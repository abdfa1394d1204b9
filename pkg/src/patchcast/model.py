"""Decoder-only patched transformer with alternating time-axis (causal) and
variate-axis (full) attention.

Residual SiLU patch embedding and quantile read-out, rotary positions on the
time axis only (variate attention stays permutation-equivariant), PerDimScale
query scaling with 1/d_k logit scaling, pre-norm RMS blocks, missing-patch
key masking, biases on attention projections only, no dropout anywhere.
Weights are unit-scale leaves carrying MuMetadata; the forward pass applies
the effective-weight multipliers.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, asdict

import numpy as np

from .autodiff import Tensor, ShapeError, concat, no_grad
from .mup import (
    MuMetadata,
    ResidualScales,
    make_metadata,
    init_param,
    readout_multiplier,
    residual_scales,
)
from .pipeline import PatchGrid
from .quantile import QUANTILE_LEVELS

NEG_FILL = -1e30


class CapacityError(ValueError):
    """Input exceeds the model's patch capacity."""


@dataclass
class ModelConfig:
    d_model: int = 256
    n_layers: int = 12
    n_heads: int = 4
    d_head: int = 64
    patch_size: int = 32
    context_length: int = 4096
    variate_attn_position: int | None = None  # 1-indexed; defaults to last layer
    max_variates: int = 32
    norm_eps: float = 1e-4
    mlp_ratio: int = 4
    rope_base: float = 10000.0
    alpha_res: float = 0.75
    parametrization: str = "ump"  # "ump" | "standard"
    dtype: str = "float32"

    def __post_init__(self):
        if self.variate_attn_position is None:
            self.variate_attn_position = self.n_layers
        if self.n_heads * self.d_head != self.d_model:
            raise ValueError(f"n_heads*d_head = {self.n_heads * self.d_head} != d_model {self.d_model}")
        if not (1 <= self.variate_attn_position <= self.n_layers):
            raise ValueError("variate_attn_position must lie in [1, n_layers]")
        if self.context_length % self.patch_size != 0:
            raise ValueError("context_length must be divisible by patch_size")
        if self.parametrization not in ("ump", "standard"):
            raise ValueError(f"unknown parametrization {self.parametrization!r}")

    @property
    def max_patches(self) -> int:
        return self.context_length // self.patch_size

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


# Geometry presets: d_model / layers / heads, head dim fixed at 64.
GEOMETRY_PRESETS = {
    "64/4/1": dict(d_model=64, n_layers=4, n_heads=1),
    "128/6/2": dict(d_model=128, n_layers=6, n_heads=2),
    "256/12/4": dict(d_model=256, n_layers=12, n_heads=4),
    "proxy-10m": dict(d_model=256, n_layers=12, n_heads=4),
}


@dataclass
class Parameter:
    name: str
    data: np.ndarray
    meta: MuMetadata


class Model:
    """Weights plus forward pass. Immutable during forward; one training step
    mutates weights exclusively through the optimizer."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.scales: ResidualScales = residual_scales(
            config.context_length, config.patch_size, config.alpha_res
        )
        self.params: dict[str, Parameter] = {}
        self.forward_calls = 0
        self._init_weights(np.random.default_rng(seed))

    # -- construction --------------------------------------------------------

    def _add(self, name: str, data: np.ndarray, meta: MuMetadata) -> None:
        self.params[name] = Parameter(name=name, data=np.asarray(data, dtype=self.config.np_dtype), meta=meta)

    def _matrix(self, name: str, shape: tuple[int, int], kind: str, rng) -> None:
        if self.config.parametrization == "ump":
            leaf, meta = init_param(shape, kind, rng, dtype=self.config.np_dtype)
        else:
            # standard parametrization: scaled init, unit multipliers
            leaf = rng.standard_normal(shape).astype(self.config.np_dtype) / math.sqrt(shape[1])
            meta = MuMetadata(fan_in=shape[1], fan_out=shape[0], kind=kind,
                              forward_multiplier=1.0, update_multiplier_base=1.0)
        self._add(name, leaf, meta)

    def _vector(self, name: str, n: int, kind: str, init: float) -> None:
        meta = make_metadata((n,), kind)
        self._add(name, np.full(n, init), meta)

    def _init_weights(self, rng) -> None:
        cfg = self.config
        d, p = cfg.d_model, cfg.patch_size
        din = p + 1  # patch values plus the mask channel
        dout = p * len(QUANTILE_LEVELS)
        hid = cfg.mlp_ratio * d

        self._matrix("embed.proj.w", (d, din), "input", rng)
        self._matrix("embed.mlp1.w", (d, din), "input", rng)
        self._matrix("embed.mlp2.w", (d, d), "hidden", rng)

        for i in range(cfg.n_layers):
            pre = f"blocks.{i}"
            self._vector(f"{pre}.attn_norm.g", d, "norm", 1.0)
            for proj in ("q", "k", "v", "o"):
                self._matrix(f"{pre}.attn.{proj}.w", (d, d), "hidden", rng)
                self._vector(f"{pre}.attn.{proj}.b", d, "bias", 0.0)
            qs_meta = make_metadata((cfg.n_heads, cfg.d_head), "norm")
            self._add(f"{pre}.attn.qscale", np.zeros((cfg.n_heads, cfg.d_head)), qs_meta)
            self._vector(f"{pre}.mlp_norm.g", d, "norm", 1.0)
            self._matrix(f"{pre}.mlp1.w", (hid, d), "hidden", rng)
            self._matrix(f"{pre}.mlp2.w", (d, hid), "hidden", rng)

        self._vector("final_norm.g", d, "norm", 1.0)
        self._matrix("head.proj.w", (dout, d), "output", rng)
        self._matrix("head.mlp1.w", (d, d), "hidden", rng)
        self._matrix("head.mlp2.w", (dout, d), "output", rng)

    # -- forward --------------------------------------------------------------

    def make_tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {name: Tensor(p.data, requires_grad=requires_grad) for name, p in self.params.items()}

    def _w(self, t: dict[str, Tensor], name: str) -> Tensor:
        p = self.params[name]
        return t[name] * p.meta.forward_multiplier

    def _linear(self, t, x: Tensor, name: str, bias: str | None = None) -> Tensor:
        y = x @ self._w(t, f"{name}.w").transpose(1, 0)
        if bias is not None:
            y = y + t[bias]
        return y

    def _rms_norm(self, t, x: Tensor, name: str) -> Tensor:
        ms = (x * x).mean(axis=-1, keepdims=True)
        inv = (ms + self.config.norm_eps).sqrt()
        return x / inv * t[f"{name}.g"]

    def _rope_tables(self, positions: np.ndarray):
        half = self.config.d_head // 2
        freqs = self.config.rope_base ** (-np.arange(half) * 2.0 / self.config.d_head)
        ang = positions[:, None] * freqs[None, :]
        dt = self.config.np_dtype
        return np.cos(ang).astype(dt), np.sin(ang).astype(dt)

    @staticmethod
    def _apply_rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
        # x: (B, V, h, N, dh); tables (N, dh/2) broadcast over leading axes
        half = x.shape[-1] // 2
        x1 = x[..., :half]
        x2 = x[..., half:]
        return concat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def per_dim_scale(self, t, q: Tensor, layer: int) -> Tensor:
        """Learned per-dimension query scaling, identity at initialization:
        factor = softplus(s) / softplus(0), s zero-initialized per head."""
        s = t[f"blocks.{layer}.attn.qscale"]
        factor = s.softplus() * (1.0 / math.log(2.0))
        return q * factor.reshape(1, 1, self.config.n_heads, 1, self.config.d_head)

    def _split_heads(self, x: Tensor) -> Tensor:
        b, v, n, _ = x.shape
        return x.reshape(b, v, n, self.config.n_heads, self.config.d_head).transpose(0, 1, 3, 2, 4)

    def _merge_heads(self, x: Tensor) -> Tensor:
        b, v, h, n, dh = x.shape
        return x.transpose(0, 1, 3, 2, 4).reshape(b, v, n, h * dh)

    def _time_attention(self, t, x: Tensor, layer: int, q_pos: np.ndarray,
                        missing_new: np.ndarray, cache_entry=None):
        """Causal self-attention along the patch axis, independently per variate.
        Fully-missing patches are excluded as keys; a query with no visible key
        attends to its own position only. Returns (out, (k, v) data for caching)."""
        cfg = self.config
        pre = f"blocks.{layer}.attn"
        q = self._split_heads(self._linear(t, x, f"{pre}.q", f"{pre}.q.b"))
        k = self._split_heads(self._linear(t, x, f"{pre}.k", f"{pre}.k.b"))
        v = self._split_heads(self._linear(t, x, f"{pre}.v", f"{pre}.v.b"))

        cos, sin = self._rope_tables(q_pos)
        q = self._apply_rope(q, cos, sin)
        k = self._apply_rope(k, cos, sin)
        q = self.per_dim_scale(t, q, layer)

        if cache_entry is not None and cache_entry["k"] is not None:
            k_all = concat([Tensor(cache_entry["k"]), k], axis=3)
            v_all = concat([Tensor(cache_entry["v"]), v], axis=3)
            k_pos = np.concatenate([cache_entry["positions"], q_pos])
            missing_k = np.concatenate([cache_entry["missing"], missing_new], axis=-1)
        else:
            k_all, v_all = k, v
            k_pos = q_pos
            missing_k = missing_new

        logits = (q @ k_all.swapaxes(-1, -2)) * (1.0 / cfg.d_head)

        bsz, v_n, n_q = missing_new.shape[0], missing_new.shape[1], len(q_pos)
        n_k = len(k_pos)
        causal = k_pos[None, :] <= q_pos[:, None]  # (Nq, Nk)
        visible = np.broadcast_to(causal, (bsz, v_n, n_q, n_k)) & ~missing_k[:, :, None, :]
        none_vis = ~visible.any(axis=-1)
        if none_vis.any():
            visible = visible.copy()
            bi, vi, qi = np.nonzero(none_vis)
            visible[bi, vi, qi, n_k - n_q + qi] = True
        logits = logits.masked_fill(~visible[:, :, None, :, :], NEG_FILL)

        out = self._merge_heads(logits.softmax(axis=-1) @ v_all)
        out = self._linear(t, out, f"{pre}.o", f"{pre}.o.b")
        return out, (k.data, v.data)

    def _variate_attention(self, t, x: Tensor, layer: int) -> Tensor:
        """Full self-attention along the variate axis, independently per patch.
        No positional encoding, hence permutation-equivariant over variates."""
        cfg = self.config
        pre = f"blocks.{layer}.attn"
        q = self._split_heads(self._linear(t, x, f"{pre}.q", f"{pre}.q.b"))
        k = self._split_heads(self._linear(t, x, f"{pre}.k", f"{pre}.k.b"))
        v = self._split_heads(self._linear(t, x, f"{pre}.v", f"{pre}.v.b"))
        q = self.per_dim_scale(t, q, layer)
        # (B, V, h, N, dh) -> (B, h, N, V, dh): attention mixes variates per patch
        q, k, v = (z.transpose(0, 2, 3, 1, 4) for z in (q, k, v))
        logits = (q @ k.swapaxes(-1, -2)) * (1.0 / cfg.d_head)
        out = logits.softmax(axis=-1) @ v
        out = out.transpose(0, 3, 1, 2, 4)  # back to (B, V, h, N, dh)
        out = self._merge_heads(out)
        return self._linear(t, out, f"{pre}.o", f"{pre}.o.b")

    def patch_embed(self, t, patches: np.ndarray, mask: np.ndarray,
                    collect=None) -> Tensor:
        """Residual SiLU embedding of (values, mask-channel) patch features.

        Masked entries are zero-filled before embedding; the mask channel enters
        as one per-patch feature (its masked fraction), giving input dim P + 1.
        """
        dt = self.config.np_dtype
        vals = (patches * (1.0 - mask)).astype(dt)
        frac = mask.mean(axis=-1, keepdims=True).astype(dt)
        inp = Tensor(np.concatenate([vals, frac], axis=-1))
        lin = self._linear(t, inp, "embed.proj")
        pre = self._linear(t, inp, "embed.mlp1")
        if collect is not None:
            collect.append(("embed.mlp1", _rms(pre.data)))
        return lin + self._linear(t, pre.silu(), "embed.mlp2")

    def output_head(self, t, x: Tensor) -> Tensor:
        """Residual SiLU projection to per-step quantiles: (..., P * 9)."""
        lin = self._linear(t, x, "head.proj")
        branch = self._linear(t, self._linear(t, x, "head.mlp1").silu(), "head.mlp2")
        out = lin + branch
        if self.config.parametrization == "ump":
            # output-kind weights carry 1/sqrt(fan_in) in A_W; the second
            # 1/sqrt(fan_in) lands here so the total read-out factor is 1/fan_in
            out = out * readout_multiplier(self.params["head.proj.w"].meta)
        return out

    def forward(self, patches: np.ndarray, mask: np.ndarray, *,
                tensors: dict[str, Tensor] | None = None,
                positions: np.ndarray | None = None,
                kv_cache=None,
                collect_preacts: list | None = None):
        """Run the stack over (B, V, N, P) patches (a leading batch axis is
        optional). Returns quantiles (B, V, N, P, 9); when `kv_cache` is given,
        also returns the per-layer time-attention (k, v) of the new positions.

        With a cache, `patches`/`mask` cover only the new positions and
        `positions` carries their absolute patch indices.
        """
        self.forward_calls += 1
        cfg = self.config
        if patches.ndim == 3:
            patches, mask = patches[None], mask[None]
        bsz, v_n, n_new, p = patches.shape
        if p != cfg.patch_size:
            raise ShapeError(f"patch size {p} != configured {cfg.patch_size}")
        if v_n > cfg.max_variates:
            raise CapacityError(f"{v_n} variates exceeds max_variates={cfg.max_variates}")
        cached = 0 if kv_cache is None else kv_cache.n_patches
        if cached + n_new > cfg.max_patches:
            raise CapacityError(
                f"{cached + n_new} patches exceeds capacity {cfg.max_patches} "
                f"(context_length {cfg.context_length} / patch_size {cfg.patch_size})"
            )
        if positions is None:
            positions = np.arange(cached, cached + n_new)
        positions = np.asarray(positions)

        inference = tensors is None
        if inference:
            with no_grad():
                return self._forward_body(self.make_tensors(False), patches, mask,
                                          positions, kv_cache, collect_preacts)
        return self._forward_body(tensors, patches, mask, positions, kv_cache, collect_preacts)

    def _forward_body(self, t, patches, mask, positions, kv_cache, collect):
        cfg = self.config
        missing = mask.astype(bool).all(axis=-1)  # (B, V, N)
        x = self.patch_embed(t, patches, mask, collect)
        new_kv = []
        for i in range(cfg.n_layers):
            h = self._rms_norm(t, x, f"blocks.{i}.attn_norm")
            if collect is not None:
                qpre = (h @ self._w(t, f"blocks.{i}.attn.q.w").transpose(1, 0)).data
                collect.append((f"blocks.{i}.attn.q", _rms(qpre)))
            if (i + 1) == cfg.variate_attn_position:
                branch = self._variate_attention(t, h, i)
                new_kv.append(None)  # variate layer is recomputed each round
            else:
                entry = kv_cache.layer(i) if kv_cache is not None else None
                branch, kv = self._time_attention(t, h, i, positions, missing, entry)
                new_kv.append(kv)
            x = x + branch * self.scales.attn
            h = self._rms_norm(t, x, f"blocks.{i}.mlp_norm")
            pre = self._linear(t, h, f"blocks.{i}.mlp1")
            if collect is not None:
                collect.append((f"blocks.{i}.mlp1", _rms(pre.data)))
            x = x + self._linear(t, pre.silu(), f"blocks.{i}.mlp2") * self.scales.mlp
        x = self._rms_norm(t, x, "final_norm")
        out = self.output_head(t, x)
        b, v, n, _ = out.shape
        out = out.reshape(b, v, n, cfg.patch_size, len(QUANTILE_LEVELS))
        if kv_cache is not None:
            return out, new_kv, missing
        return out

    def forward_grid(self, grid: PatchGrid, **kw):
        """Convenience wrapper for a single unbatched PatchGrid: quantiles come
        back without the batch axis."""
        out = self.forward(grid.patches, grid.mask, **kw)
        if isinstance(out, tuple):
            return (out[0].reshape(out[0].shape[1:]), *out[1:])
        return out.reshape(out.shape[1:])

    # -- audits ----------------------------------------------------------------

    def audit_metadata(self) -> list[str]:
        """Violations of the metadata contract: every weight housed by exactly
        one record whose multipliers follow its kind. Empty list = pass."""
        issues = []
        for name, p in self.params.items():
            m = p.meta
            if m is None:
                issues.append(f"{name}: no metadata")
                continue
            if m.kind in ("bias", "norm"):
                fan_in, fan_out = 1, p.data.size
            else:
                fan_in = p.data.shape[1] if p.data.ndim == 2 else 1
                fan_out = p.data.shape[0] if p.data.ndim == 2 else p.data.size
            if (m.fan_in, m.fan_out) != (fan_in, fan_out):
                issues.append(f"{name}: fans {m.fan_in}x{m.fan_out} != shape-derived {fan_in}x{fan_out}")
            if p.data.ndim == 2 and m.kind not in ("hidden", "input", "output", "norm"):
                issues.append(f"{name}: matrix with kind {m.kind}")
            if p.data.ndim == 1 and m.kind not in ("bias", "norm"):
                issues.append(f"{name}: vector with kind {m.kind}")
            if self.config.parametrization == "ump":
                if m.kind == "hidden" and not math.isclose(m.forward_multiplier, 1 / math.sqrt(m.fan_in)):
                    issues.append(f"{name}: hidden A_W {m.forward_multiplier} != 1/sqrt(fan_in)")
                if m.kind in ("bias", "norm") and m.forward_multiplier != 1.0:
                    issues.append(f"{name}: {m.kind} A_W {m.forward_multiplier} != 1")
        return issues

    # -- checkpoint --------------------------------------------------------------

    def save(self, out_dir: str) -> None:
        """Manifest (JSON) of named parameters with shapes, kinds and scaling
        metadata, plus a row-major float32 blob in manifest order."""
        os.makedirs(out_dir, exist_ok=True)
        manifest = {
            "format": "patchcast-checkpoint-v1",
            "config": asdict(self.config),
            "params": [
                {
                    "name": p.name,
                    "shape": list(p.data.shape),
                    "kind": p.meta.kind,
                    "fan_in": p.meta.fan_in,
                    "fan_out": p.meta.fan_out,
                    "forward_multiplier": p.meta.forward_multiplier,
                    "update_multiplier_base": p.meta.update_multiplier_base,
                }
                for p in self.params.values()
            ],
        }
        with open(os.path.join(out_dir, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=1)
        blob = np.concatenate([p.data.astype(np.float32).reshape(-1) for p in self.params.values()])
        blob.tofile(os.path.join(out_dir, "weights.bin"))

    @classmethod
    def load(cls, out_dir: str) -> "Model":
        with open(os.path.join(out_dir, "manifest.json")) as f:
            manifest = json.load(f)
        if manifest.get("format") != "patchcast-checkpoint-v1":
            raise ValueError(f"unrecognized checkpoint format in {out_dir}")
        config = ModelConfig(**manifest["config"])
        model = cls(config, seed=0)
        blob = np.fromfile(os.path.join(out_dir, "weights.bin"), dtype=np.float32)
        offset = 0
        for rec in manifest["params"]:
            p = model.params[rec["name"]]
            size = int(np.prod(rec["shape"]))
            p.data = blob[offset:offset + size].reshape(rec["shape"]).astype(config.np_dtype)
            offset += size
            p.meta = MuMetadata(fan_in=rec["fan_in"], fan_out=rec["fan_out"], kind=rec["kind"],
                                forward_multiplier=rec["forward_multiplier"],
                                update_multiplier_base=rec["update_multiplier_base"])
        if offset != blob.size:
            raise ValueError("checkpoint blob size does not match manifest")
        return model


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.asarray(x, dtype=np.float64) ** 2)))


def config_from_preset(preset: str, **overrides) -> ModelConfig:
    if preset not in GEOMETRY_PRESETS:
        raise ValueError(f"unknown geometry preset {preset!r}; have {sorted(GEOMETRY_PRESETS)}")
    kw = dict(GEOMETRY_PRESETS[preset])
    kw.update(overrides)
    return ModelConfig(**kw)
