"""Width-transferable parametrization: per-parameter scaling metadata,
effective-weight and update multipliers, and residual branch scales.

Every weight is stored as a unit-scale leaf ``w`` and enters the forward pass
as ``A_W * w``; optimizer steps are scaled by ``C_W = eta * base``. The kind
table (hidden / input / output / bias / norm) fixes how both multipliers move
with width so one learning rate works at every ``d_model``:

    kind     A_W            C_W            notes
    hidden   1/sqrt(fan_in) eta/sqrt(fan_in)
    input    1/sqrt(fan_in) eta            fan_in is width-independent
    output   1/sqrt(fan_in) eta            an extra 1/sqrt(fan_in) is applied
                                           on the read-out activation, so the
                                           total forward factor is 1/fan_in
    bias     1              eta
    norm     1              eta
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

KINDS = ("hidden", "input", "output", "bias", "norm")

# Kinds whose A_W scales like 1/sqrt(fan_in); bias and norm stay at 1.
_SQRT_KINDS = ("hidden", "input", "output")


@dataclass(frozen=True)
class MuMetadata:
    """Per-parameter scaling record: the width-transfer contract."""

    fan_in: int
    fan_out: int
    kind: str
    forward_multiplier: float  # A_W
    update_multiplier_base: float  # C_W at eta = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown parameter kind {self.kind!r}")
        if self.fan_in < 1 or self.fan_out < 1:
            raise ValueError("fan_in and fan_out must be positive")
        if self.forward_multiplier <= 0 or self.update_multiplier_base <= 0:
            raise ValueError("multipliers must be strictly positive")


@dataclass(frozen=True)
class ResidualScales:
    """Residual branch multipliers for a given context geometry.

    attention branches are scaled by alpha_res * alpha_res_attn_ratio and MLP
    branches by alpha_res; the ratio sqrt(S / ln S) compensates the variance
    lost to 1/d_k attention scaling at sequence length S (patches).
    """

    alpha_res: float
    alpha_res_attn_ratio: float
    seq_patches: int

    @property
    def attn(self) -> float:
        return self.alpha_res * self.alpha_res_attn_ratio

    @property
    def mlp(self) -> float:
        return self.alpha_res


def _fans(shape: tuple[int, ...], kind: str) -> tuple[int, int]:
    """Derive (fan_in, fan_out). Matrices are stored (fan_out, fan_in);
    vectors (biases, norm gains, per-dim scales) have fan_in 1."""
    if kind in ("bias", "norm"):
        return 1, int(np.prod(shape))
    if len(shape) != 2:
        raise ValueError(f"{kind} parameters must be matrices, got shape {shape}")
    return shape[1], shape[0]


def make_metadata(shape: tuple[int, ...], kind: str) -> MuMetadata:
    fan_in, fan_out = _fans(tuple(shape), kind)
    a_w = 1.0 / math.sqrt(fan_in) if kind in _SQRT_KINDS else 1.0
    base = 1.0 / math.sqrt(fan_in) if kind == "hidden" else 1.0
    return MuMetadata(fan_in=fan_in, fan_out=fan_out, kind=kind,
                      forward_multiplier=a_w, update_multiplier_base=base)


def init_param(shape, kind: str, rng: np.random.Generator,
               dtype=np.float64) -> tuple[np.ndarray, MuMetadata]:
    """Unit-scale leaf initialization: entries i.i.d. N(0, 1), metadata per kind."""
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ValueError(f"invalid parameter shape {shape}")
    meta = make_metadata(shape, kind)
    leaf = rng.standard_normal(shape).astype(dtype)
    return leaf, meta


def effective_weight(leaf, meta: MuMetadata):
    """Forward-pass weight A_W * w. Works on ndarrays and autodiff Tensors."""
    return leaf * meta.forward_multiplier


def update_multiplier(meta: MuMetadata, eta: float) -> float:
    """Step-size multiplier C_W for a given learning rate."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    return eta * meta.update_multiplier_base


def readout_multiplier(meta: MuMetadata) -> float:
    """Extra activation-side factor for output-kind weights (total 1/fan_in)."""
    if meta.kind != "output":
        return 1.0
    return 1.0 / math.sqrt(meta.fan_in)


def residual_scales(context_length: int, patch_size: int,
                    alpha_res: float = 0.75) -> ResidualScales:
    if context_length % patch_size != 0:
        raise ValueError(f"context_length {context_length} not divisible by patch_size {patch_size}")
    s = context_length // patch_size
    if s < 2:
        raise ValueError(f"need at least 2 patches for residual scales, got S={s}")
    ratio = math.sqrt(s / math.log(s))
    return ResidualScales(alpha_res=alpha_res, alpha_res_attn_ratio=ratio, seq_patches=s)
