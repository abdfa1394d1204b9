"""Poke the backbone: shapes, causality, variate equivariance, key masking.

The stack alternates causal time-axis attention with one full variate-axis
attention layer (placed last). Rotary positions live on the time axis only,
so permuting variates permutes outputs; fully-missing patches are excluded
as attention keys.
"""

import numpy as np

from patchcast.model import GEOMETRY_PRESETS, Model, ModelConfig

cfg = ModelConfig(context_length=512, dtype="float64", **GEOMETRY_PRESETS["64/4/1"])
model = Model(cfg, seed=0)
n_params = sum(p.data.size for p in model.params.values())
print(f"model 64/4/1: {n_params:,} parameters, capacity {cfg.max_patches} patches, "
      f"residual scales attn={model.scales.attn:.3f} mlp={model.scales.mlp:.3f}")

rng = np.random.default_rng(0)
patches = rng.standard_normal((3, 8, 32))
mask = np.zeros_like(patches)
out = model.forward(patches, mask)
print(f"forward: patches (3, 8, 32) -> quantiles {out.shape}")

print("\n1. causality: changing patches >= 5 leaves outputs at patches < 5 unchanged")
p2 = patches.copy()
p2[:, 5:] = rng.standard_normal(p2[:, 5:].shape)
out2 = model.forward(p2, mask)
print("   identical:", np.array_equal(out.data[:, :, :5], out2.data[:, :, :5]))

print("\n2. variate equivariance: permuting variates permutes outputs")
perm = np.array([2, 0, 1])
out_p = model.forward(patches[perm], mask[perm])
print("   max deviation:", float(np.abs(out_p.data - out.data[:, perm]).max()))

print("\n3. key masking: a fully-missing patch is invisible to every other position")
mask3 = mask.copy()
mask3[:, 4] = 1.0
p3 = patches.copy()
p3[:, 4] = 0.0
base = model.forward(p3, mask3)
p4 = p3.copy()
p4[:, 4] = rng.standard_normal(p4[:, 4].shape) * 100  # hidden truth under the mask
out4 = model.forward(p4, mask3)
print("   identical everywhere:", np.array_equal(base.data, out4.data))

print("\n4. audits")
print("   metadata violations:", model.audit_metadata())
from patchcast.optim import audit_partition
print("   partition violations:", audit_partition(model))
