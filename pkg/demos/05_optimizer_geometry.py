"""The matrix optimizer, piece by piece.

The quintic polar iteration drives a matrix's singular values toward one; the
row-EMA normalization then balances per-neuron step sizes. Pinball training
gives sign-valued gradients, which is where the orthogonalized update shines
against coordinate-wise Adam.
"""

import numpy as np

from patchcast.optim import Schedule, orthogonalize, wsd_lr

rng = np.random.default_rng(0)

print("1. orthogonalization: singular values before -> after")
for shape in ((64, 64), (128, 64), (48, 12)):
    g = rng.standard_normal(shape)
    s_in = np.linalg.svd(g / np.linalg.norm(g), compute_uv=False)
    s_out = np.linalg.svd(orthogonalize(g), compute_uv=False)
    print(f"  {str(shape):>10}: [{s_in.min():.4f}, {s_in.max():.4f}] -> "
          f"[{s_out.min():.4f}, {s_out.max():.4f}]")

print("\n2. row balance: per-row RMS of the raw vs normalized update")
g = rng.standard_normal((8, 32)) * np.logspace(-2, 2, 8)[:, None]  # wild row scales
o = orthogonalize(g)
v = 0.001 * (o * o).mean(axis=1, keepdims=True)  # first-step EMA
normalized = o / np.sqrt(v + 1e-8)
print("  raw ortho row RMS:", np.array2string(np.sqrt((o**2).mean(1)), precision=3))
print("  normalized row RMS:", np.array2string(np.sqrt((normalized**2).mean(1)), precision=1))

print("\n3. warmup-stable-decay schedule (total 30000, warmup 6000, decay 10500)")
schedule = Schedule(total_steps=30000, warmup_steps=6000, decay_steps=10500)
for step in range(0, 30001, 1500):
    m = wsd_lr(schedule, step)
    print(f"  step {step:>6d} |{'*' * int(m * 50):<50}| {m:.2f}")
