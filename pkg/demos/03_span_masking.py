"""Span masking, visualized.

Training hides random contiguous spans of patches (one masking probability
per sequence, span lengths uniform up to c_max) and reconstructs everything
in one pass. At inference the masked span is simply the future.
"""

import numpy as np

from patchcast.decoding import sample_mask

rng = np.random.default_rng(7)
n = 64

print(f"ten draws over {n} patches (c_max=16, p_max=0.4); '#' = masked\n")
fractions = []
for i in range(10):
    plan = sample_mask(n, rng)
    row = "".join("#" if j in plan.masked_set else "." for j in range(n))
    fractions.append(len(plan.masked_set) / n)
    print(f"p={plan.sampled_p:.3f} |{row}| {len(plan.masked_set):3d} masked, "
          f"spans {plan.span_lengths}")

draws = 5000
frac = np.mean([len(sample_mask(128, rng).masked_set) / 128 for _ in range(draws)])
print(f"\nempirical masked fraction at N=128 over {draws} draws: {frac:.3f}")

print("\nsweeping p_max at c_max=16:")
for p_max in (0.1, 0.25, 0.4):
    f = np.mean([len(sample_mask(128, rng, p_max=p_max).masked_set) / 128
                 for _ in range(2000)])
    bar = "=" * int(f * 60)
    print(f"  p_max={p_max:<5} {f:.3f} |{bar}")
