"""Where the attention goes, and what it costs.

A six-step history alternates between two domains.  With the intra-domain
mask each position only sees earlier positions of its own domain, so the
attention matrix splits into two interleaved triangles.  The score count
drops accordingly, and the drop is largest when the domains are balanced.
"""

import numpy as np

from cdsr.attention import build_mask
from cdsr.checks import toy_catalog
from cdsr.model import ModelConfig, SequenceModel, Trace
from cdsr.batch import single
from cdsr.numerics import no_grad
from cdsr.perf import bench, count_attention_pairs, format_bench, instrumented_forward

domains = [0, 1, 0, 0, 1, 1]
items = [0, 5, 2, 1, 7, 4]

print("allowed (query row, key column), intra-domain:")
print(build_mask(domains).astype(int))
print("allowed, dense causal:")
print(build_mask(domains, intra=False).astype(int))

model = SequenceModel(ModelConfig(k=8, h=2, L=1, n_max=8, use_ddsr=False), toy_catalog(2, 4))
trace = Trace()
with no_grad():
    model.forward_batch(single(items, domains, 1), trace=trace)
print("\nhead 0 attention weights, layer 0:")
print(np.round(trace.attention[0][0, 0], 3))

rep = count_attention_pairs(domains)
print(f"\nscores per head and layer: intra {rep.intra_causal_pairs}, dense {rep.dense_causal_pairs}")
_, counter = instrumented_forward(items, domains, 1, model)
print(f"measured in a forward pass (h=2, L=1): {counter.attention}")

# balanced domains give the 1/D saving, a dominant domain gives about delta
for name, d in [("balanced", np.repeat(np.arange(4), 25)), ("skewed", [0] * 70 + [1, 2, 3] * 10)]:
    r = count_attention_pairs(d)
    print(f"{name:>8}: delta={r.delta:.2f} ratio={r.ratio:.3f} quadratic ratio={r.quadratic_ratio:.3f}")

print("\nwall clock, dense vs intra (4 domains, uniform):")
print(format_bench(bench(4, [64, 128, 256], repeats=3, k=32, h=4)))
