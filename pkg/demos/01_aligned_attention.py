"""
Aligned attention scores by hand
================================

The whole metric fits in a few lines of linear algebra. Each image gives
per-head queries, keys and values at one attention layer. Image A's queries
attend once over its own keys/values and once over image B's; the cosine
between the two outputs says how well B's content can stand in for A's.

This script builds small Q/K/V tensors directly, so no backbone is involved.
"""

import numpy as np

from diffsim import ProjectedLatents, aas, multihead_align, similarity

rng = np.random.default_rng(0)


def latents(heads=2, tokens=6, d=4):
    return ProjectedLatents(*(rng.standard_normal((heads, tokens, d)) for _ in range(3)))


a, b = latents(), latents()

# %%
# Aligning A's queries to B
# -------------------------
# ``multihead_align`` runs scaled dot-product attention per head and
# concatenates the heads. Every row of the attention weights is a
# distribution over B's tokens.

aligned, weights = multihead_align(a, b, return_weights=True)
print("aligned features:", aligned.x.shape)  # tokens_q x heads*d_head
print("weight rows sum to", np.unique(weights.sum(-1).round(12)))

# %%
# One direction, then both
# ------------------------
# ``aas(a, b)`` is the score from A's point of view. It is not symmetric,
# so ``similarity`` averages the two directions.

print(f"AAS(A,B) = {aas(a, b):+.4f}   AAS(B,A) = {aas(b, a):+.4f}")
s = similarity(a, b)
print(f"similarity = {s.value:+.4f}  (same as similarity(B,A): {s.value == similarity(b, a).value})")
print(f"self-similarity = {similarity(a, a).value:.6f}")

# %%
# What the score ignores
# ----------------------
# Shuffling B's tokens (queries, keys and values together) only reorders the
# attention outputs, so the score is unchanged. Scaling the values rescales
# both outputs, and cosine does not see scale.

perm = rng.permutation(6)
b_shuffled = ProjectedLatents(b.q[:, perm], b.k[:, perm], b.v[:, perm])
b_louder = ProjectedLatents(b.q, b.k, 10 * b.v)
print(f"after token shuffle: {similarity(a, b_shuffled).value:+.4f}")
print(f"after V x 10:        {similarity(a, b_louder).value:+.4f}")

# %%
# Closer content scores higher
# ----------------------------
# Blend B into A step by step and watch the score climb towards 1.

for w in (0.0, 0.25, 0.5, 0.75, 1.0):
    mix = ProjectedLatents(*(w * x + (1 - w) * y for x, y in ((a.q, b.q), (a.k, b.k), (a.v, b.v))))
    print(f"{w:4.2f} of A mixed into B -> similarity {similarity(a, mix).value:+.4f}")
