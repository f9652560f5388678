"""
Nearest neighbours with a pairwise metric
=========================================

The metric compares two images jointly, so there is no embedding to index.
Retrieval scores the query against every corpus image instead. Corpus
projections are computed once and cached on disk, which makes repeat
queries cost only the attention arithmetic.
"""

import sys
from pathlib import Path

import numpy as np
from PIL import Image

from diffsim import FeatureStore, MetricConfig, PairScorer, list_sites, precompute_corpus, query_topk
from diffsim.retrieval import contact_sheet

OUT = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-output") / "retrieval"
(OUT / "corpus").mkdir(parents=True, exist_ok=True)
rng = np.random.default_rng(3)

# %%
# A corpus of colour families
# ---------------------------
# Five families of noisy gradients, four images each, plus an exact copy of
# one image under a different name.

corpus = {}
for fam in range(5):
    base = rng.integers(0, 256, (2, 2, 3)).astype(np.uint8)
    for j in range(4):
        small = np.clip(base + rng.normal(0, 25, base.shape), 0, 255).astype(np.uint8)
        img = Image.fromarray(small).resize((48, 48), Image.Resampling.BICUBIC)
        path = OUT / "corpus" / f"f{fam}_{j}.png"
        img.save(path)
        corpus[path.stem] = str(path)
dup = OUT / "corpus" / "f2_0_copy.png"
dup.write_bytes(Path(corpus["f2_0"]).read_bytes())
corpus["f2_0_copy"] = str(dup)

# %%
# Precompute, then query
# ----------------------
# The store is keyed by image content and attention site, so the byte
# duplicate shares its entry with the original.

config = MetricConfig(list_sites("toy-self")[-1].with_(timestep=300), "toy_aas")
store = FeatureStore(OUT / "cache")
print("extractions on first pass:", precompute_corpus(config, corpus, store))
print("extractions on second pass:", precompute_corpus(config, corpus, store))

scorer = PairScorer(config, store)
ranking = query_topk(config, corpus["f2_0"], corpus, k=4, scorer=scorer, query_id="f2_0")
for rank, (cid, score) in enumerate(ranking.hits, 1):
    print(f"{rank}. {cid:10s} {score:.4f}")
print("forward passes during the query:", scorer.n_extractions)

contact_sheet(ranking, corpus, corpus["f2_0"], OUT / "contact_sheet.png")
print("wrote", OUT / "contact_sheet.png")
