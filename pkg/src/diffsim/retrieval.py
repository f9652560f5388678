"""Top-k retrieval with a pairwise metric.

There is no single-vector embedding to index, so every query scores the whole
corpus. Projections for the corpus are cached (in memory and, when a store
is given, on disk), which makes repeated queries cheap.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .errors import ImageError, ValidationError
from .feature_store import FeatureStore
from .images import load_image
from .pipeline import PairScorer
from .sites import MetricConfig

DEFAULT_K = 4

Corpus = Union[Mapping[str, object], Sequence[str]]


@dataclass
class Ranking:
    query: str
    hits: list[tuple[str, float]]
    k: int
    truncated: bool = False  # k exceeded the number of candidates
    config: Optional[MetricConfig] = None
    excluded: list[str] = field(default_factory=list)

    def ids(self) -> list[str]:
        return [h[0] for h in self.hits]

    def to_records(self) -> list[dict]:
        cfg = None if self.config is None else self.config.to_dict()
        return [
            {"query": self.query, "rank": i + 1, "id": cid, "score": s, "k": self.k,
             "k_exceeds_corpus": self.truncated, "config": cfg}
            for i, (cid, s) in enumerate(self.hits)
        ]


def _as_mapping(corpus: Corpus) -> dict[str, object]:
    if isinstance(corpus, Mapping):
        items = {str(k): v for k, v in corpus.items()}
    else:
        items = {str(p): p for p in corpus}
    if not items:
        raise ValidationError("corpus is empty")
    return items


def precompute_corpus(config: MetricConfig, corpus: Corpus, store: Optional[FeatureStore] = None,
                      scorer: Optional[PairScorer] = None, jobs: int = 1) -> int:
    """Make sure projections for every corpus image are cached.

    Returns the number of forward passes that were actually needed.
    """
    items = _as_mapping(corpus)
    scorer = scorer or PairScorer(config, store)
    before = scorer.n_extractions

    def one(pair):
        cid, src = pair
        try:
            scorer.latents(src)
        except ImageError as e:
            raise ImageError(f"corpus image {cid!r}: {e}") from e

    pairs = sorted(items.items())
    if jobs <= 1:
        for p in pairs:
            one(p)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(one, pairs))
    return scorer.n_extractions - before


def query_topk(
    config: MetricConfig,
    query,
    corpus: Corpus,
    k: int = DEFAULT_K,
    *,
    exclude_query: bool = True,
    store: Optional[FeatureStore] = None,
    scorer: Optional[PairScorer] = None,
    query_id: Optional[str] = None,
) -> Ranking:
    """Rank corpus images against ``query`` by descending score.

    Equal scores are ordered by ascending image id. With ``exclude_query``
    the entry whose id equals the query id is left out (byte duplicates under
    other ids are kept).
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    items = _as_mapping(corpus)
    qid = query_id if query_id is not None else str(query)
    excluded = []
    if exclude_query and qid in items:
        excluded.append(qid)
        items.pop(qid)
    if not items:
        raise ValidationError("corpus is empty after excluding the query")
    scorer = scorer or PairScorer(config, store)
    q = load_image(query)
    scored = [(cid, float(scorer.score(q, src).value)) for cid, src in sorted(items.items())]
    scored.sort(key=lambda h: (-h[1], h[0]))
    return Ranking(qid, scored[:k], k, k > len(scored), config, excluded)


def contact_sheet(ranking: Ranking, corpus: Corpus, query, out_path, thumb: int = 128) -> Path:
    """Query plus its hits side by side, scores underneath."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from PIL import Image

    items = _as_mapping(corpus)
    panels = [("query", query, None)] + [(cid, items[cid], s) for cid, s in ranking.hits]
    fig, axes = plt.subplots(1, len(panels), figsize=(2 * len(panels), 2.4), squeeze=False)
    for ax, (name, src, score) in zip(axes[0], panels):
        px = Image.fromarray(load_image(src).pixels).resize((thumb, thumb), Image.Resampling.BICUBIC)
        ax.imshow(np.asarray(px))
        ax.set_title(name if score is None else f"{name}\n{score:.4f}", fontsize=7)
        ax.axis("off")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, metadata={"Software": None})
    plt.close(fig)
    return out_path
