"""Pair scoring: image -> latent -> noise -> projections -> similarity."""

from __future__ import annotations

import threading
from typing import Optional

from . import backends
from .aas import ProjectedLatents, SimilarityScore, cross_aas_pair, similarity
from .errors import CacheIntegrityError
from .feature_store import CacheKey, FeatureStore
from .images import ImageSource, load_image
from .sites import MetricConfig


class PairScorer:
    """Scores image pairs under one :class:`MetricConfig`.

    Projections are looked up in an in-memory memo, then in the optional
    on-disk ``store``, and only then extracted. ``n_extractions`` counts real
    forward passes.
    """

    def __init__(self, config: MetricConfig, store: Optional[FeatureStore] = None, memo: bool = True):
        self.config = config
        self.store = store
        self.backend = backends.get_backend(config.backend_id)
        self.backend.validate_site(config.site)
        self.n_extractions = 0
        self._memo: Optional[dict[CacheKey, ProjectedLatents]] = {} if memo else None
        self._lock = threading.Lock()
        self._key_locks: dict[CacheKey, threading.Lock] = {}

    def key_for(self, digest: str) -> CacheKey:
        c = self.config
        return CacheKey.for_site(digest, c.site, c.noise_seed, c.shared_noise,
                                 self.backend.is_diffusion, c.crop_subject)

    def latents(self, image: ImageSource) -> ProjectedLatents:
        img = load_image(image)
        key = self.key_for(img.digest)
        with self._lock:
            key_lock = self._key_locks.setdefault(key, threading.Lock())
        # one extraction per key even when byte-identical images arrive concurrently
        with key_lock:
            return self._latents(img, key)

    def _latents(self, img, key: CacheKey) -> ProjectedLatents:
        if self._memo is not None and key in self._memo:
            return self._memo[key]
        p = None
        if self.store is not None:
            p = self.store.get(key)
            if p is not None and not isinstance(p, ProjectedLatents):
                raise CacheIntegrityError(key.canonical(), "entry is not a Q/K/V record")
        if p is None:
            c = self.config
            p = backends.extract_projected_latents(
                c.backend_id, img, c.site, c.noise_seed, c.shared_noise, c.crop_subject
            )
            with self._lock:
                self.n_extractions += 1
            if self.store is not None:
                self.store.put(key, p)
        if self._memo is not None:
            self._memo[key] = p
        return p

    def score(self, image_a: ImageSource, image_b: ImageSource) -> SimilarityScore:
        pa = self.latents(image_a)
        pb = self.latents(image_b)
        mode = self.config.cosine_mode
        if self.config.site.kind == "cross":
            # each record holds Q from the image latent and K/V from its own image tokens
            return cross_aas_pair(pa, pa, pb, pb, mode, self.config)
        return similarity(pa, pb, mode, self.config)

    __call__ = score


def compute_pair_score(
    config: MetricConfig,
    image_a: ImageSource,
    image_b: ImageSource,
    store: Optional[FeatureStore] = None,
) -> SimilarityScore:
    return PairScorer(config, store).score(image_a, image_b)
