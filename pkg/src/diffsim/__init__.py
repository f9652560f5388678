"""Aligned Attention Score image similarity.

Two images are compared by letting each image's queries attend over its own
keys/values and over the other image's, then taking the cosine between the
two attention outputs. The projections come from an attention layer of a
pretrained backbone (a latent-diffusion U-Net at some noise level, or a
vision transformer) or from a small seeded toy network.
"""

from .aas import (
    AlignedFeatures,
    ProjectedLatents,
    SimilarityScore,
    aas,
    cross_aas_pair,
    flat_cosine,
    multihead_align,
    scaled_dot_attention,
    similarity,
    softmax,
    token_cosine,
)
from .backends import (
    BACKEND_IDS,
    encode_image,
    extract_ip_tokens,
    extract_projected_latents,
    forward_noise,
    get_backend,
    list_sites,
    register_backend,
    sample_noise,
)
from .backends.base import Backend, IPTokenSet
from .datasets import (
    DatasetManifest,
    TripletRecord,
    build_triplets,
    load_frame_sequence,
    load_manifest,
    read_triplets,
    write_triplets,
)
from .errors import (
    CacheIntegrityError,
    ConfigError,
    DegenerateFeatureError,
    DiffSimError,
    DimensionError,
    ImageError,
    ManifestError,
    SiteNotFoundError,
    TripletError,
    UnknownBackendError,
    ValidationError,
    WeightsMissingError,
)
from .feature_store import CacheKey, FeatureStore
from .harness import (
    BenchmarkReport,
    TripletResult,
    default_grid,
    emit_report,
    ensemble,
    ensemble_vote,
    evaluate_triplets,
    grid_search,
    population_variance,
    video_consistency_variance,
)
from .images import LoadedImage, load_image
from .pipeline import PairScorer, compute_pair_score
from .retrieval import Ranking, precompute_corpus, query_topk
from .sites import AttentionSite, MetricConfig

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
