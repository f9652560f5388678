"""Backend registry and the feature-extraction entry points.

Backends are created lazily on first use and cached for the life of the
process; after creation they are only read.
"""

from __future__ import annotations

import os
import threading
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from ..aas import ProjectedLatents
from ..errors import ConfigError, UnknownBackendError, ValidationError
from ..images import ImageSource, load_image, preprocess
from ..sites import AttentionSite
from .base import STANDARD_RESOLUTIONS, Backend, IPTokenSet
from .toy import ToyBackend

__all__ = [
    "Backend",
    "IPTokenSet",
    "BACKEND_IDS",
    "register_backend",
    "get_backend",
    "weights_dir",
    "list_sites",
    "encode_image",
    "forward_noise",
    "sample_noise",
    "noisy_latent",
    "extract_projected_latents",
    "extract_ip_tokens",
]

BACKEND_IDS = ("sd15", "sdxl", "clip-vit", "dinov2", "toy-self", "toy-cross")

WEIGHTS_ENV = "DIFFSIM_WEIGHTS_DIR"


def weights_dir() -> Optional[Path]:
    root = os.environ.get(WEIGHTS_ENV)
    return Path(root) if root else None


def _unet(backend_id):
    def make():
        from .unet import UNetBackend

        return UNetBackend.from_weights(backend_id)

    return make


def _vit(backend_id):
    def make():
        from .vit import ViTBackend

        return ViTBackend.from_weights(backend_id)

    return make


_FACTORIES: dict[str, Callable[[], Backend]] = {
    "toy-self": lambda: ToyBackend("toy-self", with_cross=False),
    "toy-cross": lambda: ToyBackend("toy-cross", with_cross=True),
    "sd15": _unet("sd15"),
    "sdxl": _unet("sdxl"),
    "clip-vit": _vit("clip-vit"),
    "dinov2": _vit("dinov2"),
}
_INSTANCES: dict[str, Backend] = {}
_LOCK = threading.Lock()


def register_backend(backend_id: str, factory: Callable[[], Backend], replace: bool = False) -> None:
    """Add or override a backend factory (tests inject tiny models this way)."""
    with _LOCK:
        if backend_id in _FACTORIES and not replace:
            raise ConfigError(f"backend {backend_id!r} already registered")
        _FACTORIES[backend_id] = factory
        _INSTANCES.pop(backend_id, None)


def get_backend(backend_id: str) -> Backend:
    inst = _INSTANCES.get(backend_id)
    if inst is not None:
        return inst
    with _LOCK:
        if backend_id not in _INSTANCES:
            try:
                factory = _FACTORIES[backend_id]
            except KeyError:
                raise UnknownBackendError(
                    f"unknown backend {backend_id!r}; known: {sorted(_FACTORIES)}"
                ) from None
            _INSTANCES[backend_id] = factory()
        return _INSTANCES[backend_id]


def list_sites(backend_id: str) -> list[AttentionSite]:
    """Every attention site of the backend at its default timestep/resolution."""
    sites = get_backend(backend_id).sites()
    if not sites:
        raise ConfigError(f"backend {backend_id!r} exposes no attention sites")
    return sites


def encode_image(backend_id: str, image: ImageSource, resolution: int, crop_subject: bool = False) -> np.ndarray:
    backend = get_backend(backend_id)
    if resolution not in backend.resolutions:
        raise ConfigError(f"resolution {resolution} not supported by {backend_id!r}; use one of {backend.resolutions}")
    img = load_image(image)
    return backend.encode(preprocess(img, resolution, crop_subject))


def forward_noise(latent, timestep: int, noise, schedule) -> np.ndarray:
    """``sqrt(a) * latent + sqrt(1 - a) * noise`` with ``a = schedule[timestep]``."""
    latent = np.asarray(latent, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    schedule = np.asarray(schedule, dtype=np.float64)
    if latent.shape != noise.shape:
        raise ValidationError(f"noise shape {noise.shape} != latent shape {latent.shape}")
    if not 0 <= timestep < len(schedule):
        raise ConfigError(f"timestep {timestep} outside [0, {len(schedule) - 1}]")
    a = schedule[timestep]
    return np.sqrt(a) * latent + np.sqrt(1.0 - a) * noise


def sample_noise(shape, noise_seed: int, timestep: int, image_digest: Optional[str] = None) -> np.ndarray:
    """Standard normal noise from PCG64.

    Shared noise (``image_digest=None``) is keyed by ``(noise_seed, timestep)``;
    per-image noise by ``(noise_seed, image digest)``.
    """
    if noise_seed < 0:
        raise ConfigError("noise_seed must be non-negative")
    if image_digest is None:
        entropy = [noise_seed, timestep]
    else:
        entropy = [noise_seed, int(image_digest[:32], 16)]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
    return rng.standard_normal(shape)


def noisy_latent(backend: Backend, latent: np.ndarray, timestep: int, noise_seed: int,
                 shared_noise: bool, image_digest: str) -> np.ndarray:
    eps = sample_noise(latent.shape, noise_seed, timestep, None if shared_noise else image_digest)
    return forward_noise(latent, timestep, eps, backend.schedule()).astype(latent.dtype)


def extract_projected_latents(
    backend_id: str,
    image: ImageSource,
    site: AttentionSite,
    noise_seed: int = 0,
    shared_noise: bool = True,
    crop_subject: bool = False,
) -> ProjectedLatents:
    """Q/K/V at ``site`` for one image.

    For cross sites the image's own image-prompt tokens condition the pass and
    supply K/V; Q comes from the image latent.
    """
    backend = get_backend(backend_id)
    backend.validate_site(site)
    img = load_image(image)
    pixels = preprocess(img, site.resolution, crop_subject)
    latent = backend.encode(pixels)
    ip = backend.ip_tokens(pixels) if backend.needs_ip_tokens(site) else None
    if backend.is_diffusion:
        latent = noisy_latent(backend, latent, site.timestep, noise_seed, shared_noise, img.digest)
    p = backend.extract(latent, site, ip)
    # float32 so that cached and freshly extracted projections are bit-identical
    f32 = np.float32
    return ProjectedLatents(p.q.astype(f32), p.k.astype(f32), p.v.astype(f32), site, img.digest)


def extract_ip_tokens(backend_id: str, image: ImageSource, resolution: Optional[int] = None) -> IPTokenSet:
    backend = get_backend(backend_id)
    if not backend.supports_cross:
        raise ConfigError(f"backend {backend_id!r} has no image-token projector")
    img = load_image(image)
    res = resolution or backend.default_resolution
    tokens = backend.ip_tokens(preprocess(img, res))
    return IPTokenSet(tokens.tokens, img.digest)
