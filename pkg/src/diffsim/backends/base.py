from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..aas import ProjectedLatents
from ..errors import ConfigError, SiteNotFoundError, ValidationError
from ..sites import AttentionSite

STANDARD_RESOLUTIONS = (384, 512, 768, 1024)


@dataclass(frozen=True, eq=False)
class IPTokenSet:
    tokens: np.ndarray  # [n_tokens, d_model]
    source_id: str = ""

    def __post_init__(self):
        t = np.asarray(self.tokens)
        if t.ndim != 2 or min(t.shape) < 1:
            raise ValidationError(f"IP tokens must be [n_tokens, d_model], got {t.shape}")
        if not np.all(np.isfinite(t)):
            raise ValidationError("IP tokens contain non-finite entries")
        object.__setattr__(self, "tokens", t)

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]


class Backend(ABC):
    """A backbone that can hand out Q/K/V projections at named attention sites.

    Subclasses work on preprocessed float32 pixels ``[R, R, 3]`` in ``[0, 1]``.
    Diffusion backends encode pixels to a latent that gets noised before the
    single forward pass; transformer backends skip noising entirely.
    """

    backend_id: str
    is_diffusion: bool = True
    supports_cross: bool = False
    resolutions: tuple[int, ...] = STANDARD_RESOLUTIONS
    default_resolution: int = 512
    default_timestep: Optional[int] = 500

    @abstractmethod
    def site_layout(self) -> list[tuple[str, object, int]]:
        """``(kind, block, layer_ordinal)`` triples that exist in the network."""

    @abstractmethod
    def encode(self, pixels: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def extract(
        self, latent: np.ndarray, site: AttentionSite, ip_tokens: Optional[IPTokenSet] = None
    ) -> ProjectedLatents:
        """Run one forward pass on an (already noised) latent and capture the
        projections at ``site``."""

    def schedule(self) -> np.ndarray:
        """Cumulative signal fraction indexed by integer timestep."""
        raise ConfigError(f"backend {self.backend_id!r} has no noise schedule")

    def ip_tokens(self, pixels: np.ndarray) -> IPTokenSet:
        raise ConfigError(f"backend {self.backend_id!r} has no image-token projector")

    def fingerprint(self) -> str:
        return ""

    def needs_ip_tokens(self, site: AttentionSite) -> bool:
        return self.supports_cross and site.kind == "cross"

    def sites(self) -> list[AttentionSite]:
        t = self.default_timestep if self.is_diffusion else None
        out = [
            AttentionSite(self.backend_id, kind, block, ordinal, t, self.default_resolution)
            for kind, block, ordinal in self.site_layout()
        ]
        return sorted(out, key=AttentionSite.sort_key)

    def validate_site(self, site: AttentionSite) -> None:
        if site.backend_id != self.backend_id:
            raise SiteNotFoundError(f"site belongs to {site.backend_id!r}, not {self.backend_id!r}")
        if (site.kind, site.block, site.layer_ordinal) not in set(self.site_layout()):
            raise SiteNotFoundError(
                f"no {site.kind}-attention layer {site.block}.{site.layer_ordinal} in {self.backend_id!r}"
            )
        if site.resolution not in self.resolutions:
            raise ConfigError(
                f"resolution {site.resolution} not supported by {self.backend_id!r}; use one of {self.resolutions}"
            )
        if self.is_diffusion:
            if site.timestep is None:
                raise ConfigError(f"backend {self.backend_id!r} needs a timestep")
            n = len(self.schedule())
            if not 0 <= site.timestep < n:
                raise ConfigError(f"timestep {site.timestep} outside [0, {n - 1}] for {self.backend_id!r}")
        elif site.timestep is not None:
            raise ConfigError(f"backend {self.backend_id!r} does no noising; timestep must be None")
        if site.kind == "cross" and not self.supports_cross:
            raise SiteNotFoundError(f"backend {self.backend_id!r} has no image-conditioned cross-attention")
