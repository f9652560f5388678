"""Addresses of attention layers and fully specified metric configurations."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Any, Optional, Union

from .errors import ConfigError

T_TOTAL = 1000

UNET_BLOCKS = ("down_0", "down_1", "down_2", "mid", "up_0", "up_1", "up_2")
KINDS = ("self", "cross")
METRIC_KINDS = ("diffsim_s", "diffsim_c", "clip_aas", "dino_aas", "toy_aas")
COSINE_MODES = ("per_token_mean", "flattened")

# metric kind -> backends it may run on
_METRIC_BACKENDS = {
    "diffsim_s": ("sd15", "sdxl"),
    "diffsim_c": ("sd15", "sdxl"),
    "clip_aas": ("clip-vit",),
    "dino_aas": ("dinov2",),
    "toy_aas": ("toy-self", "toy-cross"),
}

Block = Union[str, int]


def _block_order(block: Block) -> tuple:
    if isinstance(block, int):
        return (1, block, "")
    return (0, UNET_BLOCKS.index(block) if block in UNET_BLOCKS else len(UNET_BLOCKS), block)


@dataclass(frozen=True)
class AttentionSite:
    """One attention layer inside one backbone, plus where in the diffusion
    process it is read.

    ``block`` is one of :data:`UNET_BLOCKS` for U-Net style backbones, or an
    integer layer index for plain transformer stacks. ``timestep`` is ``None``
    for backends that do no noising.
    """

    backend_id: str
    kind: str
    block: Block
    layer_ordinal: int = 0
    timestep: Optional[int] = None
    resolution: int = 512

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"site kind must be one of {KINDS}, got {self.kind!r}")
        if isinstance(self.block, bool) or not isinstance(self.block, (str, int)):
            raise ConfigError(f"block must be a block name or an integer, got {self.block!r}")
        if isinstance(self.block, str) and self.block not in UNET_BLOCKS:
            raise ConfigError(f"unknown block {self.block!r}; expected one of {UNET_BLOCKS}")
        if isinstance(self.block, int) and self.block < 0:
            raise ConfigError(f"layer index must be >= 0, got {self.block}")
        if self.layer_ordinal < 0:
            raise ConfigError(f"layer_ordinal must be >= 0, got {self.layer_ordinal}")
        if self.timestep is not None and not (0 <= self.timestep <= T_TOTAL):
            raise ConfigError(f"timestep {self.timestep} outside [0, {T_TOTAL}]")
        if self.resolution <= 0:
            raise ConfigError(f"resolution must be positive, got {self.resolution}")

    def canonical(self) -> str:
        # JSON of an ordered list: injective over the fields and platform independent
        return json.dumps(
            [self.backend_id, self.kind, self.block, self.layer_ordinal, self.timestep, self.resolution],
            separators=(",", ":"),
        )

    def sort_key(self) -> tuple:
        return (
            self.backend_id,
            self.kind,
            _block_order(self.block),
            self.layer_ordinal,
            -1 if self.timestep is None else self.timestep,
            self.resolution,
        )

    def with_(self, **changes) -> "AttentionSite":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionSite":
        return cls(**d)

    def label(self) -> str:
        t = "" if self.timestep is None else f"@t{self.timestep}"
        return f"{self.backend_id}:{self.kind}:{self.block}.{self.layer_ordinal}{t}/{self.resolution}px"


@dataclass(frozen=True)
class MetricConfig:
    site: AttentionSite
    metric_kind: str
    noise_seed: int = 0
    shared_noise: bool = True
    cosine_mode: str = "per_token_mean"
    crop_subject: bool = False

    def __post_init__(self):
        if self.metric_kind not in METRIC_KINDS:
            raise ConfigError(f"metric_kind must be one of {METRIC_KINDS}, got {self.metric_kind!r}")
        if self.cosine_mode not in COSINE_MODES:
            raise ConfigError(f"cosine_mode must be one of {COSINE_MODES}, got {self.cosine_mode!r}")
        allowed = _METRIC_BACKENDS[self.metric_kind]
        if self.site.backend_id not in allowed:
            raise ConfigError(
                f"metric_kind {self.metric_kind!r} runs on {allowed}, not {self.site.backend_id!r}"
            )
        if self.metric_kind == "diffsim_c" and self.site.kind != "cross":
            raise ConfigError("diffsim_c requires a cross-attention site")
        if self.metric_kind in ("diffsim_s", "clip_aas", "dino_aas") and self.site.kind != "self":
            raise ConfigError(f"{self.metric_kind} requires a self-attention site")

    @property
    def backend_id(self) -> str:
        return self.site.backend_id

    @property
    def resolution(self) -> int:
        return self.site.resolution

    @property
    def timestep(self) -> Optional[int]:
        return self.site.timestep

    def with_site(self, **changes) -> "MetricConfig":
        return dataclasses.replace(self, site=self.site.with_(**changes))

    def replace(self, **changes) -> "MetricConfig":
        return dataclasses.replace(self, **changes)

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["site"] = self.site.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricConfig":
        d = dict(d)
        site = d.pop("site")
        if not isinstance(site, AttentionSite):
            site = AttentionSite.from_dict(site)
        return cls(site=site, **d)


def default_metric_kind(backend_id: str, kind: str = "self") -> str:
    if backend_id in ("sd15", "sdxl"):
        return "diffsim_c" if kind == "cross" else "diffsim_s"
    if backend_id == "clip-vit":
        return "clip_aas"
    if backend_id == "dinov2":
        return "dino_aas"
    if backend_id.startswith("toy"):
        return "toy_aas"
    raise ConfigError(f"no metric kind for backend {backend_id!r}")
