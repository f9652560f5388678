"""Projections from a latent-diffusion U-Net (SD 1.5 / SD-XL) via diffusers.

One forward pass at the site's timestep with empty-prompt conditioning. The
target attention module gets a temporary processor that computes Q/K/V from
its inputs and aborts the pass, so nothing past the site is evaluated.

Block names count only the attention-bearing blocks: on SD 1.5 ``down_0``
is ``down_blocks.0`` and ``up_0`` is ``up_blocks.1`` (``up_blocks.0`` has no
attention). ``layer_ordinal`` enumerates transformer layers inside a block.

Cross sites read the image-prompt branch of IP-Adapter processors: Q from
the image latent, K/V from ``to_k_ip[0]`` / ``to_v_ip[0]`` applied to the
image tokens.
"""

from __future__ import annotations

import re
from typing import Callable, Optional

import numpy as np

from ..aas import ProjectedLatents
from ..errors import ConfigError, WeightsMissingError
from ..sites import UNET_BLOCKS, AttentionSite
from .base import Backend, IPTokenSet

_NAME_RE = re.compile(
    r"^(?:(down|up)_blocks\.(\d+)|mid_block)\.attentions\.(\d+)\.transformer_blocks\.(\d+)\.(attn1|attn2)$"
)

IP_TOKENS = 16


class _Captured(Exception):
    def __init__(self, q, k, v, heads):
        self.q, self.k, self.v, self.heads = q, k, v, heads


class _CaptureProcessor:
    def __init__(self, kind: str, ip_processor=None):
        self.kind = kind
        self.ip_processor = ip_processor

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, temb=None, *a, **kw):
        if getattr(attn, "spatial_norm", None) is not None:
            hidden_states = attn.spatial_norm(hidden_states, temb)
        if hidden_states.ndim == 4:
            b, c, h, w = hidden_states.shape
            hidden_states = hidden_states.view(b, c, h * w).transpose(1, 2)
        if getattr(attn, "group_norm", None) is not None:
            hidden_states = attn.group_norm(hidden_states.transpose(1, 2)).transpose(1, 2)
        q = attn.to_q(hidden_states)
        if self.kind == "self":
            k, v = attn.to_k(hidden_states), attn.to_v(hidden_states)
        else:
            if not isinstance(encoder_hidden_states, tuple):
                raise ConfigError("cross site reached without image tokens")
            ip = encoder_hidden_states[1][0]
            if ip.ndim == 4:
                ip = ip.reshape(ip.shape[0], -1, ip.shape[-1])
            k, v = self.ip_processor.to_k_ip[0](ip), self.ip_processor.to_v_ip[0](ip)
        raise _Captured(q, k, v, attn.heads)


def site_map(unet) -> dict[tuple[str, str, int], str]:
    """``(kind, block, ordinal) -> module name`` for every attention module."""
    groups: dict[tuple[str, int], list] = {}
    for name, _ in unet.named_modules():
        m = _NAME_RE.match(name)
        if not m:
            continue
        side, idx, j, k, which = m.groups()
        group = ("mid", 0) if side is None else (side, int(idx))
        groups.setdefault(group, []).append((int(j), int(k), which, name))
    out = {}
    for side in ("down", "up"):
        blocks = sorted(i for s, i in groups if s == side)
        if len(blocks) > 3:
            raise ConfigError(f"U-Net has {len(blocks)} attention {side} blocks; only 3 are addressable")
        for rank, i in enumerate(blocks):
            _assign(out, f"{side}_{rank}", groups[(side, i)])
    if ("mid", 0) in groups:
        _assign(out, "mid", groups[("mid", 0)])
    return out


def _assign(out, block, members):
    ordinals = {"attn1": 0, "attn2": 0}
    for j, k, which, name in sorted(members):
        kind = "self" if which == "attn1" else "cross"
        out[(kind, block, ordinals[which])] = name
        ordinals[which] += 1


class UNetBackend(Backend):
    is_diffusion = True
    default_timestep = 600

    def __init__(
        self,
        backend_id: str,
        unet,
        vae,
        prompt_embeds,
        alphas_cumprod,
        *,
        added_cond_kwargs: Optional[Callable[[int], dict]] = None,
        ip_processors: Optional[dict] = None,
        ip_projector: Optional[Callable[[np.ndarray], "object"]] = None,
        resolutions=(384, 512, 768, 1024),
        default_resolution: int = 512,
        device: str = "cpu",
        fingerprint: str = "",
    ):
        import torch

        self._torch = torch
        self.backend_id = backend_id
        self.unet = unet.to(device).eval()
        self.vae = vae.to(device).eval()
        self.prompt_embeds = prompt_embeds.to(device)
        self._schedule = np.asarray(alphas_cumprod, dtype=np.float64)
        self.added_cond_kwargs = added_cond_kwargs
        self.ip_processors = ip_processors or {}
        self.ip_projector = ip_projector
        self.supports_cross = bool(self.ip_processors) and ip_projector is not None
        self.resolutions = tuple(resolutions)
        self.default_resolution = default_resolution
        self.device = device
        self._fingerprint = fingerprint
        self._sites = site_map(self.unet)
        self._plain = dict(self.unet.attn_processors)
        self.scaling_factor = float(getattr(self.vae.config, "scaling_factor", 1.0))

    @classmethod
    def from_weights(cls, backend_id: str, root=None, device: Optional[str] = None) -> "UNetBackend":
        """Load a diffusers pipeline from ``$DIFFSIM_WEIGHTS_DIR/<backend_id>``.

        An IP-Adapter Plus checkpoint in ``$DIFFSIM_WEIGHTS_DIR/ip-adapter-<backend_id>``
        (a ``.safetensors`` file plus an ``image_encoder/`` directory) enables
        cross sites.
        """
        from . import weights_dir

        root = root or weights_dir()
        path = None if root is None else root / backend_id
        if path is None or not path.exists():
            raise WeightsMissingError(backend_id, path or f"$DIFFSIM_WEIGHTS_DIR/{backend_id}")
        import torch

        device = device or ("cuda" if torch.cuda.is_available() else "cpu")
        if backend_id == "sdxl":
            from diffusers import StableDiffusionXLPipeline as Pipe
        else:
            from diffusers import StableDiffusionPipeline as Pipe
        pipe = Pipe.from_pretrained(path, safety_checker=None) if backend_id == "sd15" else Pipe.from_pretrained(path)
        pipe.to(device)
        with torch.no_grad():
            if backend_id == "sdxl":
                embeds, _, pooled, _ = pipe.encode_prompt("", device=device, num_images_per_prompt=1,
                                                          do_classifier_free_guidance=False)

                def added(res, pooled=pooled):
                    ids = torch.tensor([[res, res, 0, 0, res, res]], dtype=embeds.dtype, device=device)
                    return {"text_embeds": pooled, "time_ids": ids}
            else:
                embeds, _ = pipe.encode_prompt("", device, 1, False)
                added = None
        ip_processors, ip_projector = {}, None
        ip_dir = root / f"ip-adapter-{backend_id}"
        if ip_dir.exists():
            ip_processors, ip_projector = _load_ip_adapter(pipe, ip_dir, device)
        return cls(
            backend_id, pipe.unet, pipe.vae, embeds, pipe.scheduler.alphas_cumprod.cpu().numpy(),
            added_cond_kwargs=added, ip_processors=ip_processors, ip_projector=ip_projector,
            device=device, default_resolution=1024 if backend_id == "sdxl" else 512,
            fingerprint=str(path),
        )

    def fingerprint(self) -> str:
        return self._fingerprint

    def site_layout(self):
        return [s for s in self._sites if s[0] == "self" or self.supports_cross]

    def schedule(self) -> np.ndarray:
        return self._schedule

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        torch = self._torch
        x = torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1)))[None].to(self.device)
        x = x * 2.0 - 1.0
        with torch.no_grad():
            dist = self.vae.encode(x.to(self.vae.dtype)).latent_dist
            # the posterior mean keeps encoding deterministic
            z = dist.mean * self.scaling_factor
        return z[0].float().cpu().numpy()

    def ip_tokens(self, pixels: np.ndarray) -> IPTokenSet:
        if not self.supports_cross:
            return super().ip_tokens(pixels)
        with self._torch.no_grad():
            t = self.ip_projector(pixels)
        t = t.detach().float().cpu().numpy().reshape(-1, t.shape[-1])
        return IPTokenSet(t)

    def extract(self, latent, site: AttentionSite, ip_tokens: Optional[IPTokenSet] = None) -> ProjectedLatents:
        self.validate_site(site)
        torch = self._torch
        target = self._sites[(site.kind, site.block, site.layer_ordinal)] + ".processor"
        procs = dict(self._plain)
        ctx = self.prompt_embeds
        if site.kind == "cross":
            if ip_tokens is None:
                raise ConfigError("cross site needs image tokens")
            procs.update(self.ip_processors)
            procs[target] = _CaptureProcessor("cross", self.ip_processors[target])
            ip = torch.from_numpy(np.asarray(ip_tokens.tokens, dtype=np.float32)).to(self.device, ctx.dtype)
            ctx = (ctx, [ip[None]])
        else:
            procs[target] = _CaptureProcessor("self")
        self.unet.set_attn_processor(procs)
        sample = torch.from_numpy(np.asarray(latent, dtype=np.float32))[None].to(self.device, self.unet.dtype)
        kwargs = {}
        if self.added_cond_kwargs is not None:
            kwargs["added_cond_kwargs"] = self.added_cond_kwargs(site.resolution)
        try:
            with torch.no_grad():
                self.unet(sample, site.timestep, encoder_hidden_states=ctx, **kwargs)
        except _Captured as c:
            return ProjectedLatents(*(self._heads(t, c.heads) for t in (c.q, c.k, c.v)), site)
        finally:
            self.unet.set_attn_processor(dict(self._plain))
        raise RuntimeError(f"site {target} was never reached")  # pragma: no cover

    @staticmethod
    def _heads(t, heads: int) -> np.ndarray:
        t = t[0].detach().float().cpu().numpy()
        n, inner = t.shape
        return np.ascontiguousarray(t.reshape(n, heads, inner // heads).transpose(1, 0, 2))

    def validate_site(self, site: AttentionSite) -> None:
        super().validate_site(site)
        if isinstance(site.block, int) or site.block not in UNET_BLOCKS:
            raise ConfigError(f"U-Net sites need a named block, got {site.block!r}")


def _load_ip_adapter(pipe, ip_dir, device):
    """Attach IP-Adapter Plus processors and return (processors, projector).

    The projection module is detached from the U-Net so that the U-Net takes
    ready-made image tokens through ``encoder_hidden_states``.
    """
    import torch
    from transformers import CLIPVisionModelWithProjection

    weight = sorted(ip_dir.glob("*.safetensors")) or sorted(ip_dir.glob("*.bin"))
    if not weight:
        raise WeightsMissingError("ip-adapter", ip_dir / "*.safetensors")
    encoder = CLIPVisionModelWithProjection.from_pretrained(ip_dir / "image_encoder").to(device).eval()
    pipe.load_ip_adapter(str(ip_dir), subfolder="", weight_name=weight[0].name)
    unet = pipe.unet
    proj = unet.encoder_hid_proj
    unet.encoder_hid_proj = None
    ip_processors = {
        name: p for name, p in unet.attn_processors.items() if hasattr(p, "to_k_ip")
    }
    size = encoder.config.image_size
    mean = torch.tensor((0.48145466, 0.4578275, 0.40821073), device=device).view(1, 3, 1, 1)
    std = torch.tensor((0.26862954, 0.26130258, 0.27577711), device=device).view(1, 3, 1, 1)

    def project(pixels: np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1)))[None].to(device)
        x = torch.nn.functional.interpolate(x, size=(size, size), mode="bicubic", align_corners=False)
        x = ((x - mean) / std).to(encoder.dtype)
        hidden = encoder(x, output_hidden_states=True).hidden_states[-2]
        return proj([hidden[:, None]])[0]

    # restore plain processors on the U-Net; ours swaps IP ones in per call
    plain = {n: (p if n not in ip_processors else _plain_processor()) for n, p in unet.attn_processors.items()}
    unet.set_attn_processor(plain)
    return ip_processors, project


def _plain_processor():
    from diffusers.models.attention_processor import AttnProcessor2_0

    return AttnProcessor2_0()
