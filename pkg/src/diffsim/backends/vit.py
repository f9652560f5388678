"""Self-attention projections from pretrained vision transformers (CLIP, DINOv2).

No noising happens here. The image is resized to the model's native input
size, normalised with the model's statistics and passed through the encoder
up to the requested layer, where a pre-forward hook reads the layer input and
applies the layer's own query/key/value projections. All tokens, including
the class token, are kept.
"""

from __future__ import annotations

import re
from typing import Optional

import numpy as np

from ..aas import ProjectedLatents
from ..errors import WeightsMissingError
from ..sites import AttentionSite
from .base import Backend, IPTokenSet

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

_ATTN_RE = re.compile(r"(?:^|\.)encoder\.layers?\.(\d+)\.(?:self_attn|attention\.attention)$")
_PROJ_NAMES = (("q_proj", "k_proj", "v_proj"), ("query", "key", "value"))


class _Captured(Exception):
    def __init__(self, q, k, v):
        self.q, self.k, self.v = q, k, v


def _find_layers(model) -> list:
    found = {}
    for name, mod in model.named_modules():
        m = _ATTN_RE.search(name)
        if m:
            found[int(m.group(1))] = mod
    return [found[i] for i in sorted(found)]


def _projections(mod):
    for names in _PROJ_NAMES:
        if all(hasattr(mod, n) for n in names):
            return tuple(getattr(mod, n) for n in names)
    raise TypeError(f"no q/k/v projections on {type(mod).__name__}")


class ViTBackend(Backend):
    is_diffusion = False
    supports_cross = False
    default_timestep = None

    def __init__(self, backend_id: str, model, mean, std, image_size: int, heads: int,
                 device: str = "cpu", fingerprint: str = ""):
        import torch

        self.backend_id = backend_id
        self.model = model.to(device).eval()
        self.mean = np.asarray(mean, dtype=np.float32)
        self.std = np.asarray(std, dtype=np.float32)
        self.image_size = image_size
        self.heads = heads
        self.device = device
        self._torch = torch
        self._layers = _find_layers(self.model)
        if not self._layers:
            raise TypeError(f"no attention layers found in {type(model).__name__}")
        self.resolutions = (image_size,)
        self.default_resolution = image_size
        self._fingerprint = fingerprint

    @classmethod
    def from_weights(cls, backend_id: str, root=None, device: Optional[str] = None) -> "ViTBackend":
        from . import weights_dir

        root = root or weights_dir()
        path = None if root is None else root / backend_id
        if path is None or not path.exists():
            raise WeightsMissingError(backend_id, path or f"$DIFFSIM_WEIGHTS_DIR/{backend_id}")
        import torch

        device = device or ("cuda" if torch.cuda.is_available() else "cpu")
        if backend_id == "clip-vit":
            from transformers import CLIPVisionModel

            model = CLIPVisionModel.from_pretrained(path)
            mean, std = CLIP_MEAN, CLIP_STD
        else:
            from transformers import Dinov2Model

            model = Dinov2Model.from_pretrained(path)
            mean, std = IMAGENET_MEAN, IMAGENET_STD
        cfg = model.config
        return cls(backend_id, model, mean, std, cfg.image_size, cfg.num_attention_heads, device,
                   fingerprint=str(path))

    def fingerprint(self) -> str:
        return self._fingerprint

    def site_layout(self):
        return [("self", i, 0) for i in range(len(self._layers))]

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        if pixels.shape[0] != self.image_size:
            from PIL import Image

            img = Image.fromarray(np.clip(np.round(pixels * 255), 0, 255).astype(np.uint8))
            img = img.resize((self.image_size, self.image_size), Image.Resampling.BICUBIC)
            pixels = np.asarray(img, dtype=np.float32) / 255.0
        x = (pixels - self.mean) / self.std
        return np.ascontiguousarray(x.transpose(2, 0, 1), dtype=np.float32)

    def extract(self, latent, site: AttentionSite, ip_tokens: Optional[IPTokenSet] = None) -> ProjectedLatents:
        self.validate_site(site)
        torch = self._torch
        layer = self._layers[site.block]
        pq, pk, pv = _projections(layer)

        def hook(mod, args, kwargs):
            h = args[0] if args else kwargs["hidden_states"]
            raise _Captured(pq(h), pk(h), pv(h))

        handle = layer.register_forward_pre_hook(hook, with_kwargs=True)
        x = torch.from_numpy(np.asarray(latent, dtype=np.float32))[None].to(self.device)
        try:
            with torch.no_grad():
                self.model(pixel_values=x)
        except _Captured as c:
            q, k, v = (self._heads(t) for t in (c.q, c.k, c.v))
            return ProjectedLatents(q, k, v, site)
        finally:
            handle.remove()
        raise RuntimeError(f"layer {site.block} was never reached")  # pragma: no cover

    def _heads(self, t) -> np.ndarray:
        t = t[0].detach().float().cpu().numpy()  # [tokens, inner]
        n, inner = t.shape
        return np.ascontiguousarray(t.reshape(n, self.heads, inner // self.heads).transpose(1, 0, 2))
