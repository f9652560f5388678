"""Seeded two-block patch-attention network.

Stands in for a denoising U-Net so the whole pipeline runs without model
weights. Every weight is drawn, in a fixed order, from a PCG64 generator
seeded with :data:`TOY_WEIGHT_SEED`. The noise schedule is linear in signal
fraction, ``alpha_bar(t) = 1 - t / T``.

Each block is pre-norm self-attention, optionally cross-attention over image
tokens, and a GELU MLP, all with residual connections. Latents are patch
embeddings ``[tokens, D_MODEL]`` with tokens ``= (resolution / PATCH) ** 2``.
"""

from __future__ import annotations

import hashlib
from typing import Optional

import numpy as np

from ..aas import ProjectedLatents, _multihead
from ..errors import ConfigError
from ..sites import T_TOTAL, AttentionSite
from .base import Backend, IPTokenSet

TOY_WEIGHT_SEED = 20241219
D_MODEL = 16
HEADS = 2
D_HEAD = 4
PATCH = 4
BLOCKS = ("down_0", "up_0")


def sinusoid(positions: np.ndarray, dim: int) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)[:, None]
    freqs = np.exp(-np.log(10000.0) * np.arange(dim // 2) / (dim // 2))[None, :]
    ang = positions * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


class _Linear:
    def __init__(self, rng: np.random.Generator, fan_in: int, fan_out: int, bias: bool = True):
        self.w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        self.b = rng.standard_normal(fan_out) * 0.1 if bias else np.zeros(fan_out)

    def __call__(self, x):
        return x @ self.w + self.b


def _split_heads(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(x.shape[0], HEADS, D_HEAD).transpose(1, 0, 2))


class ToyBackend(Backend):
    is_diffusion = True
    resolutions = (16, 32, 64)
    default_resolution = 32
    default_timestep = 500

    def __init__(self, backend_id: str = "toy-self", with_cross: bool = False, n_ip_tokens: int = 4,
                 seed: int = TOY_WEIGHT_SEED):
        if n_ip_tokens < 1:
            raise ConfigError("n_ip_tokens must be >= 1")
        self.backend_id = backend_id
        self.supports_cross = with_cross
        self.n_ip_tokens = n_ip_tokens
        self.seed = seed
        rng = np.random.Generator(np.random.PCG64(seed))
        inner = HEADS * D_HEAD
        self.embed = _Linear(rng, PATCH * PATCH * 3, D_MODEL)
        self.time = _Linear(rng, D_MODEL, D_MODEL, bias=False)
        self.blocks = []
        for _ in BLOCKS:
            blk = {
                "q": _Linear(rng, D_MODEL, inner),
                "k": _Linear(rng, D_MODEL, inner),
                "v": _Linear(rng, D_MODEL, inner),
                "o": _Linear(rng, inner, D_MODEL),
                "fc1": _Linear(rng, D_MODEL, 2 * D_MODEL),
                "fc2": _Linear(rng, 2 * D_MODEL, D_MODEL),
            }
            # cross weights are always drawn so toy-self and toy-cross share their self layers
            blk.update(
                cq=_Linear(rng, D_MODEL, inner),
                ck=_Linear(rng, D_MODEL, inner),
                cv=_Linear(rng, D_MODEL, inner),
                co=_Linear(rng, inner, D_MODEL),
            )
            self.blocks.append(blk)
        self.ip_proj = _Linear(rng, D_MODEL, D_MODEL)
        self.ip_pos = rng.standard_normal((64, D_MODEL)) * 0.1

    def site_layout(self):
        layout = [("self", b, 0) for b in BLOCKS]
        if self.supports_cross:
            layout += [("cross", b, 0) for b in BLOCKS]
        return layout

    def needs_ip_tokens(self, site: AttentionSite) -> bool:
        # every toy-cross block has a cross layer, so every pass needs tokens
        return self.supports_cross

    def schedule(self) -> np.ndarray:
        return 1.0 - np.arange(T_TOTAL + 1, dtype=np.float64) / T_TOTAL

    def fingerprint(self) -> str:
        h = hashlib.sha256(f"toy:{self.seed}:{self.supports_cross}:{self.n_ip_tokens}".encode())
        return h.hexdigest()[:16]

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        r = pixels.shape[0]
        if pixels.shape != (r, r, 3) or r % PATCH:
            raise ConfigError(f"toy backend needs square RGB input divisible by {PATCH}, got {pixels.shape}")
        x = pixels.astype(np.float64) * 2.0 - 1.0
        g = r // PATCH
        patches = x.reshape(g, PATCH, g, PATCH, 3).transpose(0, 2, 1, 3, 4).reshape(g * g, -1)
        tokens = self.embed(patches) + sinusoid(np.arange(g * g), D_MODEL)
        return tokens.astype(np.float32)

    def ip_tokens(self, pixels: np.ndarray) -> IPTokenSet:
        if not self.supports_cross:
            return super().ip_tokens(pixels)
        latent = self.encode(pixels).astype(np.float64)
        if latent.shape[0] < self.n_ip_tokens:
            raise ConfigError(f"{latent.shape[0]} patches cannot form {self.n_ip_tokens} image tokens")
        pooled = np.stack([c.mean(axis=0) for c in np.array_split(latent, self.n_ip_tokens)])
        pos = self.ip_pos[np.arange(self.n_ip_tokens) % len(self.ip_pos)]
        return IPTokenSet(np.tanh(self.ip_proj(pooled)) + pos)

    def extract(self, latent, site: AttentionSite, ip_tokens: Optional[IPTokenSet] = None) -> ProjectedLatents:
        self.validate_site(site)
        if self.supports_cross and ip_tokens is None:
            raise ConfigError("toy-cross forward pass needs image tokens")
        h = np.asarray(latent, dtype=np.float64)
        h = h + self.time(sinusoid(np.array([site.timestep]), D_MODEL))
        ip = None if ip_tokens is None else ip_tokens.tokens.astype(np.float64)
        for name, blk in zip(BLOCKS, self.blocks):
            n = layer_norm(h)
            q, k, v = (_split_heads(blk[p](n)) for p in ("q", "k", "v"))
            if site.kind == "self" and site.block == name:
                return ProjectedLatents(q, k, v, site).astype(np.float32)
            h = h + blk["o"](_multihead(q, k, v))
            if self.supports_cross:
                n = layer_norm(h)
                q = _split_heads(blk["cq"](n))
                k, v = _split_heads(blk["ck"](ip)), _split_heads(blk["cv"](ip))
                if site.kind == "cross" and site.block == name:
                    return ProjectedLatents(q, k, v, site).astype(np.float32)
                h = h + blk["co"](_multihead(q, k, v))
            h = h + blk["fc2"](gelu(blk["fc1"](layer_norm(h))))
        raise AssertionError("validated site was not reached")  # pragma: no cover
