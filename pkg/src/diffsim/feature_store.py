"""Content-addressed on-disk cache of projected latents and image tokens.

Layout::

    <root>/<backend_id>/<key digest>.bin    little-endian float32 payload
    <root>/<backend_id>/<key digest>.json   shapes, checksum, key, metadata

Both files are written to a temporary name and renamed into place, so a
reader sees either the old entry or the new one, never a partial write.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .aas import ProjectedLatents
from .backends.base import IPTokenSet
from .errors import CacheIntegrityError, DiffSimError
from .sites import AttentionSite

CACHE_ENV = "DIFFSIM_CACHE_DIR"
_DTYPE = np.dtype("<f4")
FORMAT_VERSION = 1

Entry = Union[ProjectedLatents, IPTokenSet]

# payload order per entry kind (the sidecar's JSON object order is not used)
_LAYOUT = {"qkv": ("q", "k", "v"), "ip_tokens": ("tokens",)}


@dataclass(frozen=True)
class CacheKey:
    image_hash: str
    backend_id: str
    site: str  # AttentionSite.canonical()
    noise_seed: int
    resolution: int
    noise_mode: str = "shared"  # "shared" | "per_image" | "none"
    variant: str = ""  # preprocessing flags, e.g. "crop"
    payload: str = "qkv"  # "qkv" | "ip_tokens"

    def canonical(self) -> str:
        return json.dumps(list(asdict(self).values()), separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    @classmethod
    def for_site(cls, image_hash: str, site: AttentionSite, noise_seed: int, shared_noise: bool,
                 is_diffusion: bool = True, crop_subject: bool = False) -> "CacheKey":
        if is_diffusion:
            mode = "shared" if shared_noise else "per_image"
        else:
            mode, noise_seed = "none", 0
        return cls(image_hash, site.backend_id, site.canonical(), noise_seed, site.resolution, mode,
                   "crop" if crop_subject else "")


class FeatureStore:
    def __init__(self, root: Union[str, os.PathLike]):
        self.root = Path(root)

    @classmethod
    def from_env(cls) -> Optional["FeatureStore"]:
        root = os.environ.get(CACHE_ENV)
        return cls(root) if root else None

    def _paths(self, key: CacheKey) -> tuple[Path, Path]:
        d = self.root / key.backend_id
        stem = key.digest()
        return d / f"{stem}.bin", d / f"{stem}.json"

    def _atomic_write(self, path: Path, data: bytes) -> None:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
            try:
                with os.fdopen(fd, "wb") as f:
                    f.write(data)
                os.replace(tmp, path)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise
        except OSError as e:
            raise DiffSimError(f"cannot write cache file {path}: {e}") from e

    def put(self, key: CacheKey, entry: Entry) -> None:
        if isinstance(entry, ProjectedLatents):
            arrays = {"q": entry.q, "k": entry.k, "v": entry.v}
            kind = "qkv"
            extra = {"site": None if entry.site is None else entry.site.to_dict(), "source_id": entry.source_id}
        elif isinstance(entry, IPTokenSet):
            arrays = {"tokens": entry.tokens}
            kind = "ip_tokens"
            extra = {"source_id": entry.source_id}
        else:
            raise TypeError(f"cannot cache {type(entry).__name__}")
        chunks, shapes = [], {}
        for name in _LAYOUT[kind]:
            a = arrays[name]
            chunks.append(np.ascontiguousarray(a, dtype=_DTYPE).tobytes())
            shapes[name] = list(a.shape)
        payload = b"".join(chunks)
        bin_path, meta_path = self._paths(key)
        meta = {
            "format": FORMAT_VERSION,
            "kind": kind,
            "dtype": _DTYPE.str,
            "shapes": shapes,
            "sha256": hashlib.sha256(payload).hexdigest(),
            "key": asdict(key),
            "created": time.time(),
            **extra,
        }
        self._atomic_write(bin_path, payload)
        self._atomic_write(meta_path, json.dumps(meta, sort_keys=True).encode())

    def get(self, key: CacheKey) -> Optional[Entry]:
        """The cached entry, or ``None`` when absent."""
        bin_path, meta_path = self._paths(key)
        try:
            meta_bytes = meta_path.read_bytes()
            payload = bin_path.read_bytes()
        except FileNotFoundError:
            return None
        except OSError as e:
            raise DiffSimError(f"cannot read cache entry {meta_path}: {e}") from e
        ck = key.canonical()
        try:
            meta = json.loads(meta_bytes)
            shapes = meta["shapes"]
            expected = meta["sha256"]
            names = _LAYOUT[meta["kind"]]
        except (ValueError, KeyError, TypeError) as e:
            raise CacheIntegrityError(ck, f"unreadable sidecar: {e}") from e
        if hashlib.sha256(payload).hexdigest() != expected:
            raise CacheIntegrityError(ck, "payload checksum mismatch")
        if meta.get("key") != asdict(key):
            raise CacheIntegrityError(ck, "sidecar belongs to a different key")
        try:
            counts = [int(np.prod(shapes[name])) for name in names]
        except (KeyError, TypeError, ValueError) as e:
            raise CacheIntegrityError(ck, f"bad shapes in sidecar: {e}") from e
        if sum(counts) * _DTYPE.itemsize != len(payload):
            raise CacheIntegrityError(ck, "payload length does not match shapes")
        arrays, off = {}, 0
        for name, count in zip(names, counts):
            flat = np.frombuffer(payload, dtype=_DTYPE, count=count, offset=off)
            arrays[name] = flat.reshape(shapes[name]).astype(np.float32)
            off += count * _DTYPE.itemsize
        try:
            os.utime(meta_path)  # LRU bookkeeping for gc
        except OSError:
            pass
        if meta["kind"] == "ip_tokens":
            return IPTokenSet(arrays["tokens"], meta.get("source_id", ""))
        site = meta.get("site")
        return ProjectedLatents(
            arrays["q"], arrays["k"], arrays["v"],
            None if site is None else AttentionSite.from_dict(site),
            meta.get("source_id", ""),
        )

    def entries(self) -> list[tuple[Path, Path]]:
        out = []
        if not self.root.exists():
            return out
        for meta in sorted(self.root.glob("*/*.json")):
            out.append((meta.with_suffix(".bin"), meta))
        return out

    def size_bytes(self) -> int:
        total = 0
        for b, m in self.entries():
            for p in (b, m):
                if p.exists():
                    total += p.stat().st_size
        return total

    def gc(self, max_bytes: int) -> int:
        """Evict least recently used entries until the cache fits ``max_bytes``.

        Returns the number of evicted entries.
        """
        items = []
        for b, m in self.entries():
            size = sum(p.stat().st_size for p in (b, m) if p.exists())
            items.append((m.stat().st_mtime, str(m), size, b, m))
        total = sum(i[2] for i in items)
        evicted = 0
        for _, _, size, b, m in sorted(items):
            if total <= max_bytes:
                break
            for p in (m, b):
                try:
                    p.unlink()
                except FileNotFoundError:
                    pass
            total -= size
            evicted += 1
        return evicted
