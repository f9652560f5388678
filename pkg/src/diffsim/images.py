"""Image decoding, content hashing and the fixed resize pipeline."""

from __future__ import annotations

import hashlib
import io
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ImageError

ImageSource = Union[str, os.PathLike, bytes, np.ndarray, Image.Image, "LoadedImage"]


@dataclass(frozen=True, eq=False)
class LoadedImage:
    """Decoded RGB pixels plus the hex digest that identifies them."""

    pixels: np.ndarray  # uint8 [H, W, 3]
    digest: str
    name: str = ""


def _digest_array(a: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(f"{a.dtype.str}:{a.shape}".encode())
    h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def _to_rgb_array(img: Image.Image) -> np.ndarray:
    return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()


def load_image(source: ImageSource) -> LoadedImage:
    """Decode ``source`` to RGB.

    Files and raw bytes are hashed over their encoded bytes, so two
    byte-identical files share a digest. Arrays and PIL images are hashed over
    their decoded pixels.
    """
    if isinstance(source, LoadedImage):
        return source
    if isinstance(source, (str, os.PathLike)):
        path = Path(source)
        try:
            data = path.read_bytes()
        except OSError as e:
            raise ImageError(f"cannot read image {path}: {e}") from e
        return _decode_bytes(data, str(path))
    if isinstance(source, (bytes, bytearray)):
        return _decode_bytes(bytes(source), "<bytes>")
    if isinstance(source, Image.Image):
        px = _to_rgb_array(source)
        return LoadedImage(px, _digest_array(px), "<pil>")
    if isinstance(source, np.ndarray):
        px = _normalize_array(source)
        return LoadedImage(px, _digest_array(px), "<array>")
    raise ImageError(f"unsupported image source type {type(source).__name__}")


def _decode_bytes(data: bytes, name: str) -> LoadedImage:
    try:
        with Image.open(io.BytesIO(data)) as img:
            px = _to_rgb_array(img)
    except (UnidentifiedImageError, OSError) as e:
        raise ImageError(f"cannot decode image {name}: {e}") from e
    return LoadedImage(px, hashlib.sha256(data).hexdigest(), name)


def _normalize_array(a: np.ndarray) -> np.ndarray:
    if a.ndim == 2:
        a = np.stack([a] * 3, axis=-1)
    if a.ndim != 3 or a.shape[2] not in (3, 4):
        raise ImageError(f"expected an HxWx3 image array, got shape {a.shape}")
    a = a[..., :3]
    if a.dtype != np.uint8:
        if np.issubdtype(a.dtype, np.floating):
            if not np.all(np.isfinite(a)):
                raise ImageError("image array contains non-finite values")
            a = np.clip(np.round(a * 255.0), 0, 255)
        a = a.astype(np.uint8)
    return np.ascontiguousarray(a)


def center_crop_square(px: np.ndarray) -> np.ndarray:
    h, w = px.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return px[top : top + s, left : left + s]


def subject_box(px: np.ndarray, threshold: int = 24) -> tuple[int, int, int, int]:
    """Bounding box ``(top, left, bottom, right)`` of pixels that differ from
    the median border colour by more than ``threshold`` in any channel.

    Falls back to the full frame when nothing stands out.
    """
    border = np.concatenate([px[0], px[-1], px[:, 0], px[:, -1]]).astype(np.int16)
    bg = np.median(border, axis=0)
    mask = np.any(np.abs(px.astype(np.int16) - bg) > threshold, axis=-1)
    if not mask.any():
        return 0, 0, px.shape[0], px.shape[1]
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def preprocess(img: LoadedImage, resolution: int, crop_subject: bool = False) -> np.ndarray:
    """Optional subject crop, centre crop to square, bicubic resize.

    Returns float32 ``[resolution, resolution, 3]`` in ``[0, 1]``.
    """
    px = img.pixels
    if crop_subject:
        t, l, b, r = subject_box(px)
        px = px[t:b, l:r]
    px = center_crop_square(px)
    out = Image.fromarray(px).resize((resolution, resolution), Image.Resampling.BICUBIC)
    return np.asarray(out, dtype=np.float32) / 255.0
