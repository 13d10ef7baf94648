"""Image conventions, lossless IO, and a synthetic working corpus.

Images are float32 torch tensors shaped (3, h, w), RGB, values in [0, 1].
PNG is the only write format so saved watermarked images survive a
round-trip bit-exactly after 8-bit quantization.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import InvalidInputError


def check_image(t: torch.Tensor) -> torch.Tensor:
    if not isinstance(t, torch.Tensor) or t.ndim != 3 or t.shape[0] != 3:
        raise InvalidInputError("expected a (3, h, w) tensor")
    if not torch.isfinite(t).all():
        raise InvalidInputError("image contains non-finite values")
    if t.min() < 0.0 or t.max() > 1.0:
        raise InvalidInputError("image values must lie in [0, 1]")
    return t


def quantize(t: torch.Tensor) -> torch.Tensor:
    """Snap to the 8-bit grid; idempotent."""
    return torch.round(t.clamp(0.0, 1.0) * 255.0) / 255.0


def to_uint8(t: torch.Tensor) -> np.ndarray:
    arr = torch.round(t.clamp(0.0, 1.0) * 255.0).to(torch.uint8)
    return arr.permute(1, 2, 0).cpu().numpy()


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    # PIL hands out read-only buffers; copy so torch gets a writable one
    t = torch.from_numpy(np.array(arr, copy=True)).permute(2, 0, 1)
    return t.to(torch.float32) / 255.0


def save_image(t: torch.Tensor, path: str | Path) -> None:
    path = Path(path)
    if path.suffix.lower() != ".png":
        raise InvalidInputError("images are saved as PNG only")
    Image.fromarray(to_uint8(t), mode="RGB").save(path, format="PNG")


def load_image(path: str | Path) -> torch.Tensor:
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        return from_uint8(np.asarray(rgb))


def synthetic_corpus(n: int, size: int = 64, seed: int = 0) -> torch.Tensor:
    """Deterministic textured test images, (n, 3, size, size) in [0.05, 0.95].

    Each image mixes a few random low-frequency cosine waves with smoothed
    noise, giving enough structure for autoencoder training while keeping
    pixel values away from the clamp boundaries.
    """
    if n < 1 or size < 8:
        raise InvalidInputError("need n >= 1 and size >= 8")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(
        np.arange(size, dtype=np.float64),
        np.arange(size, dtype=np.float64),
        indexing="ij",
    )
    out = np.empty((n, 3, size, size), dtype=np.float64)
    for i in range(n):
        for c in range(3):
            img = np.zeros((size, size), dtype=np.float64)
            for _ in range(4):
                fy, fx = rng.uniform(-3.0, 3.0, size=2)
                phase = rng.uniform(0.0, 2.0 * math.pi)
                amp = rng.uniform(0.3, 1.0)
                img += amp * np.cos(2.0 * math.pi * (fy * yy + fx * xx) / size + phase)
            img += 0.6 * _smooth_noise(rng, size)
            lo, hi = img.min(), img.max()
            span = hi - lo if hi > lo else 1.0
            out[i, c] = 0.05 + 0.9 * (img - lo) / span
    return torch.from_numpy(out).to(torch.float32)


def _smooth_noise(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.standard_normal((size // 8, size // 8))
    t = torch.from_numpy(coarse)[None, None]
    up = torch.nn.functional.interpolate(
        t, size=(size, size), mode="bilinear", align_corners=False
    )
    return up[0, 0].numpy()
