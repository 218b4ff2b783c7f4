"""Frozen feature encoders standing in for large pretrained ones.

The image encoder pools a coarse color grid plus global color statistics
and pushes them through a seeded, frozen random projection; its contract
is determinism, unit-norm output, and separating the synthetic corpus
subjects from one another. The text encoder is a stateless hashed
bag-of-tokens embedding. Neither is ever trained.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ShapeError
from .rng import make_generator


@dataclass(frozen=True)
class ImageFeatures:
    """Unit-norm embedding of one image plus the id of its encoder."""

    embedding: torch.Tensor
    encoder_id: str

    def __post_init__(self):
        if not torch.isfinite(self.embedding).all():
            raise ShapeError("ImageFeatures embedding contains non-finite values")


class ImageFeatureEncoder:
    """Seeded-then-frozen image embedder.

    Features are the per-channel means over a coarse spatial grid plus
    doubled-weight global mean/second-moment statistics, projected to
    ``dim`` dimensions and L2-normalized. Color composition dominates the
    embedding, which is what separates the procedural corpus subjects.
    """

    def __init__(self, dim: int = 64, grid: int = 4, input_resolution: int = 16, seed: int = 101):
        self.dim = dim
        self.grid = grid
        self.input_resolution = input_resolution
        self.seed = seed
        feat_len = grid * grid * 3 + 6
        gen = make_generator(seed, "image-encoder")
        raw = torch.randn(max(dim, feat_len), min(dim, feat_len), generator=gen, dtype=torch.float64)
        # Semi-orthogonal mixing: norm-preserving and linearly invertible,
        # so downstream linear layers can decode the pooled statistics.
        q, _ = torch.linalg.qr(raw)
        self.projection = q if dim >= feat_len else q.T

    @property
    def encoder_id(self) -> str:
        return f"poolrp-d{self.dim}-g{self.grid}-r{self.input_resolution}-s{self.seed}"

    def features(self, img: torch.Tensor) -> torch.Tensor:
        if img.ndim != 3 or img.shape[0] != 3:
            raise ShapeError(f"expected (3, H, W) image, got {tuple(img.shape)}")
        if not torch.isfinite(img).all():
            raise ShapeError("image contains non-finite pixels")
        x = img.to(torch.float64).unsqueeze(0)
        if x.shape[-1] != self.input_resolution:
            x = F.interpolate(x, size=self.input_resolution, mode="bilinear", align_corners=False)
        grid_means = F.adaptive_avg_pool2d(x, self.grid).flatten()
        global_mean = x.mean(dim=(0, 2, 3))
        global_sq = x.pow(2).mean(dim=(0, 2, 3))
        # Global color statistics get double weight relative to grid cells.
        return torch.cat([grid_means, 2.0 * global_mean, 2.0 * global_sq])

    def encode(self, img: torch.Tensor) -> ImageFeatures:
        z = self.projection @ self.features(img)
        z = z / z.norm().clamp_min(1e-12)
        return ImageFeatures(embedding=z, encoder_id=self.encoder_id)


def encode_image(encoder: ImageFeatureEncoder, img) -> ImageFeatures:
    """Deterministic unit-norm features of one image (resampled if needed)."""
    data = img.data[0] if hasattr(img, "data") and getattr(img, "data").ndim == 4 else img
    return encoder.encode(data)


class HashTextEncoder:
    """Deterministic bag-of-tokens text embedding.

    Each token maps to a fixed Gaussian vector seeded from a BLAKE2 hash
    of (encoder seed, token); a prompt embeds as the normalized token
    sum. Stable across processes and platforms.
    """

    def __init__(self, dim: int = 16, seed: int = 202):
        self.dim = dim
        self.seed = seed

    @property
    def encoder_id(self) -> str:
        return f"hashbow-d{self.dim}-s{self.seed}"

    def _token_vector(self, token: str) -> torch.Tensor:
        h = hashlib.blake2b(f"{self.seed}:{token}".encode(), digest_size=8)
        gen = torch.Generator(device="cpu")
        gen.manual_seed(int.from_bytes(h.digest(), "little") & ((1 << 63) - 1))
        return torch.randn(self.dim, generator=gen, dtype=torch.float64)

    def encode(self, text: str) -> torch.Tensor:
        tokens = [t.strip(",.!?;:").lower() for t in text.split()]
        tokens = [t for t in tokens if t]
        if not tokens:
            return torch.zeros(self.dim, dtype=torch.float64)
        z = torch.stack([self._token_vector(t) for t in tokens]).sum(dim=0)
        return z / z.norm().clamp_min(1e-12)


def text_condition(encoder: HashTextEncoder, text: str) -> torch.Tensor | None:
    """Prompt embedding, or None (the null text condition) for blank text."""
    if not text or not text.strip():
        return None
    return encoder.encode(text)
