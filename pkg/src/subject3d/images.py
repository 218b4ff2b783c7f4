"""Image batches and their fixed on-disk encodings.

Conventions, used everywhere in the package:

* In memory, images are float64 tensors shaped (B, 3, H, W) with square
  H = W. Clean images and final samples live in [-1, 1]; intermediate
  noisy states are unbounded.
* Color PNGs store the affine map [-1, 1] -> [0, 255]:
  ``u8 = round((x + 1) / 2 * 255)`` and back ``x = u8 / 255 * 2 - 1``.
* Normal maps are per-pixel unit vectors n encoded as RGB via
  ``(n + 1) / 2`` in [0, 1] and the same 8-bit quantization. Background
  pixels hold the fixed back-facing vector (0, 0, -1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from .errors import ShapeError

DTYPE = torch.float64

# Background vector for normal maps: points away from the camera.
BACK_FACING = (0.0, 0.0, -1.0)


@dataclass
class ImageBatch:
    """A batch of square 3-channel images plus optional per-item labels.

    ``data`` is (B, 3, H, W) float. ``labels`` carries per-item metadata
    such as view direction or prompt id; when present it must have one
    entry per batch item.
    """

    data: torch.Tensor
    labels: list | None = field(default=None)

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeError(f"ImageBatch data must be (B, C, H, W), got {tuple(self.data.shape)}")
        b, c, h, w = self.data.shape
        if c != 3:
            raise ShapeError(f"ImageBatch must have 3 channels, got {c}")
        if h != w:
            raise ShapeError(f"ImageBatch images must be square, got {h}x{w}")
        if not torch.isfinite(self.data).all():
            raise ShapeError("ImageBatch contains non-finite values")
        if self.labels is not None and len(self.labels) != b:
            raise ShapeError(f"{len(self.labels)} labels for {b} items")

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def resolution(self) -> int:
        return self.data.shape[-1]

    def item(self, i: int) -> torch.Tensor:
        """Single image (3, H, W)."""
        return self.data[i]


def single(img: torch.Tensor, label=None) -> ImageBatch:
    """Wrap one (3, H, W) image as a batch of size 1."""
    batch = img.unsqueeze(0) if img.ndim == 3 else img
    return ImageBatch(batch, labels=None if label is None else [label])


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """(3, H, W) in [-1, 1] -> (H, W, 3) uint8 via the documented affine map."""
    arr = img.detach().cpu().numpy()
    u8 = np.round((np.clip(arr, -1.0, 1.0) + 1.0) / 2.0 * 255.0)
    return u8.astype(np.uint8).transpose(1, 2, 0)


def from_uint8(u8: np.ndarray) -> torch.Tensor:
    """(H, W, 3) uint8 -> (3, H, W) float64 in [-1, 1]."""
    arr = u8.astype(np.float64).transpose(2, 0, 1)
    return torch.from_numpy(arr / 255.0 * 2.0 - 1.0)


def save_png(img: torch.Tensor, path) -> None:
    """Save one (3, H, W) image in [-1, 1] as an 8-bit PNG."""
    Image.fromarray(to_uint8(img), mode="RGB").save(str(path), format="PNG")


def load_png(path) -> torch.Tensor:
    """Load an 8-bit PNG back to a (3, H, W) float64 image in [-1, 1]."""
    with Image.open(str(path)) as im:
        u8 = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return from_uint8(u8)


def encode_normal_map(normals: torch.Tensor) -> torch.Tensor:
    """Unit-vector map (3, H, W) -> image in [-1, 1] for PNG storage.

    The map n -> (n + 1) / 2 lands in [0, 1]; re-expressed in the [-1, 1]
    image convention it is the identity, so this only validates shape.
    """
    if normals.shape[0] != 3:
        raise ShapeError("normal map must be (3, H, W)")
    return normals.clone()


def decode_normal_map(img: torch.Tensor, renormalize: bool = True) -> torch.Tensor:
    """Inverse of the normal-map PNG encoding, with optional re-normalization.

    8-bit quantization perturbs unit length by up to ~7e-3 per channel, so
    decoded vectors are rescaled to unit norm by default.
    """
    n = img.clone()
    if renormalize:
        norm = n.pow(2).sum(dim=0, keepdim=True).sqrt().clamp_min(1e-12)
        n = n / norm
    return n


def save_normal_png(normals: torch.Tensor, path) -> None:
    save_png(encode_normal_map(normals), path)


def load_normal_png(path) -> torch.Tensor:
    return decode_normal_map(load_png(path))


def save_mask_png(mask: torch.Tensor, path) -> None:
    """Save a boolean/float (H, W) mask as an 8-bit grayscale PNG."""
    u8 = (mask.detach().cpu().numpy() > 0.5).astype(np.uint8) * 255
    Image.fromarray(u8, mode="L").save(str(path), format="PNG")


def load_mask_png(path) -> torch.Tensor:
    with Image.open(str(path)) as im:
        u8 = np.asarray(im.convert("L"), dtype=np.uint8)
    return torch.from_numpy(u8 > 127)
