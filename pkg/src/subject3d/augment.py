"""Seeded photometric and crop augmentations for fine-tuning views.

Color jitter (brightness/contrast within +-10%) and a conservative
random crop-resize (at least 90% of the area) are applied; horizontal
flips never are, since they would falsify the view-direction labels that
the prompts encode.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import ShapeError
from .rng import make_generator


def augment(
    view: torch.Tensor,
    seed: int,
    brightness: float = 0.1,
    contrast: float = 0.1,
    min_crop_area: float = 0.9,
) -> torch.Tensor:
    """Augmented copy of one (3, H, W) image in [-1, 1].

    Deterministic per seed. The identity configuration
    (brightness=contrast=0, min_crop_area=1) returns the input unchanged.
    """
    if view.ndim != 3 or view.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W) image, got {tuple(view.shape)}")
    gen = make_generator(seed, "augment")
    # All draws happen up front so the stream layout does not depend on
    # which operations are active.
    draws = torch.rand(5, generator=gen, dtype=torch.float64)

    h = view.shape[-1]
    out = view
    if brightness > 0 or contrast > 0:
        u = (out + 1.0) / 2.0
        b = 1.0 + brightness * (2.0 * draws[0] - 1.0)
        c = 1.0 + contrast * (2.0 * draws[1] - 1.0)
        u = u * b
        mean = u.mean()
        u = (u - mean) * c + mean
        out = u.clamp(0.0, 1.0) * 2.0 - 1.0
    if min_crop_area < 1.0:
        area = min_crop_area + (1.0 - min_crop_area) * draws[2]
        side = max(1, int(round(h * float(area**0.5))))
        if side < h:
            i = int(torch.floor(draws[3] * (h - side + 1)))
            j = int(torch.floor(draws[4] * (h - side + 1)))
            crop = out[:, i : i + side, j : j + side].unsqueeze(0)
            out = F.interpolate(crop, size=h, mode="bilinear", align_corners=False)[0]
            out = out.clamp(-1.0, 1.0)
    return out
