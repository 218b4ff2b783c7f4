"""Single-view normal estimation by silhouette inflation.

The estimator segments the foreground against the known background
color, inflates the silhouette into a height field via the distance
transform (h = sqrt(D * (2 * Dmax - D)), which reproduces a hemisphere
exactly on a circular silhouette), and reads normals off the height
gradient. Output is a camera-frame unit-vector map with the fixed
back-facing vector on background pixels. A pluggable interface: any
object with an ``estimate(img) -> (3, H, W)`` method can stand in.
"""

from __future__ import annotations

import numpy as np
import torch
from scipy import ndimage

from .errors import ShapeError
from .images import BACK_FACING


class NormalEstimator:
    """Silhouette-inflation estimator with a configurable background."""

    def __init__(self, background=(1.0, 1.0, 1.0), bg_tol: float = 0.08, smooth_sigma: float = 0.7):
        self.background = torch.tensor(background, dtype=torch.float64)
        self.bg_tol = bg_tol
        self.smooth_sigma = smooth_sigma

    def foreground_mask(self, img: torch.Tensor) -> torch.Tensor:
        diff = (img - self.background[:, None, None]).abs().amax(dim=0)
        return diff > self.bg_tol

    def estimate(self, img: torch.Tensor) -> torch.Tensor:
        if img.ndim != 3 or img.shape[0] != 3:
            raise ShapeError(f"expected (3, H, W) image, got {tuple(img.shape)}")
        h, w = img.shape[1:]
        mask = self.foreground_mask(img).numpy()
        out = np.zeros((3, h, w))
        out[2] = BACK_FACING[2]
        if mask.any():
            dist = ndimage.distance_transform_edt(mask)
            d_max = dist.max()
            height = np.sqrt(np.maximum(dist * (2.0 * d_max - dist), 0.0))
            if self.smooth_sigma > 0:
                height = ndimage.gaussian_filter(height, self.smooth_sigma)
            grad_i, grad_j = np.gradient(height)
            # Image rows grow downward while camera y points up.
            n = np.stack([-grad_j, grad_i, np.ones_like(height)])
            n /= np.maximum(np.linalg.norm(n, axis=0, keepdims=True), 1e-12)
            out[:, mask] = n[:, mask]
        return torch.from_numpy(out)


def estimate_normals(estimator, img: torch.Tensor) -> torch.Tensor:
    """Per-pixel unit normals for one color view (background back-facing)."""
    return estimator.estimate(img)


def estimate_batch_normals(estimator, colors: torch.Tensor) -> torch.Tensor:
    """Stacked normals for a (N, 3, H, W) view stack."""
    return torch.stack([estimator.estimate(colors[i]) for i in range(colors.shape[0])])
