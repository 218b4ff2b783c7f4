"""Anisotropic Gaussian splats: representation, rendering, per-subject fitting.

Rendering projects each splat's 3D covariance through the camera
Jacobian (EWA approximation), truncates at 3 sigma, and alpha-composites
front to back with a white background. It is plain differentiable torch,
deterministic, and sized for desk-scale scenes (a few hundred splats at
32x32), standing in for a pretrained feed-forward splat predictor while
keeping the same interface.

Rendering and baking parallelize freely over pixels; fitting is
single-writer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .cameras import Camera
from .errors import NonFiniteError, ShapeError
from .multiview import MultiViewBatch
from .rng import make_generator

BACKGROUND = (1.0, 1.0, 1.0)  # white, matching the corpus renders
ALPHA_CEILING = 0.995
COV_BLUR = 0.1  # px^2 low-pass added to projected covariances


@dataclass
class GaussianSet:
    """K splats: position, per-axis scale, rotation, opacity, color."""

    positions: torch.Tensor  # (K, 3)
    scales: torch.Tensor  # (K, 3) > 0
    rotations: torch.Tensor  # (K, 4) unit quaternions (w, x, y, z)
    opacities: torch.Tensor  # (K,) in [0, 1]
    colors: torch.Tensor  # (K, 3) in [0, 1]

    def __post_init__(self):
        k = self.positions.shape[0]
        shapes = {
            "positions": (k, 3),
            "scales": (k, 3),
            "rotations": (k, 4),
            "opacities": (k,),
            "colors": (k, 3),
        }
        for name, want in shapes.items():
            got = tuple(getattr(self, name).shape)
            if got != want:
                raise ShapeError(f"{name} must be {want}, got {got}")
            if not torch.isfinite(getattr(self, name)).all():
                raise ShapeError(f"{name} contains non-finite values")
        if k:
            if (self.scales <= 0).any():
                raise ShapeError("scales must be positive")
            qnorm = self.rotations.pow(2).sum(dim=1).sqrt()
            if (qnorm - 1.0).abs().max() > 1e-6:
                raise ShapeError("rotations must be unit quaternions (within 1e-6)")
            if self.opacities.min() < 0 or self.opacities.max() > 1:
                raise ShapeError("opacities must lie in [0, 1]")

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def save(self, path) -> None:
        np.savez_compressed(
            str(path),
            positions=self.positions.numpy(),
            scales=self.scales.numpy(),
            rotations=self.rotations.numpy(),
            opacities=self.opacities.numpy(),
            colors=self.colors.numpy(),
        )

    @classmethod
    def load(cls, path) -> "GaussianSet":
        with np.load(str(path)) as data:
            return cls(
                positions=torch.from_numpy(data["positions"]),
                scales=torch.from_numpy(data["scales"]),
                rotations=torch.from_numpy(data["rotations"]),
                opacities=torch.from_numpy(data["opacities"]),
                colors=torch.from_numpy(data["colors"]),
            )


def quaternions_to_rotations(q: torch.Tensor) -> torch.Tensor:
    """(K, 4) quaternions (w, x, y, z) -> (K, 3, 3) rotation matrices."""
    q = q / q.pow(2).sum(dim=1, keepdim=True).sqrt().clamp_min(1e-12)
    w, x, y, z = q.unbind(dim=1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=1).reshape(-1, 3, 3)


def world_covariances(scales: torch.Tensor, rotations: torch.Tensor) -> torch.Tensor:
    rot = quaternions_to_rotations(rotations)
    rs = rot * scales.unsqueeze(1)  # R @ diag(s)
    return rs @ rs.transpose(1, 2)


def _camera_tensors(camera: Camera, dtype):
    rot = torch.from_numpy(camera.rotation_world_to_cam()).to(dtype)
    eye = torch.from_numpy(camera.eye()).to(dtype)
    return rot, eye


def _render_components(
    positions: torch.Tensor,
    scales: torch.Tensor,
    rotations: torch.Tensor,
    opacities: torch.Tensor,
    colors: torch.Tensor,
    cameras: list[Camera],
) -> torch.Tensor:
    """Differentiable core over V cameras at once; returns (V, 3, H, W) in [0, 1].

    All cameras must share one resolution. Splats are composited front to
    back per view; depth ordering uses each view's camera depth.
    """
    dtype = positions.dtype
    res = cameras[0].resolution
    n_px = res * res
    n_views = len(cameras)
    bg = torch.tensor(BACKGROUND, dtype=dtype)
    k = positions.shape[0]
    if k == 0:
        return bg[None, :, None].expand(n_views, 3, n_px).reshape(n_views, 3, res, res)

    rots = torch.stack([_camera_tensors(c, dtype)[0] for c in cameras])  # (V, 3, 3)
    eyes = torch.stack([_camera_tensors(c, dtype)[1] for c in cameras])  # (V, 3)
    focals = torch.tensor([c.focal for c in cameras], dtype=dtype)  # (V,)
    c_half = res / 2.0

    p_cam = torch.einsum("vij,vkj->vki", rots, positions[None] - eyes[:, None])  # (V, K, 3)
    zn = (-p_cam[..., 2]).clamp_min(1e-6)  # positive depth in front of the camera
    f = focals[:, None]
    u = c_half + f * p_cam[..., 0] / zn
    v = c_half - f * p_cam[..., 1] / zn

    cov_world = world_covariances(scales, rotations)  # (K, 3, 3)
    cov_cam = torch.einsum("vij,kjl,vml->vkim", rots, cov_world, rots)  # (V, K, 3, 3)
    x, y = p_cam[..., 0], p_cam[..., 1]
    j = torch.zeros(n_views, k, 2, 3, dtype=dtype)
    j[..., 0, 0] = f / zn
    j[..., 0, 2] = f * x / zn.pow(2)
    j[..., 1, 1] = -f / zn
    j[..., 1, 2] = -f * y / zn.pow(2)
    cov2d = j @ cov_cam @ j.transpose(-1, -2)
    cov2d = cov2d + COV_BLUR * torch.eye(2, dtype=dtype)

    det = (cov2d[..., 0, 0] * cov2d[..., 1, 1] - cov2d[..., 0, 1] * cov2d[..., 1, 0]).clamp_min(1e-12)
    inv00 = cov2d[..., 1, 1] / det
    inv11 = cov2d[..., 0, 0] / det
    inv01 = -cov2d[..., 0, 1] / det

    # Front-to-back order by camera depth, independently per view.
    order = torch.argsort(zn, dim=1)
    gather = lambda t: torch.gather(t, 1, order)  # noqa: E731 - local helper
    u, v, zn = gather(u), gather(v), gather(zn)
    inv00, inv01, inv11 = gather(inv00), gather(inv01), gather(inv11)
    op = opacities[None].expand(n_views, -1).gather(1, order)
    col = colors[None].expand(n_views, -1, -1).gather(1, order[..., None].expand(-1, -1, 3))

    jj, ii = torch.meshgrid(
        torch.arange(res, dtype=dtype), torch.arange(res, dtype=dtype), indexing="xy"
    )
    px = (jj + 0.5).reshape(-1)
    py = (ii + 0.5).reshape(-1)
    du = px[None, None, :] - u[..., None]
    dv = py[None, None, :] - v[..., None]
    mahal = inv00[..., None] * du * du + 2 * inv01[..., None] * du * dv + inv11[..., None] * dv * dv
    kernel = torch.exp(-0.5 * mahal) * (mahal <= 9.0)  # 3 sigma truncation
    alpha = (op[..., None] * kernel).clamp(0.0, ALPHA_CEILING)  # (V, K, P)

    trans = torch.cumprod(1.0 - alpha, dim=1)
    trans = torch.cat([torch.ones(n_views, 1, n_px, dtype=dtype), trans[:, :-1]], dim=1)
    weights = trans * alpha  # (V, K, P)
    rgb = torch.einsum("vkp,vkc->vpc", weights, col)
    rgb = rgb + (trans[:, -1] * (1.0 - alpha[:, -1]))[..., None] * bg
    return rgb.transpose(1, 2).reshape(n_views, 3, res, res)


def render_gaussians(g: GaussianSet, camera: Camera) -> torch.Tensor:
    """Deterministic alpha-composited render, (3, H, W) in [-1, 1]."""
    rgb = _render_components(g.positions, g.scales, g.rotations, g.opacities, g.colors, [camera])
    return rgb[0] * 2.0 - 1.0


def _initial_parameters(count: int, seed: int, dtype=torch.float64) -> dict:
    """Documented initialization: seeded positions in a radius-0.7 ball,
    isotropic scale 0.10, opacity 0.2, mid-gray color, identity rotation."""
    gen = make_generator(seed, "gaussian-init")
    pos = torch.randn(count, 3, generator=gen, dtype=torch.float64)
    pos = 0.7 * pos / pos.pow(2).sum(dim=1, keepdim=True).sqrt().clamp_min(1e-12)
    pos = pos * torch.rand(count, 1, generator=gen, dtype=torch.float64).pow(1.0 / 3.0)
    quat = torch.zeros(count, 4, dtype=torch.float64)
    quat[:, 0] = 1.0
    params = {
        "positions": pos,
        "log_scales": torch.full((count, 3), float(np.log(0.10)), dtype=torch.float64),
        "rotations": quat,
        "opacity_logits": torch.full((count,), float(_logit(0.2)), dtype=torch.float64),
        "color_logits": torch.zeros(count, 3, dtype=torch.float64),
    }
    return {k: v.to(dtype) for k, v in params.items()}


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def _materialize(params: dict) -> GaussianSet:
    quats = params["rotations"]
    quats = quats / quats.pow(2).sum(dim=1, keepdim=True).sqrt().clamp_min(1e-12)
    return GaussianSet(
        positions=params["positions"].detach().clone(),
        scales=params["log_scales"].detach().exp(),
        rotations=quats.detach().clone(),
        opacities=torch.sigmoid(params["opacity_logits"].detach()),
        colors=torch.sigmoid(params["color_logits"].detach()),
    )


def photometric_error(g: GaussianSet, views: MultiViewBatch) -> float:
    """RMS pixel error in [0, 1] units between renders and the given views."""
    total, n = 0.0, 0
    for i, cam in enumerate(views.cameras):
        render01 = (render_gaussians(g, cam) + 1.0) / 2.0
        target01 = (views.colors[i] + 1.0) / 2.0
        total += float((render01 - target01).pow(2).sum())
        n += render01.numel()
    return float(np.sqrt(total / n))


def fit_gaussians(
    views: MultiViewBatch,
    iters: int,
    seed: int,
    count: int = 256,
    lr: float = 0.02,
    checkpoint_every: int | None = None,
    loss_log: list | None = None,
) -> GaussianSet:
    """Optimize a splat set against the given posed views.

    Adam on positions, log-scales, rotations, opacity and color logits
    (color/opacity at 10x the base rate), minimizing mean squared pixel
    error over all views; the inner loop runs in float32 for speed and
    the result is materialized in float64. Progress is tracked at
    checkpoints as the best loss reached so far (a nonincreasing
    sequence, appended to ``loss_log`` as (iteration, best_rmse) pairs);
    fitting stops early after five consecutive checkpoints without
    improvement and the best parameters are returned. ``iters=0``
    returns the documented initialization.

    Raises:
        ShapeError: when the batch lacks cameras or has fewer than 4 views.
        NonFiniteError: if the photometric loss diverges.
    """
    if views.cameras is None:
        raise ShapeError("fit_gaussians needs camera poses on the view batch")
    if len(views.cameras) < 4:
        raise ShapeError("fit_gaussians needs at least 4 posed views")
    if iters == 0:
        return _materialize(_initial_parameters(count, seed))

    dtype = torch.float32
    params = {
        k: v.clone().requires_grad_(True) for k, v in _initial_parameters(count, seed, dtype).items()
    }
    cameras = list(views.cameras)
    targets01 = ((views.colors + 1.0) / 2.0).to(dtype)
    opt = torch.optim.Adam(
        [
            {"params": [params["positions"], params["log_scales"]], "lr": lr},
            {"params": [params["rotations"]], "lr": lr / 2},
            {"params": [params["opacity_logits"], params["color_logits"]], "lr": lr * 10},
        ]
    )
    every = checkpoint_every or max(1, iters // 20)
    best = float("inf")
    best_state = None
    stagnant = 0
    improved_since_checkpoint = False
    for it in range(iters):
        opt.zero_grad()
        renders = _render_components(
            params["positions"],
            params["log_scales"].exp(),
            params["rotations"],
            torch.sigmoid(params["opacity_logits"]),
            torch.sigmoid(params["color_logits"]),
            cameras,
        )
        loss = (renders - targets01).pow(2).mean()
        if not torch.isfinite(loss):
            raise NonFiniteError(f"splat fitting diverged at iteration {it}", context={"iteration": it})
        loss.backward()
        opt.step()

        current = loss.item()
        if current < best:
            best = current
            best_state = {k: v.detach().clone() for k, v in params.items()}
            improved_since_checkpoint = True
        if (it + 1) % every == 0 or it == iters - 1:
            if loss_log is not None:
                loss_log.append((it + 1, float(np.sqrt(best))))
            if improved_since_checkpoint:
                stagnant = 0
            else:
                stagnant += 1
            improved_since_checkpoint = False
            if stagnant >= 5:
                break
    final = best_state if best_state is not None else params
    return _materialize({k: v.detach().double() for k, v in final.items()})
