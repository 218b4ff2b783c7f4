"""Camera convention shared by the corpus renderer, splatter, and turntable.

Right-handed world, +Y up. Azimuth is measured counter-clockwise about
+Y starting from +Z, so a camera at azimuth 0 sits on the +Z axis
looking at the origin ("front"). Camera space is x-right, y-up with the
view direction along -z; pixel row 0 is the top of the image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class Camera:
    azimuth_deg: float
    elevation_deg: float
    radius: float
    fov_deg: float = 50.0
    resolution: int = 32

    def eye(self) -> np.ndarray:
        az = math.radians(self.azimuth_deg)
        el = math.radians(self.elevation_deg)
        return self.radius * np.array(
            [math.sin(az) * math.cos(el), math.sin(el), math.cos(az) * math.cos(el)]
        )

    def rotation_world_to_cam(self) -> np.ndarray:
        """(3, 3) matrix whose rows are the camera's right/up/backward axes."""
        eye = self.eye()
        forward = -eye / np.linalg.norm(eye)  # toward the origin
        world_up = np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, world_up)
        nr = np.linalg.norm(right)
        if nr < 1e-9:  # looking straight up/down: pick a stable right axis
            right = np.array([1.0, 0.0, 0.0])
        else:
            right = right / nr
        up = np.cross(right, forward)
        return np.stack([right, up, -forward])

    @property
    def focal(self) -> float:
        return 0.5 * self.resolution / math.tan(math.radians(self.fov_deg) / 2)

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """World-space origins (P, 3) and unit directions (P, 3), row-major pixels."""
        res = self.resolution
        c = res / 2.0
        jj, ii = np.meshgrid(np.arange(res), np.arange(res))  # ii: row, jj: col
        x = (jj.ravel() + 0.5 - c) / self.focal
        y = -(ii.ravel() + 0.5 - c) / self.focal
        dirs_cam = np.stack([x, y, -np.ones_like(x)], axis=1)
        dirs_cam /= np.linalg.norm(dirs_cam, axis=1, keepdims=True)
        rot = self.rotation_world_to_cam()
        dirs_world = dirs_cam @ rot  # R^T @ d, batched
        eye = self.eye()
        origins = np.broadcast_to(eye, dirs_world.shape).copy()
        return origins, dirs_world

    def with_resolution(self, resolution: int) -> "Camera":
        return replace(self, resolution=resolution)


def canonical_cameras(
    resolution: int, radius: float = 2.5, elevation_deg: float = 0.0, fov_deg: float = 50.0
) -> tuple[Camera, ...]:
    """The six canonical-direction cameras, in canonical direction order."""
    from .prompts import DIRECTION_AZIMUTH_DEG, DIRECTIONS

    return tuple(
        Camera(DIRECTION_AZIMUTH_DEG[d], elevation_deg, radius, fov_deg, resolution)
        for d in DIRECTIONS
    )


def turntable_cameras(
    n_azimuth: int,
    elevation_deg: float = 40.0,
    radius: float = 2.5,
    fov_deg: float = 50.0,
    resolution: int = 32,
) -> tuple[Camera, ...]:
    """``n_azimuth`` cameras evenly spaced over [0, 360) degrees."""
    step = 360.0 / n_azimuth
    return tuple(
        Camera(i * step, elevation_deg, radius, fov_deg, resolution) for i in range(n_azimuth)
    )
