"""Density baking, iso-surface extraction, and mesh I/O.

The splat set is baked analytically onto a regular grid (densities are
opacity-weighted Gaussian kernel sums, colors their weighted averages),
standing in for a trained radiance field; other field backends can
replace the baking step behind the same DensityField contract. Surfaces
come out via marching cubes with a degenerate-triangle cleanup pass.

Exports: OBJ text (9 significant digits) and binary little-endian PLY
with double-precision vertices, so the PLY round trip is exact and the
OBJ round trip is within 1e-6.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage
from skimage import measure

from .errors import ConfigError, ShapeError
from .gaussians import GaussianSet, world_covariances

_CHUNK = 16384  # grid points per baking chunk, caps peak memory


@dataclass
class DensityField:
    """Regular R^3 grid of nonnegative density and color over a box.

    ``density`` is indexed [ix, iy, iz]; grid point (i, j, k) sits at
    ``bbox_min + (i, j, k) * (bbox_max - bbox_min) / (R - 1)``.
    """

    density: np.ndarray  # (R, R, R)
    colors: np.ndarray  # (R, R, R, 3) in [0, 1]
    bbox_min: np.ndarray  # (3,)
    bbox_max: np.ndarray  # (3,)

    def __post_init__(self):
        r = self.density.shape[0]
        if self.density.shape != (r, r, r):
            raise ShapeError(f"density must be cubic, got {self.density.shape}")
        if r < 16:
            raise ShapeError(f"grid resolution must be >= 16, got {r}")
        if self.colors.shape != (r, r, r, 3):
            raise ShapeError(f"colors must be {(r, r, r, 3)}, got {self.colors.shape}")
        if (self.density < 0).any():
            raise ShapeError("densities must be nonnegative")

    @property
    def resolution(self) -> int:
        return self.density.shape[0]

    @property
    def cell_size(self) -> float:
        return float((self.bbox_max[0] - self.bbox_min[0]) / (self.resolution - 1))

    def grid_to_world(self, pts_idx: np.ndarray) -> np.ndarray:
        span = (self.bbox_max - self.bbox_min) / (self.resolution - 1)
        return self.bbox_min + pts_idx * span

    def sample_colors(self, pts_world: np.ndarray) -> np.ndarray:
        """Trilinear color lookup at world points (N, 3)."""
        span = (self.bbox_max - self.bbox_min) / (self.resolution - 1)
        idx = ((pts_world - self.bbox_min) / span).T  # (3, N)
        out = np.stack(
            [ndimage.map_coordinates(self.colors[..., c], idx, order=1, mode="nearest") for c in range(3)],
            axis=1,
        )
        return np.clip(out, 0.0, 1.0)


@dataclass
class TriMesh:
    """Triangle mesh with optional per-vertex colors."""

    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64
    colors: np.ndarray | None = None  # (V, 3) in [0, 1]

    def __post_init__(self):
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ShapeError("vertices must be (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ShapeError("faces must be (F, 3)")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ShapeError("face indices out of range")
        if self.colors is not None and self.colors.shape != self.vertices.shape:
            raise ShapeError("per-vertex colors must match vertices")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)


def triangle_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a = vertices[faces[:, 1]] - vertices[faces[:, 0]]
    b = vertices[faces[:, 2]] - vertices[faces[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(a, b), axis=1)


def clean_mesh(vertices: np.ndarray, faces: np.ndarray, colors: np.ndarray | None = None) -> TriMesh:
    """Drop degenerate (area <= 1e-12) triangles and unreferenced vertices."""
    if len(faces):
        faces = faces[triangle_areas(vertices, faces) > 1e-12]
    used = np.unique(faces) if len(faces) else np.array([], dtype=np.int64)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriMesh(
        vertices=vertices[used].astype(np.float64),
        faces=remap[faces].astype(np.int64) if len(faces) else faces.astype(np.int64),
        colors=None if colors is None else colors[used],
    )


def is_watertight(mesh: TriMesh) -> bool:
    """Every undirected edge borders exactly two triangles, once per direction."""
    if not len(mesh.faces):
        return False
    directed = {}
    for tri in mesh.faces:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (int(a), int(b))
            directed[key] = directed.get(key, 0) + 1
    if any(v != 1 for v in directed.values()):
        return False
    return all((b, a) in directed for (a, b) in directed)


# -- baking ---------------------------------------------------------------------------


def default_bbox(g: GaussianSet, margin_sigmas: float = 3.0) -> tuple[np.ndarray, np.ndarray]:
    """Cubic box covering all splats out to ``margin_sigmas`` of their largest scale."""
    pos = g.positions.numpy()
    margin = margin_sigmas * g.scales.numpy().max(initial=0.1)
    lo = pos.min(axis=0, initial=0.0) - margin
    hi = pos.max(axis=0, initial=0.0) + margin
    center = (lo + hi) / 2
    half = np.max(hi - lo) / 2
    return center - half, center + half


def bake_field(g: GaussianSet, resolution: int, bbox: tuple | None = None) -> DensityField:
    """Analytic splat-to-grid baking.

    Density at a grid point is the sum of opacity-weighted Gaussian
    kernel values (so it is linear in opacity); color is the
    kernel-weighted average of splat colors (zero where no splat
    reaches).
    """
    if resolution < 16:
        raise ShapeError(f"grid resolution must be >= 16, got {resolution}")
    if bbox is None:
        bbox_min, bbox_max = default_bbox(g)
    else:
        bbox_min, bbox_max = np.asarray(bbox[0], dtype=float), np.asarray(bbox[1], dtype=float)
    axes = [np.linspace(bbox_min[d], bbox_max[d], resolution) for d in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    density = np.zeros(len(pts))
    color_acc = np.zeros((len(pts), 3))
    if g.count:
        cov = world_covariances(g.scales, g.rotations).numpy()
        inv = np.linalg.inv(cov)  # (K, 3, 3)
        mu = g.positions.numpy()
        op = g.opacities.numpy()
        col = g.colors.numpy()
        for start in range(0, len(pts), _CHUNK):
            chunk = pts[start : start + _CHUNK]  # (P, 3)
            d = chunk[None, :, :] - mu[:, None, :]  # (K, P, 3)
            mahal = np.einsum("kpi,kij,kpj->kp", d, inv, d)
            w = op[:, None] * np.exp(-0.5 * mahal)  # (K, P)
            density[start : start + _CHUNK] = w.sum(axis=0)
            color_acc[start : start + _CHUNK] = w.T @ col
    weight = np.maximum(density, 1e-12)
    colors = np.where(density[:, None] > 1e-12, color_acc / weight[:, None], 0.0)
    r = resolution
    return DensityField(
        density=density.reshape(r, r, r),
        colors=colors.reshape(r, r, r, 3),
        bbox_min=bbox_min,
        bbox_max=bbox_max,
    )


# -- extraction -------------------------------------------------------------------------


def extract_mesh(field: DensityField, iso_threshold: float | None = None) -> TriMesh:
    """Marching-cubes surface at the iso level, cleaned up.

    ``iso_threshold`` defaults to half the field maximum. Closed input
    fields (iso surface fully interior to the grid) yield watertight
    meshes. Vertex colors are sampled from the field.

    Raises:
        ConfigError: threshold outside the open range (min, max).
    """
    lo, hi = float(field.density.min()), float(field.density.max())
    if iso_threshold is None:
        iso_threshold = 0.5 * hi
    if not lo < iso_threshold < hi:
        raise ConfigError(
            f"iso threshold {iso_threshold} outside field range ({lo}, {hi})"
        )
    verts_idx, faces, _, _ = measure.marching_cubes(field.density, level=iso_threshold)
    verts = field.grid_to_world(verts_idx.astype(np.float64))
    colors = field.sample_colors(verts)
    return clean_mesh(verts, faces.astype(np.int64), colors)


# -- mesh I/O ---------------------------------------------------------------------------

MESH_FORMATS = ("obj", "ply")


def export_mesh(mesh: TriMesh, fmt: str, path) -> None:
    """Write OBJ text or binary little-endian PLY.

    Raises:
        ConfigError: unknown format.
    """
    fmt = fmt.lower()
    if fmt == "obj":
        _write_obj(mesh, path)
    elif fmt == "ply":
        _write_ply(mesh, path)
    else:
        raise ConfigError(f"unknown mesh format {fmt!r}; expected one of {MESH_FORMATS}")


def import_mesh(path) -> TriMesh:
    path = Path(path)
    suffix = path.suffix.lower().lstrip(".")
    if suffix == "obj":
        return _read_obj(path)
    if suffix == "ply":
        return _read_ply(path)
    raise ConfigError(f"unknown mesh format {suffix!r}; expected one of {MESH_FORMATS}")


def _write_obj(mesh: TriMesh, path) -> None:
    lines = []
    for i, v in enumerate(mesh.vertices):
        if mesh.colors is not None:
            c = mesh.colors[i]
            lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g} {c[0]:.9g} {c[1]:.9g} {c[2]:.9g}")
        else:
            lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    for f in mesh.faces:
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    Path(path).write_text("\n".join(lines) + "\n")


def _read_obj(path) -> TriMesh:
    verts, faces, colors = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            vals = [float(x) for x in parts[1:]]
            verts.append(vals[:3])
            if len(vals) >= 6:
                colors.append(vals[3:6])
        elif parts[0] == "f":
            faces.append([int(tok.split("/")[0]) - 1 for tok in parts[1:4]])
    return TriMesh(
        vertices=np.asarray(verts, dtype=np.float64).reshape(-1, 3),
        faces=np.asarray(faces, dtype=np.int64).reshape(-1, 3),
        colors=np.asarray(colors, dtype=np.float64) if len(colors) == len(verts) and colors else None,
    )


def _write_ply(mesh: TriMesh, path) -> None:
    has_color = mesh.colors is not None
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {mesh.num_vertices}"]
    header += ["property double x", "property double y", "property double z"]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {mesh.num_faces}", "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if has_color:
            rgb = np.clip(np.round(mesh.colors * 255), 0, 255).astype(np.uint8)
        for i, v in enumerate(mesh.vertices):
            f.write(struct.pack("<3d", *v))
            if has_color:
                f.write(struct.pack("<3B", *rgb[i]))
        for face in mesh.faces:
            f.write(struct.pack("<B3i", 3, *face))


def _read_ply(path) -> TriMesh:
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii").splitlines()
    n_vert = n_face = 0
    has_color = False
    for line in header:
        if line.startswith("element vertex"):
            n_vert = int(line.split()[-1])
        elif line.startswith("element face"):
            n_face = int(line.split()[-1])
        elif line == "property uchar red":
            has_color = True
    offset = end
    stride = 24 + (3 if has_color else 0)
    verts = np.empty((n_vert, 3))
    colors = np.empty((n_vert, 3)) if has_color else None
    for i in range(n_vert):
        verts[i] = struct.unpack_from("<3d", raw, offset)
        if has_color:
            colors[i] = np.frombuffer(raw, np.uint8, 3, offset + 24) / 255.0
        offset += stride
    faces = np.empty((n_face, 3), dtype=np.int64)
    for i in range(n_face):
        count = raw[offset]
        if count != 3:
            raise ConfigError("only triangle PLY faces are supported")
        faces[i] = struct.unpack_from("<3i", raw, offset + 1)
        offset += 13
    return TriMesh(vertices=verts, faces=faces, colors=colors)
