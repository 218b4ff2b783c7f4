"""Procedural synthetic subjects and their rendered ground truth.

Each corpus subject is a composite of one to three signed-distance
primitives (sphere, cube, capped cone) with distinct saturated albedos,
rendered by sphere tracing from the six canonical directions into color
views, camera-frame normal maps, and foreground masks. The generator is
fully seeded, so a corpus regenerates bit-identically from its recorded
seed.

Lighting is Lambertian with a fixed light direction in the camera frame
(plus an ambient floor), which keeps shading consistent across
directions and makes single-view normal estimation well-posed on this
data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .cameras import Camera, canonical_cameras
from .errors import ConfigError, IntegrityError
from .images import load_mask_png, load_normal_png, load_png, save_mask_png, save_normal_png, save_png
from .multiview import MultiViewBatch
from .prompts import DIRECTIONS
from .rng import stream_seed

CORPUS_VERSION = 1

# Camera-frame light (x-right, y-up, z toward the viewer) and Lambertian terms.
LIGHT_CAM = np.array([0.35, 0.45, 0.82])
LIGHT_CAM = LIGHT_CAM / np.linalg.norm(LIGHT_CAM)
AMBIENT = 0.35
DIFFUSE = 0.65

PALETTE = (
    (0.90, 0.15, 0.10),  # red
    (0.95, 0.55, 0.10),  # orange
    (0.95, 0.85, 0.15),  # yellow
    (0.25, 0.75, 0.20),  # green
    (0.10, 0.65, 0.60),  # teal
    (0.15, 0.45, 0.90),  # blue
    (0.45, 0.20, 0.85),  # purple
    (0.90, 0.20, 0.75),  # magenta
    (0.55, 0.35, 0.15),  # brown
    (0.60, 0.85, 0.20),  # lime
    (0.95, 0.45, 0.55),  # pink
    (0.20, 0.25, 0.55),  # navy
)

CLASS_NOUNS = ("gadget", "critter", "widget", "totem", "doodad", "gizmo", "trinket", "figurine")

_IDENT_ALPHABET = "abcdefghjkmnpqrstuvwxyz23456789"


# -- signed distance primitives --------------------------------------------------------


def _sd_sphere(p: np.ndarray, radius: float) -> np.ndarray:
    return np.linalg.norm(p, axis=1) - radius


def _sd_box(p: np.ndarray, half: np.ndarray) -> np.ndarray:
    q = np.abs(p) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(np.max(q, axis=1), 0.0)
    return outside + inside


def _sd_capped_cone(p: np.ndarray, h: float, r1: float, r2: float) -> np.ndarray:
    # Exact capped cone along Y spanning [-h, h], radius r1 at the bottom.
    qx = np.linalg.norm(p[:, [0, 2]], axis=1)
    qy = p[:, 1]
    k2 = np.array([r2 - r1, 2.0 * h])
    ca_x = qx - np.minimum(qx, np.where(qy < 0.0, r1, r2))
    ca_y = np.abs(qy) - h
    tq = ((r2 - qx) * k2[0] + (h - qy) * k2[1]) / (k2 @ k2)
    tq = np.clip(tq, 0.0, 1.0)
    cb_x = qx - r2 + k2[0] * tq
    cb_y = qy - h + k2[1] * tq
    sign = np.where((cb_x < 0.0) & (ca_y < 0.0), -1.0, 1.0)
    d2 = np.minimum(ca_x**2 + ca_y**2, cb_x**2 + cb_y**2)
    return sign * np.sqrt(np.maximum(d2, 0.0))


@dataclass(frozen=True)
class Primitive:
    kind: str  # sphere | cube | cone
    center: tuple[float, float, float]
    size: tuple[float, ...]  # sphere: (r,); cube: (hx, hy, hz); cone: (h, r1, r2)
    albedo: tuple[float, float, float]

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = p - np.asarray(self.center)
        if self.kind == "sphere":
            return _sd_sphere(q, self.size[0])
        if self.kind == "cube":
            return _sd_box(q, np.asarray(self.size))
        if self.kind == "cone":
            return _sd_capped_cone(q, *self.size)
        raise ConfigError(f"unknown primitive kind {self.kind!r}")


@dataclass(frozen=True)
class SubjectModel:
    subject_id: str
    index: int
    identifier: str
    class_noun: str
    primitives: tuple[Primitive, ...]

    @property
    def prompt(self) -> str:
        return f"a {self.identifier} {self.class_noun}"

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return np.min(self._all_sdf(p), axis=0)

    def _all_sdf(self, p: np.ndarray) -> np.ndarray:
        return np.stack([prim.sdf(p) for prim in self.primitives])

    def albedo_at(self, p: np.ndarray) -> np.ndarray:
        idx = np.argmin(self._all_sdf(p), axis=0)
        table = np.asarray([prim.albedo for prim in self.primitives])
        return table[idx]

    def normal_at(self, p: np.ndarray, h: float = 1e-4) -> np.ndarray:
        grad = np.empty_like(p)
        for axis in range(3):
            dp = np.zeros(3)
            dp[axis] = h
            grad[:, axis] = self.sdf(p + dp) - self.sdf(p - dp)
        norm = np.linalg.norm(grad, axis=1, keepdims=True)
        return grad / np.maximum(norm, 1e-12)


# -- rendering ------------------------------------------------------------------------


def render_subject_view(
    subject: SubjectModel,
    camera: Camera,
    max_steps: int = 96,
    eps: float = 1e-3,
) -> dict:
    """Sphere-trace one view; returns color, camera-frame normals, and mask.

    Color is (3, H, W) in [-1, 1] with a white background; normals are
    unit vectors with the back-facing vector on background pixels.
    """
    origins, dirs = camera.rays()
    n_px = origins.shape[0]
    t = np.zeros(n_px)
    active = np.ones(n_px, dtype=bool)
    hit = np.zeros(n_px, dtype=bool)
    t_max = 2.0 * camera.radius + 2.0
    for _ in range(max_steps):
        if not active.any():
            break
        p = origins[active] + t[active, None] * dirs[active]
        dist = subject.sdf(p)
        newly_hit = dist < eps
        idx = np.flatnonzero(active)
        hit[idx[newly_hit]] = True
        t[idx] += np.maximum(dist, eps * 0.5)
        active[idx[newly_hit]] = False
        active &= t < t_max

    res = camera.resolution
    color = np.ones((n_px, 3))
    normal_cam = np.zeros((n_px, 3))
    normal_cam[:, 2] = -1.0
    if hit.any():
        p_hit = origins[hit] + t[hit, None] * dirs[hit]
        n_world = subject.normal_at(p_hit)
        rot = camera.rotation_world_to_cam()
        n_cam = n_world @ rot.T
        shade = AMBIENT + DIFFUSE * np.maximum(n_cam @ LIGHT_CAM, 0.0)
        color[hit] = subject.albedo_at(p_hit) * shade[:, None]
        normal_cam[hit] = n_cam
    color_img = torch.from_numpy(
        (color * 2.0 - 1.0).T.reshape(3, res, res).copy()
    )
    normal_img = torch.from_numpy(normal_cam.T.reshape(3, res, res).copy())
    mask_img = torch.from_numpy(hit.reshape(res, res).copy())
    return {"color": color_img, "normal": normal_img, "mask": mask_img}


# -- subject generation -----------------------------------------------------------------


def make_subject(index: int, seed: int, n_subjects: int = 16) -> SubjectModel:
    """Seeded composite of 1-3 primitives with distinct palette colors.

    The palette is split between the two halves of the corpus: subjects
    in the second half (the conventional pretraining split) draw from the
    first six colors, subjects in the first half (the evaluation split)
    from the last six. Evaluation subjects are therefore out of the base
    models' color distribution by construction, which is the gap the
    fine-tuning stages exist to close.
    """
    rng = np.random.default_rng(stream_seed(seed, "subject", index))
    n_prims = int(rng.integers(1, 4))
    palette_pool = (
        np.arange(len(PALETTE) // 2, len(PALETTE))
        if index < n_subjects // 2
        else np.arange(len(PALETTE) // 2)
    )
    colors = palette_pool[rng.choice(len(palette_pool), size=n_prims, replace=False)]
    prims = []
    body_scale = float(rng.uniform(0.45, 0.62))
    kinds = ["sphere", "cube", "cone"]
    for k in range(n_prims):
        kind = kinds[int(rng.integers(0, 3))]
        if k == 0:
            center = (0.0, float(rng.uniform(-0.05, 0.05)), 0.0)
            scale = body_scale
        else:
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            offset = direction * body_scale * 0.95
            center = tuple(float(v) for v in offset)
            scale = float(rng.uniform(0.16, 0.30))
        if kind == "sphere":
            size: tuple[float, ...] = (scale,)
        elif kind == "cube":
            size = (scale * 0.8, scale * 0.8, scale * 0.8)
        else:
            size = (scale, scale * 0.85, scale * 0.1)
        prims.append(Primitive(kind=kind, center=center, size=size, albedo=PALETTE[int(colors[k])]))
    identifier = "".join(rng.choice(list(_IDENT_ALPHABET), size=8))
    return SubjectModel(
        subject_id=f"subj_{index:03d}",
        index=index,
        identifier=identifier,
        class_noun=CLASS_NOUNS[index % len(CLASS_NOUNS)],
        primitives=tuple(prims),
    )


def sphere_subject(radius: float = 0.8, albedo=(0.9, 0.15, 0.1)) -> SubjectModel:
    """Single centered opaque sphere; the analytic test subject."""
    return SubjectModel(
        subject_id="sphere",
        index=-1,
        identifier="sphere000",
        class_noun="sphere",
        primitives=(Primitive("sphere", (0.0, 0.0, 0.0), (radius,), tuple(albedo)),),
    )


# -- corpus on disk ---------------------------------------------------------------------


@dataclass(frozen=True)
class SubjectInfo:
    subject_id: str
    index: int
    identifier: str
    class_noun: str
    prompt: str


class Corpus:
    """Loader for a generated corpus directory."""

    def __init__(self, root: Path, index: dict):
        self.root = Path(root)
        self.index = index
        self.subjects = [SubjectInfo(**s) for s in index["subjects"]]
        cam = index["camera"]
        self.resolution = int(index["resolution"])
        self.cameras = canonical_cameras(
            self.resolution, cam["radius"], cam["elevation_deg"], cam["fov_deg"]
        )

    @classmethod
    def load(cls, root) -> "Corpus":
        root = Path(root)
        index_path = root / "corpus.json"
        if not index_path.exists():
            raise IntegrityError(f"no corpus index at {index_path}")
        with open(index_path) as f:
            index = json.load(f)
        if index.get("version") != CORPUS_VERSION:
            raise IntegrityError(f"unsupported corpus version {index.get('version')!r}")
        return cls(root, index)

    def subject(self, subject_id: str) -> SubjectInfo:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise ConfigError(f"unknown corpus subject {subject_id!r}")

    def _subject_dir(self, subject_id: str) -> Path:
        return self.root / "subjects" / subject_id

    def view_path(self, subject_id: str, direction: str, kind: str = "color") -> Path:
        return self._subject_dir(subject_id) / f"{kind}_{direction}.png"

    def views(self, subject_id: str) -> MultiViewBatch:
        colors, normals, masks = [], [], []
        for d in DIRECTIONS:
            colors.append(load_png(self.view_path(subject_id, d, "color")))
            normals.append(load_normal_png(self.view_path(subject_id, d, "normal")))
            masks.append(load_mask_png(self.view_path(subject_id, d, "mask")))
        return MultiViewBatch(
            colors=torch.stack(colors),
            normals=torch.stack(normals),
            masks=torch.stack(masks),
            cameras=self.cameras,
            subject_id=subject_id,
        )

    def subject_image(self, subject_id: str) -> torch.Tensor:
        """The subject's single input image: its front view."""
        return load_png(self.view_path(subject_id, "front", "color"))


def generate_corpus(
    out_dir,
    n_subjects: int = 16,
    resolution: int = 32,
    seed: int = 7,
    radius: float = 2.5,
    elevation_deg: float = 0.0,
    fov_deg: float = 50.0,
) -> Corpus:
    """Render ``n_subjects`` seeded subjects into ``out_dir`` and index them."""
    if n_subjects < 1:
        raise ConfigError("n_subjects must be positive")
    out = Path(out_dir)
    cameras = canonical_cameras(resolution, radius, elevation_deg, fov_deg)
    subjects = []
    for i in range(n_subjects):
        subject = make_subject(i, seed, n_subjects)
        sdir = out / "subjects" / subject.subject_id
        sdir.mkdir(parents=True, exist_ok=True)
        for d, cam in zip(DIRECTIONS, cameras):
            view = render_subject_view(subject, cam)
            save_png(view["color"], sdir / f"color_{d}.png")
            save_normal_png(view["normal"], sdir / f"normal_{d}.png")
            save_mask_png(view["mask"], sdir / f"mask_{d}.png")
        subjects.append(
            {
                "subject_id": subject.subject_id,
                "index": i,
                "identifier": subject.identifier,
                "class_noun": subject.class_noun,
                "prompt": subject.prompt,
            }
        )
    index = {
        "version": CORPUS_VERSION,
        "seed": seed,
        "n_subjects": n_subjects,
        "resolution": resolution,
        "camera": {"radius": radius, "elevation_deg": elevation_deg, "fov_deg": fov_deg},
        "subjects": subjects,
    }
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "corpus.json", "w") as f:
        json.dump(index, f, indent=2)
    return Corpus(out, index)
