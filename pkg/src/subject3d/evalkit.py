"""Quantitative evaluation: turntable renders, retrieval precision, reports.

Retrieval follows the R-Precision protocol: render the asset from evenly
spaced azimuths at a fixed elevation, then for each render check whether
the true prompt beats every distractor under image-text cosine
similarity (exact ties count as failures). The toy encoder pair anchors
text embeddings to corpus subjects, so scores measure subject fidelity
on this data.

Rendering and per-render retrieval parallelize freely; everything here
is deterministic.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
import torch

from .cameras import Camera, turntable_cameras
from .corpus import Corpus
from .encoders import HashTextEncoder, ImageFeatureEncoder, encode_image
from .errors import ConfigError, ShapeError
from .gaussians import GaussianSet, render_gaussians
from .images import ImageBatch
from .meshing import TriMesh


# -- mesh rasterization ------------------------------------------------------------------

_CHUNK_TRIS = 2048
_NEAR = 0.05
_BACKGROUND = (1.0, 1.0, 1.0)


def render_mesh(mesh: TriMesh, camera: Camera) -> torch.Tensor:
    """Unlit z-buffered rasterization of a triangle mesh, (3, H, W) in [-1, 1].

    Vertex colors are interpolated when present, light gray otherwise.
    Unlit shading keeps renders of rotationally symmetric assets
    azimuth-invariant.
    """
    res = camera.resolution
    rot = camera.rotation_world_to_cam()
    eye = camera.eye()
    verts_cam = (mesh.vertices - eye) @ rot.T
    zn = -verts_cam[:, 2]
    f = camera.focal
    c = res / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = c + f * verts_cam[:, 0] / zn
        v = c - f * verts_cam[:, 1] / zn
    colors = mesh.colors if mesh.colors is not None else np.full((len(mesh.vertices), 3), 0.8)

    jj, ii = np.meshgrid(np.arange(res) + 0.5, np.arange(res) + 0.5)
    px = jj.ravel()
    py = ii.ravel()
    zbuf = np.full(res * res, np.inf)
    img = np.ones((res * res, 3))
    img[:] = _BACKGROUND

    faces = mesh.faces
    for start in range(0, len(faces), _CHUNK_TRIS):
        tri = faces[start : start + _CHUNK_TRIS]
        keep = (zn[tri] > _NEAR).all(axis=1)
        tri = tri[keep]
        if not len(tri):
            continue
        ax, ay = u[tri[:, 0], None], v[tri[:, 0], None]
        bx, by = u[tri[:, 1], None], v[tri[:, 1], None]
        cx, cy = u[tri[:, 2], None], v[tri[:, 2], None]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        degenerate = np.abs(area) < 1e-12
        area = np.where(degenerate, 1.0, area)
        w0 = ((bx - px) * (cy - py) - (by - py) * (cx - px)) / area
        w1 = ((cx - px) * (ay - py) - (cy - py) * (ax - px)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0) & ~degenerate
        depth = w0 * zn[tri[:, 0], None] + w1 * zn[tri[:, 1], None] + w2 * zn[tri[:, 2], None]
        depth = np.where(inside, depth, np.inf)
        winner = depth.argmin(axis=0)
        cols = np.arange(res * res)
        best = depth[winner, cols]
        better = best < zbuf[cols]
        upd = cols[better]
        tw = winner[better]
        zbuf[upd] = best[better]
        bw0, bw1, bw2 = w0[tw, upd], w1[tw, upd], w2[tw, upd]
        img[upd] = (
            bw0[:, None] * colors[tri[tw, 0]]
            + bw1[:, None] * colors[tri[tw, 1]]
            + bw2[:, None] * colors[tri[tw, 2]]
        )
    out = torch.from_numpy(np.clip(img, 0.0, 1.0).T.reshape(3, res, res).copy())
    return out * 2.0 - 1.0


# -- turntable ---------------------------------------------------------------------------


def render_turntable(
    asset,
    n_azimuth: int = 160,
    elevation_deg: float = 40.0,
    radius: float = 2.5,
    resolution: int = 32,
    fov_deg: float = 50.0,
) -> ImageBatch:
    """Evenly spaced azimuth renders at a fixed elevation, as an ImageBatch.

    ``asset`` is a GaussianSet or TriMesh; labels carry each render's
    azimuth in degrees. Azimuth spacing is exactly 360 / n degrees
    starting at 0 (a single render is the front view).
    """
    if n_azimuth < 1:
        raise ConfigError("n_azimuth must be >= 1")
    cameras = turntable_cameras(n_azimuth, elevation_deg, radius, fov_deg, resolution)
    if isinstance(asset, GaussianSet):
        frames = [render_gaussians(asset, cam) for cam in cameras]
    elif isinstance(asset, TriMesh):
        frames = [render_mesh(asset, cam) for cam in cameras]
    else:
        raise ConfigError(f"cannot render asset of type {type(asset).__name__}")
    return ImageBatch(torch.stack(frames), labels=[cam.azimuth_deg for cam in cameras])


# -- retrieval precision ------------------------------------------------------------------


@dataclass(frozen=True)
class RetrievalEncoders:
    """A joint image/text embedding pair for retrieval scoring."""

    image: object  # .encode(img) -> ImageFeatures
    text: object  # .encode(str) -> unit tensor
    name: str


class GalleryTextEncoder:
    """Corpus-anchored text embeddings: a prompt maps to the mean image
    embedding of its subject's ground-truth views (unit-normalized).
    Unknown prompts fall back to a hashed bag-of-tokens vector matched to
    the image embedding dimension."""

    def __init__(self, corpus: Corpus, image_encoder: ImageFeatureEncoder):
        self._table: dict[str, torch.Tensor] = {}
        self._fallback = HashTextEncoder(dim=image_encoder.dim, seed=image_encoder.seed + 1)
        for info in corpus.subjects:
            views = corpus.views(info.subject_id)
            embeds = torch.stack(
                [encode_image(image_encoder, views.colors[i]).embedding for i in range(6)]
            )
            mean = embeds.mean(dim=0)
            self._table[info.prompt] = mean / mean.norm().clamp_min(1e-12)

    @property
    def encoder_id(self) -> str:
        return f"gallery-{len(self._table)}"

    def encode(self, prompt: str) -> torch.Tensor:
        if prompt in self._table:
            return self._table[prompt]
        return self._fallback.encode(prompt)


def corpus_retrieval_encoders(corpus: Corpus, dim: int = 64, seed: int = 101) -> RetrievalEncoders:
    image_encoder = ImageFeatureEncoder(dim=dim, input_resolution=corpus.resolution, seed=seed)
    return RetrievalEncoders(
        image=image_encoder,
        text=GalleryTextEncoder(corpus, image_encoder),
        name=f"{image_encoder.encoder_id}+gallery",
    )


@dataclass(frozen=True)
class RPrecisionReport:
    encoder_id: str
    score: float
    successes: int
    n_renders: int
    elevation_deg: float
    gallery: str

    def __post_init__(self):
        if self.n_renders <= 0:
            raise ShapeError("report needs at least one render")
        if abs(self.score - self.successes / self.n_renders) > 1e-12:
            raise ShapeError("score must equal successes / n_renders")


def clip_r_precision(
    renders: ImageBatch,
    true_prompt: str,
    distractor_prompts: list[str],
    encoders: RetrievalEncoders,
    elevation_deg: float = 40.0,
) -> RPrecisionReport:
    """Fraction of renders whose top retrieval is the true prompt.

    Retrieval succeeds iff the true prompt's cosine similarity is
    strictly greater than every distractor's (exact ties fail). The
    score is invariant to render order and distractor order.

    Raises:
        ConfigError: when no distractors are given.
    """
    if not distractor_prompts:
        raise ConfigError("at least one distractor prompt is required")
    prompts = [true_prompt] + list(distractor_prompts)
    text_embeds = torch.stack([_unit(encoders.text.encode(p)) for p in prompts])  # (P, D)
    successes = 0
    for i in range(len(renders)):
        img_embed = _unit(encode_image(encoders.image, renders.item(i)).embedding)
        sims = text_embeds @ img_embed
        if (sims[0] > sims[1:]).all():
            successes += 1
    n = len(renders)
    return RPrecisionReport(
        encoder_id=encoders.name,
        score=successes / n,
        successes=successes,
        n_renders=n,
        elevation_deg=elevation_deg,
        gallery=f"1 true + {len(distractor_prompts)} distractors",
    )


def _unit(v: torch.Tensor) -> torch.Tensor:
    return v / v.norm().clamp_min(1e-12)


# -- report tables ------------------------------------------------------------------------


@dataclass
class EvalTable:
    """Method x encoder score table plus a judgment tally."""

    methods: list[str]
    encoders: list[str]
    scores: dict[tuple[str, str], float]
    judgment_summary: dict[str, int]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["method"] + self.encoders)
        for m in self.methods:
            writer.writerow([m] + [repr(self.scores[(m, e)]) for e in self.encoders])
        for winner in sorted(self.judgment_summary):
            writer.writerow(["judgment", winner, self.judgment_summary[winner]])
        return buf.getvalue()

    def to_text(self) -> str:
        if not self.methods and not self.judgment_summary:
            return "(empty report)\n"
        width = max([len("method")] + [len(m) for m in self.methods]) + 2
        cols = [max(len(e), 7) + 2 for e in self.encoders]
        lines = ["method".ljust(width) + "".join(e.rjust(c) for e, c in zip(self.encoders, cols))]
        for m in self.methods:
            row = m.ljust(width)
            row += "".join(f"{self.scores[(m, e)]:.3f}".rjust(c) for e, c in zip(self.encoders, cols))
            lines.append(row)
        if self.judgment_summary:
            tally = ", ".join(f"{k}: {v}" for k, v in sorted(self.judgment_summary.items()))
            lines.append(f"pairwise judgments -> {tally}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "EvalTable":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            return cls([], [], {}, {})
        encoders = rows[0][1:]
        methods, scores, summary = [], {}, {}
        for row in rows[1:]:
            if not row:
                continue
            if row[0] == "judgment":
                summary[row[1]] = int(row[2])
                continue
            methods.append(row[0])
            for e, val in zip(encoders, row[1:]):
                scores[(row[0], e)] = float(val)
        return cls(methods, encoders, scores, summary)


def eval_report(reports: list[tuple[str, RPrecisionReport]], judgments: list) -> EvalTable:
    """Assemble retrieval reports (method, report) and judgments into a table.

    Empty inputs produce an empty table. The CSV form reparses to
    identical values (scores are serialized via repr).
    """
    methods: list[str] = []
    encoders: list[str] = []
    scores: dict[tuple[str, str], float] = {}
    for method, report in reports:
        if method not in methods:
            methods.append(method)
        if report.encoder_id not in encoders:
            encoders.append(report.encoder_id)
        scores[(method, report.encoder_id)] = report.score
    for m in methods:
        for e in encoders:
            scores.setdefault((m, e), float("nan"))
    summary: dict[str, int] = {}
    for j in judgments:
        summary[j.winner] = summary.get(j.winner, 0) + 1
    return EvalTable(methods, encoders, scores, summary)
