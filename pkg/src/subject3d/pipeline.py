"""Stage orchestration: lift, two fine-tuning stages, cascade, reconstruction.

The run is a fixed six-stage DAG over a workspace directory:

    multiview_lift -> identity_aware_opt -> diversify -> subject_prior_opt
        -> cascade_sample -> reconstruction

Every stage reads its inputs from disk artifacts and writes its outputs
to disk, so an interrupted run resumed from the manifest replays the
remaining stages bit-identically. All randomness flows from the config
seed through named streams; artifact and checkpoint hashes are recorded
in the manifest and verified on resume. Stages run sequentially; no two
pipeline runs may share a workspace.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .cameras import canonical_cameras
from .checkpoint import apply_delta, load_checkpoint, model_hash, save_delta
from .config import RunConfig, dump_config, load_config, normalize_config
from .corpus import Corpus
from .encoders import HashTextEncoder, ImageFeatureEncoder, encode_image, text_condition
from .errors import ConfigError, IntegrityError, Subject3DError
from .gaussians import fit_gaussians
from .images import load_png, save_normal_png, save_png
from .meshing import bake_field, export_mesh, extract_mesh
from .models import DOMAIN_COLOR, DOMAIN_JOINT, ConditionBundle
from .multiview import MultiViewBatch, generate_multiviews, subject_prior_optimize, view_condition
from .normals import NormalEstimator, estimate_batch_normals
from .personalizer import identity_aware_optimize, personalize
from .prompts import DIRECTIONS, build_view_prompts
from .rng import stream_seed
from .sampling import reverse_sample, reverse_sample_raw
from .schedule import build_schedule

STAGES = (
    "multiview_lift",
    "identity_aware_opt",
    "diversify",
    "subject_prior_opt",
    "cascade_sample",
    "reconstruction",
)

MANIFEST_SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"


@dataclass
class SubjectSpec:
    """The single input: subject image, text modification, prompt tokens."""

    image: torch.Tensor  # (3, H, W) in [-1, 1]
    text: str
    identifier: str
    class_noun: str
    seed: int

    def __post_init__(self):
        if not torch.isfinite(self.image).all():
            raise ConfigError("subject image contains non-finite values")


# -- manifest -----------------------------------------------------------------------


@dataclass
class RunManifest:
    """Machine-readable run record: per-stage timing, seeds, artifacts, hashes."""

    config_hash: str
    root_seed: int
    stages: list
    schema_version: int = MANIFEST_SCHEMA_VERSION
    failure: dict | None = None

    def completed(self) -> list[str]:
        return [s["name"] for s in self.stages]

    def stage(self, name: str) -> dict:
        for s in self.stages:
            if s["name"] == name:
                return s
        raise IntegrityError(f"manifest has no record of stage {name!r}")

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "config_hash": self.config_hash,
            "root_seed": self.root_seed,
            "stages": self.stages,
            "failure": self.failure,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunManifest":
        if doc.get("schema_version") != MANIFEST_SCHEMA_VERSION:
            raise IntegrityError(f"unsupported manifest schema {doc.get('schema_version')!r}")
        return cls(
            config_hash=doc["config_hash"],
            root_seed=doc["root_seed"],
            stages=doc["stages"],
            failure=doc.get("failure"),
        )

    def save(self, workspace: Path) -> None:
        recorded = [s["name"] for s in self.stages]
        if recorded != list(STAGES[: len(recorded)]):
            raise IntegrityError(f"stage order {recorded} violates the pipeline DAG")
        for s in self.stages:
            for rel in s["artifacts"].values():
                if not (workspace / rel).exists():
                    raise IntegrityError(f"manifest lists missing artifact {rel}")
        with open(workspace / MANIFEST_NAME, "w") as f:
            json.dump(self.to_dict(), f, indent=2)


def _file_hash(path: Path) -> str:
    import hashlib

    return hashlib.sha256(path.read_bytes()).hexdigest()


# -- batch persistence -----------------------------------------------------------------


def save_view_batch(batch: MultiViewBatch, path: Path) -> None:
    arrays = {
        "colors": batch.colors.numpy(),
        "directions": np.array(batch.directions),
        "subject_id": np.array(batch.subject_id),
    }
    if batch.normals is not None:
        arrays["normals"] = batch.normals.numpy()
    if batch.masks is not None:
        arrays["masks"] = batch.masks.numpy()
    np.savez_compressed(str(path), **arrays)


def load_view_batch(path: Path, cameras=None) -> MultiViewBatch:
    if not Path(path).exists():
        raise IntegrityError(f"view batch missing: {path}")
    with np.load(str(path)) as data:
        return MultiViewBatch(
            colors=torch.from_numpy(data["colors"]),
            directions=tuple(str(d) for d in data["directions"]),
            normals=torch.from_numpy(data["normals"]) if "normals" in data else None,
            masks=torch.from_numpy(data["masks"]) if "masks" in data else None,
            cameras=cameras,
            subject_id=str(data["subject_id"]),
        )


# -- run context -------------------------------------------------------------------------


class RunContext:
    """Everything a stage needs, resolved once from the config."""

    def __init__(self, cfg: RunConfig, workspace: Path):
        self.cfg = cfg
        self.workspace = Path(workspace)
        self.corpus = Corpus.load(cfg.corpus_path)
        self.sched = build_schedule(int(cfg.sampler["train_steps"]), cfg.sampler["kind"])
        self.steps = int(cfg.sampler["steps"])
        self.guidance = float(cfg.sampler["guidance"])
        enc_kwargs = {"input_resolution": self.corpus.resolution}
        enc_kwargs.update(cfg.encoder_kwargs)
        self.encoder = ImageFeatureEncoder(**enc_kwargs)
        self.text_encoder = HashTextEncoder(**cfg.text_encoder_kwargs)
        self.subject = self._resolve_subject()
        self.seed = cfg.seed

    def _resolve_subject(self) -> SubjectSpec:
        sub = self.cfg.subject
        source = sub.get("source", "corpus")
        if source == "corpus":
            sid = sub.get("id")
            if not sid:
                raise ConfigError("subject.source=corpus requires subject.id")
            info = self.corpus.subject(sid)
            image = self.corpus.subject_image(sid)
            identifier = sub.get("identifier") or info.identifier
            class_noun = sub.get("class_noun") or info.class_noun
        elif source == "file":
            path = sub.get("image")
            if not path:
                raise ConfigError("subject.source=file requires subject.image")
            image = load_png(path)
            identifier = sub.get("identifier") or "sbj0token"
            class_noun = sub.get("class_noun") or "object"
        else:
            raise ConfigError(f"unknown subject.source {source!r}")
        res = self.corpus.resolution
        if image.shape[-1] != res:
            image = F.interpolate(image.unsqueeze(0), size=res, mode="bilinear", align_corners=False)[0]
        return SubjectSpec(
            image=image,
            text=sub.get("text", ""),
            identifier=identifier,
            class_noun=class_noun,
            seed=self.cfg.seed,
        )

    def stage_dir(self, stage: str) -> Path:
        d = self.workspace / "stages" / stage
        d.mkdir(parents=True, exist_ok=True)
        return d

    def load_base(self, which: str):
        path = self.cfg.model_paths.get(which)
        if not path:
            raise ConfigError(f"config models.{which} is required")
        model, meta = load_checkpoint(path)
        return model, meta["params_hash"]

    def stream(self, *path) -> int:
        return stream_seed(self.seed, *path)


# -- cascade op ---------------------------------------------------------------------------


def cascade_view1(
    pc_model, subject: SubjectSpec, sched, steps, w, seed, encoder, text_encoder
) -> torch.Tensor:
    """First factor: one personalized front image from (subject image, text)."""
    feats = encode_image(encoder, subject.image)
    return personalize(pc_model, feats, subject.text, sched, steps, w, seed, text_encoder=text_encoder)


def cascade_rest(
    pm_model, view1: torch.Tensor, sched, steps, w, seed, encoder, text_encoder
) -> list[torch.Tensor]:
    """Second factor: the remaining five views conditioned on view 1."""
    feats = encode_image(encoder, view1)
    res = pm_model.resolution
    joint = "normal" in pm_model.domains
    channels = 6 if joint else 3
    views = []
    for direction in DIRECTIONS[1:]:
        cond = view_condition(feats, direction, text_encoder, domain=DOMAIN_JOINT if joint else DOMAIN_COLOR)
        out = reverse_sample_raw(
            pm_model, cond, sched, steps, w,
            stream_seed(seed, direction),
            shape=(1, channels, res, res),
        )[0]
        views.append(out[:3])
    return views


def cascade_sample(
    pc_opt,
    pm_opt,
    subject: SubjectSpec,
    sched,
    steps: int,
    w: float,
    seed: int,
    encoder: ImageFeatureEncoder | None = None,
    text_encoder: HashTextEncoder | None = None,
    cameras=None,
    view1_via_multiview: bool = False,
    subject_id: str = "",
) -> MultiViewBatch:
    """Full six-view sample: view 1 from the personalized model, views
    2..6 from the multi-view model conditioned on view 1.

    The two factors draw from independent named seed streams split from
    ``seed``, so sampling them separately with the same streams
    reproduces this output bitwise. ``view1_via_multiview`` switches to
    the alternative reading in which view 1 is also produced by the
    multi-view model (documented flag; default off).
    """
    encoder = encoder or ImageFeatureEncoder()
    text_encoder = text_encoder or HashTextEncoder()
    seed_v1 = stream_seed(seed, "cascade", "view1")
    seed_rest = stream_seed(seed, "cascade", "rest")
    if view1_via_multiview:
        feats = encode_image(encoder, subject.image)
        joint = "normal" in pm_opt.domains
        cond = view_condition(feats, "front", text_encoder, domain=DOMAIN_JOINT if joint else DOMAIN_COLOR)
        out = reverse_sample_raw(
            pm_opt, cond, sched, steps, w, seed_v1,
            shape=(1, 6 if joint else 3, pm_opt.resolution, pm_opt.resolution),
        )[0]
        view1 = out[:3]
    else:
        view1 = cascade_view1(pc_opt, subject, sched, steps, w, seed_v1, encoder, text_encoder)
    rest = cascade_rest(pm_opt, view1, sched, steps, w, seed_rest, encoder, text_encoder)
    return MultiViewBatch(
        colors=torch.stack([view1] + rest),
        cameras=cameras,
        subject_id=subject_id,
    )


# -- stages -----------------------------------------------------------------------------


def _stage_multiview_lift(ctx: RunContext) -> dict:
    out = ctx.stage_dir("multiview_lift")
    pm, pm_hash = ctx.load_base("multiview")
    lift = generate_multiviews(
        pm,
        ctx.subject.image,
        ctx.sched,
        ctx.steps,
        ctx.stream("lift"),
        encoder=ctx.encoder,
        text_encoder=ctx.text_encoder,
        w=ctx.guidance,
        cameras=ctx.corpus.cameras,
        subject_id="subject",
    )
    save_view_batch(lift, out / "lift.npz")
    for i, d in enumerate(lift.directions):
        save_png(lift.colors[i], out / f"color_{d}.png")
        if lift.normals is not None:
            save_normal_png(lift.normals[i], out / f"normal_{d}.png")
    arts = {"lift": "stages/multiview_lift/lift.npz"}
    return {"artifacts": arts, "checkpoints": {"multiview_base": pm_hash}}


def _stage_identity_aware_opt(ctx: RunContext) -> dict:
    out = ctx.stage_dir("identity_aware_opt")
    pc, pc_hash = ctx.load_base("personalizer")
    lift = load_view_batch(ctx.workspace / "stages/multiview_lift/lift.npz")
    prompts = build_view_prompts(ctx.subject.identifier, ctx.subject.class_noun)
    extra = ctx.subject.text if ctx.cfg.identity_prompt_mode == "view_plus_text" else ""
    tuned = identity_aware_optimize(
        pc,
        lift,
        prompts,
        ctx.encoder,
        ctx.cfg.personalizer_config(),
        ctx.stream("stage1"),
        ctx.sched,
        text_encoder=ctx.text_encoder,
        extra_text=extra,
    )
    save_delta(
        out / "personalizer_delta.npz",
        tuned,
        "image_cross_attention",
        base_hash=pc_hash,
        config=ctx.cfg.raw["personalizer_opt"],
        seed=ctx.stream("stage1"),
    )
    return {
        "artifacts": {"personalizer_delta": "stages/identity_aware_opt/personalizer_delta.npz"},
        "checkpoints": {"personalizer_base": pc_hash, "personalizer_tuned": model_hash(tuned)},
    }


def _stage_diversify(ctx: RunContext) -> dict:
    out = ctx.stage_dir("diversify")
    pc, pc_hash = ctx.load_base("personalizer")
    # Provenance: this stage must see the ORIGINAL personalizer, i.e. the
    # same base the identity stage started from.
    manifest = _load_manifest(ctx.workspace)
    recorded = manifest.stage("identity_aware_opt")["checkpoints"]["personalizer_base"]
    if recorded != pc_hash:
        raise IntegrityError(
            f"diversify needs the original personalizer {recorded[:12]}, got {pc_hash[:12]}"
        )
    lift = load_view_batch(ctx.workspace / "stages/multiview_lift/lift.npz")
    text_embed = text_condition(ctx.text_encoder, ctx.subject.text)
    views = []
    for i, direction in enumerate(DIRECTIONS):
        feats = encode_image(ctx.encoder, lift.colors[i])
        cond = ConditionBundle(text=text_embed, image=feats, domain=DOMAIN_COLOR)
        img = reverse_sample(
            pc, cond, ctx.sched, ctx.steps, ctx.guidance, ctx.stream("diversify", direction)
        ).item(0)
        views.append(img)
    batch = MultiViewBatch(colors=torch.stack(views), subject_id="diversified")
    batch = batch.with_normals(estimate_batch_normals(NormalEstimator(), batch.colors))
    save_view_batch(batch, out / "diversified.npz")
    for i, d in enumerate(batch.directions):
        save_png(batch.colors[i], out / f"color_{d}.png")
        save_normal_png(batch.normals[i], out / f"normal_{d}.png")
    return {
        "artifacts": {"diversified": "stages/diversify/diversified.npz"},
        "checkpoints": {"personalizer_base": pc_hash},
    }


def _stage_subject_prior_opt(ctx: RunContext) -> dict:
    out = ctx.stage_dir("subject_prior_opt")
    pm, pm_hash = ctx.load_base("multiview")
    training_views = load_view_batch(ctx.workspace / "stages/diversify/diversified.npz")
    tuned = subject_prior_optimize(
        pm,
        training_views,
        ctx.cfg.multiview_config(),
        ctx.stream("stage2"),
        ctx.sched,
        encoder=ctx.encoder,
        text_encoder=ctx.text_encoder,
    )
    save_delta(
        out / "multiview_delta.npz",
        tuned,
        "cross_domain_self_attention",
        base_hash=pm_hash,
        config=ctx.cfg.raw["multiview_opt"],
        seed=ctx.stream("stage2"),
    )
    return {
        "artifacts": {"multiview_delta": "stages/subject_prior_opt/multiview_delta.npz"},
        "checkpoints": {"multiview_base": pm_hash, "multiview_tuned": model_hash(tuned)},
    }


def _load_tuned_models(ctx: RunContext):
    """Bases plus deltas, with hash assertions at every hop."""
    manifest = _load_manifest(ctx.workspace)
    pc, pc_hash = ctx.load_base("personalizer")
    apply_delta(ctx.workspace / "stages/identity_aware_opt/personalizer_delta.npz", pc, pc_hash)
    want = manifest.stage("identity_aware_opt")["checkpoints"]["personalizer_tuned"]
    got = model_hash(pc)
    if got != want:
        raise IntegrityError(f"tuned personalizer hash {got[:12]} != recorded {want[:12]}")
    pm, pm_hash = ctx.load_base("multiview")
    apply_delta(ctx.workspace / "stages/subject_prior_opt/multiview_delta.npz", pm, pm_hash)
    want = manifest.stage("subject_prior_opt")["checkpoints"]["multiview_tuned"]
    got = model_hash(pm)
    if got != want:
        raise IntegrityError(f"tuned multi-view hash {got[:12]} != recorded {want[:12]}")
    return pc, pm


def _stage_cascade_sample(ctx: RunContext) -> dict:
    out = ctx.stage_dir("cascade_sample")
    pc, pm = _load_tuned_models(ctx)
    batch = cascade_sample(
        pc,
        pm,
        ctx.subject,
        ctx.sched,
        ctx.steps,
        ctx.guidance,
        ctx.stream("cascade"),
        encoder=ctx.encoder,
        text_encoder=ctx.text_encoder,
        cameras=ctx.corpus.cameras,
        view1_via_multiview=ctx.cfg.view1_via_multiview,
        subject_id="cascade",
    )
    save_view_batch(batch, out / "views.npz")
    for i, d in enumerate(batch.directions):
        save_png(batch.colors[i], out / f"view_{d}.png")
    return {
        "artifacts": {
            "views": "stages/cascade_sample/views.npz",
            **{f"view_{d}": f"stages/cascade_sample/view_{d}.png" for d in batch.directions},
        },
        "checkpoints": {"personalizer_tuned": model_hash(pc), "multiview_tuned": model_hash(pm)},
    }


def _stage_reconstruction(ctx: RunContext) -> dict:
    out = ctx.stage_dir("reconstruction")
    views = load_view_batch(
        ctx.workspace / "stages/cascade_sample/views.npz", cameras=ctx.corpus.cameras
    )
    recon = ctx.cfg.recon
    splats = fit_gaussians(
        views,
        iters=int(recon["iterations"]),
        seed=ctx.stream("recon"),
        count=int(recon["gaussians"]),
    )
    splats.save(out / "gaussians.npz")
    field = bake_field(splats, int(recon["field_resolution"]))
    mesh = extract_mesh(field, float(recon["iso_fraction"]) * float(field.density.max()))
    export_mesh(mesh, "obj", out / "mesh.obj")
    export_mesh(mesh, "ply", out / "mesh.ply")
    return {
        "artifacts": {
            "gaussians": "stages/reconstruction/gaussians.npz",
            "mesh_obj": "stages/reconstruction/mesh.obj",
            "mesh_ply": "stages/reconstruction/mesh.ply",
        },
        "checkpoints": {},
    }


_STAGE_FNS = {
    "multiview_lift": _stage_multiview_lift,
    "identity_aware_opt": _stage_identity_aware_opt,
    "diversify": _stage_diversify,
    "subject_prior_opt": _stage_subject_prior_opt,
    "cascade_sample": _stage_cascade_sample,
    "reconstruction": _stage_reconstruction,
}


# -- runner -----------------------------------------------------------------------------


def _load_manifest(workspace: Path) -> RunManifest:
    path = Path(workspace) / MANIFEST_NAME
    if not path.exists():
        raise IntegrityError(f"no manifest at {path}")
    with open(path) as f:
        return RunManifest.from_dict(json.load(f))


def _execute(ctx: RunContext, manifest: RunManifest, stage_until: str | None) -> RunManifest:
    done = set(manifest.completed())
    for name in STAGES:
        if name in done:
            continue
        start = time.monotonic()
        try:
            result = _STAGE_FNS[name](ctx)
        except Subject3DError as exc:
            manifest.failure = {"stage": name, "error": str(exc)}
            manifest.save(ctx.workspace)
            raise
        record = {
            "name": name,
            "duration_s": time.monotonic() - start,
            "seed_stream": stream_seed(ctx.seed, _STAGE_STREAMS[name]),
            "artifacts": result["artifacts"],
            "checkpoints": result.get("checkpoints", {}),
            "hashes": {
                rel: _file_hash(ctx.workspace / rel) for rel in result["artifacts"].values()
            },
        }
        manifest.stages.append(record)
        manifest.failure = None
        manifest.save(ctx.workspace)
        if stage_until is not None and name == stage_until:
            break
    return manifest


_STAGE_STREAMS = {
    "multiview_lift": "lift",
    "identity_aware_opt": "stage1",
    "diversify": "diversify",
    "subject_prior_opt": "stage2",
    "cascade_sample": "cascade",
    "reconstruction": "recon",
}


def run_pipeline(
    config_path,
    workspace=None,
    seed: int | None = None,
    stage_until: str | None = None,
) -> RunManifest:
    """Run the pipeline from scratch in a fresh workspace.

    ``workspace``/``seed`` override the config. ``stage_until`` stops
    after the named stage (inclusive), leaving a resumable manifest.
    """
    cfg = load_config(config_path)
    if seed is not None:
        cfg = normalize_config({**cfg.raw, "seed": int(seed)})
    if stage_until is not None and stage_until not in STAGES:
        raise ConfigError(f"unknown stage {stage_until!r}; expected one of {STAGES}")
    ws = Path(workspace or cfg.workspace or "run")
    if (ws / MANIFEST_NAME).exists():
        raise ConfigError(f"workspace {ws} already holds a run; use resume or a fresh directory")
    ws.mkdir(parents=True, exist_ok=True)
    ctx = RunContext(cfg, ws)
    dump_config(cfg, ws / "config.resolved.yaml")
    manifest = RunManifest(config_hash=cfg.config_hash(), root_seed=cfg.seed, stages=[])
    return _execute(ctx, manifest, stage_until)


def load_run(manifest_path) -> tuple[RunConfig, RunManifest, Path]:
    """Rehydrate a run: verify config hash and recorded artifact hashes.

    Raises IntegrityError naming the first missing or tampered artifact.
    """
    manifest_path = Path(manifest_path)
    workspace = manifest_path.parent if manifest_path.is_file() else Path(manifest_path)
    manifest = _load_manifest(workspace)
    cfg_path = workspace / "config.resolved.yaml"
    if not cfg_path.exists():
        raise IntegrityError(f"missing resolved config at {cfg_path}")
    cfg = load_config(cfg_path)
    if cfg.config_hash() != manifest.config_hash:
        raise IntegrityError(
            f"config hash {cfg.config_hash()[:12]} does not match manifest {manifest.config_hash[:12]}"
        )
    for s in manifest.stages:
        for rel in s["artifacts"].values():
            path = workspace / rel
            if not path.exists():
                raise IntegrityError(f"artifact missing: {rel}")
            got = _file_hash(path)
            if got != s["hashes"][rel]:
                raise IntegrityError(f"artifact {rel} hash mismatch (tampered or stale)")
    return cfg, manifest, workspace


def resume_pipeline(manifest_path, stage_until: str | None = None) -> RunManifest:
    """Re-execute only the stages after the last completed one."""
    cfg, manifest, workspace = load_run(manifest_path)
    ctx = RunContext(cfg, workspace)
    manifest.failure = None
    return _execute(ctx, manifest, stage_until)
