"""Multi-view batches and the subject-prior fine-tuning stage.

A MultiViewBatch carries the six canonical-direction color views of one
subject, optionally with per-view normal maps, masks, and cameras. The
multi-view denoiser treats each view as an independent sample
conditioned on (subject image features, direction prompt); its joint
domain stacks the color and normal streams so the shared self-attention
block ties the two domains together.

Stage-two fine-tuning optimizes only the cross-domain self-attention
group under a loss that adds a mean-absolute parameter-drift penalty to
the usual noise-prediction MSE.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch

from .cameras import Camera, canonical_cameras
from .encoders import HashTextEncoder, ImageFeatureEncoder, encode_image
from .errors import NonFiniteError, ShapeError
from .models import (
    DOMAIN_JOINT,
    GROUP_NAMES,
    ConditionBundle,
    snapshot_params,
)
from .prompts import DIRECTIONS
from .rng import make_generator, stream_seed
from .sampling import diffusion_loss, reverse_sample_raw
from .schedule import NoiseSchedule


@dataclass
class MultiViewBatch:
    """Direction-tagged views of one subject.

    ``colors`` is (6, 3, H, W) ordered like ``directions`` (the canonical
    six, each exactly once). ``normals``/``masks`` are optional and share
    that order; normal maps must be unit vectors inside the mask.
    """

    colors: torch.Tensor
    directions: tuple[str, ...] = field(default=DIRECTIONS)
    normals: torch.Tensor | None = None
    masks: torch.Tensor | None = None
    cameras: tuple[Camera, ...] | None = None
    subject_id: str = ""

    def __post_init__(self):
        if tuple(sorted(self.directions)) != tuple(sorted(DIRECTIONS)):
            raise ShapeError(
                f"directions must be the canonical six exactly once, got {self.directions}"
            )
        if self.colors.shape[0] != 6 or self.colors.shape[1] != 3:
            raise ShapeError(f"colors must be (6, 3, H, W), got {tuple(self.colors.shape)}")
        if not torch.isfinite(self.colors).all():
            raise ShapeError("colors contain non-finite values")
        if self.normals is not None:
            if self.normals.shape != self.colors.shape:
                raise ShapeError("normals must match colors shape")
            norms = self.normals.pow(2).sum(dim=1).sqrt()
            inside = norms if self.masks is None else norms[self.masks]
            if inside.numel() and (inside - 1.0).abs().max() > 1e-3:
                raise ShapeError("normal maps must be unit vectors (within 1e-3) in the foreground")
        if self.cameras is not None and len(self.cameras) != 6:
            raise ShapeError("cameras must list one pose per view")

    @property
    def resolution(self) -> int:
        return self.colors.shape[-1]

    def index_of(self, direction: str) -> int:
        return self.directions.index(direction)

    def view(self, direction: str) -> torch.Tensor:
        return self.colors[self.index_of(direction)]

    def with_normals(self, normals: torch.Tensor) -> "MultiViewBatch":
        return replace(self, normals=normals)


@dataclass
class MVTrainConfig:
    """Hyperparameters of the subject-prior stage.

    Defaults follow the reference recipe (Adam 5e-5 / weight decay 1e-2,
    ~100 iterations, drift weight 1, image size 256); ``toy()`` shrinks
    the image size and raises the learning rate to suit the desk-scale
    models.
    """

    learning_rate: float = 5e-5
    weight_decay: float = 1e-2
    iterations: int = 100
    lam: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    image_size: int = 256

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ShapeError("learning_rate must be positive, weight_decay nonnegative")
        if self.iterations < 0:
            raise ShapeError("iterations must be nonnegative")
        if self.lam < 0:
            raise ShapeError("lam must be nonnegative")

    @classmethod
    def toy(cls, **overrides) -> "MVTrainConfig":
        defaults = dict(image_size=32, learning_rate=2e-3)
        defaults.update(overrides)
        return cls(**defaults)


# -- conditioning -------------------------------------------------------------------


def view_condition(
    subject_features,
    direction: str,
    text_encoder: HashTextEncoder,
    domain: str = DOMAIN_JOINT,
) -> ConditionBundle:
    """Condition for generating one view: subject features + direction text."""
    return ConditionBundle(text=text_encoder.encode(direction), image=subject_features, domain=domain)


# -- sampling -----------------------------------------------------------------------


def generate_multiviews(
    mv_model,
    subject: torch.Tensor,
    sched: NoiseSchedule,
    steps: int,
    seed: int,
    encoder: ImageFeatureEncoder | None = None,
    text_encoder: HashTextEncoder | None = None,
    w: float = 1.0,
    cameras: tuple[Camera, ...] | None = None,
    subject_id: str = "",
) -> MultiViewBatch:
    """Six views of the subject shown in one image, deterministic per seed.

    Colors always; normal maps too when the model has a normal domain.
    Each view is sampled independently, conditioned on the subject image
    features and its direction word; the front view is the model's
    reconstruction of the input subject.
    """
    encoder = encoder or ImageFeatureEncoder()
    text_encoder = text_encoder or HashTextEncoder()
    feats = encode_image(encoder, subject)
    res = mv_model.resolution
    joint = "normal" in mv_model.domains
    domain = DOMAIN_JOINT if joint else "color"
    channels = 6 if joint else 3

    colors, normals = [], []
    for direction in DIRECTIONS:
        cond = view_condition(feats, direction, text_encoder, domain=domain)
        out = reverse_sample_raw(
            mv_model, cond, sched, steps, w,
            stream_seed(seed, "multiview", direction),
            shape=(1, channels, res, res),
        )[0]
        colors.append(out[:3])
        if joint:
            normals.append(out[3:])
    cams = cameras or canonical_cameras(res)
    batch = MultiViewBatch(
        colors=torch.stack(colors),
        normals=_renormalized(torch.stack(normals)) if joint else None,
        cameras=cams,
        subject_id=subject_id,
    )
    return batch


def _renormalized(normal_maps: torch.Tensor) -> torch.Tensor:
    norm = normal_maps.pow(2).sum(dim=1, keepdim=True).sqrt().clamp_min(1e-12)
    return normal_maps / norm


# -- subject-prior loss and optimization ----------------------------------------------


def parameter_drift(model, theta0: dict[str, torch.Tensor]) -> torch.Tensor:
    """Mean absolute drift ||theta - theta0||_1 / N over all trainable params."""
    total = model.num_parameters()
    drift = None
    for g in GROUP_NAMES:
        ref = theta0[g]
        if ref.numel() == 0:
            continue
        cur = torch.cat([p.reshape(-1) for p in model.group_parameters(g)])
        if cur.numel() != ref.numel():
            raise ShapeError(f"snapshot size mismatch in group {g!r}")
        term = (cur - ref).abs().sum()
        drift = term if drift is None else drift + term
    return drift / total


def subject_prior_loss(
    mv_model,
    theta0_snapshot: dict[str, torch.Tensor],
    x0: MultiViewBatch,
    conds: list[ConditionBundle],
    t: int,
    eps: torch.Tensor,
    lam: float,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Noise-prediction MSE over both domains plus the drift penalty.

    The diffusion term sums the color-domain and normal-domain MSEs with
    equal weight (one independent noise draw per domain, stacked in
    ``eps`` as 6 channels per view); the penalty is
    lam * ||theta - theta0||_1 / N_theta over all trainable parameters.
    """
    if x0.normals is None:
        raise ShapeError("subject-prior loss requires normal maps in the training views")
    joint = torch.cat([x0.colors, x0.normals], dim=1)  # (6, 6, H, W)
    if eps.shape != joint.shape:
        raise ShapeError(f"eps shape {tuple(eps.shape)} != joint views {tuple(joint.shape)}")
    if len(conds) != len(DIRECTIONS):
        raise ShapeError("one condition bundle per view required")
    diff = None
    for i in range(joint.shape[0]):
        li = diffusion_loss(mv_model, joint[i : i + 1], conds[i], t, eps[i : i + 1], sched)
        diff = li if diff is None else diff + li
    diff = diff / joint.shape[0]
    return diff + lam * parameter_drift(mv_model, theta0_snapshot)


def subject_prior_optimize(
    mv_model,
    training_views: MultiViewBatch,
    cfg: MVTrainConfig,
    seed: int,
    sched: NoiseSchedule,
    encoder: ImageFeatureEncoder | None = None,
    text_encoder: HashTextEncoder | None = None,
    loss_log: list | None = None,
):
    """Fine-tune only the cross-domain self-attention group.

    Every iteration draws one timestep per view and one 6-channel noise
    tensor per view from the seed stream, sums the per-view losses in
    canonical order, and takes one Adam step. The drift reference theta0
    is the parameter state at entry. Returns a tuned copy; the input
    model is untouched.
    """
    import copy

    encoder = encoder or ImageFeatureEncoder()
    text_encoder = text_encoder or HashTextEncoder()
    model = copy.deepcopy(mv_model)
    if cfg.iterations == 0:
        return model
    theta0 = snapshot_params(model)

    for g in GROUP_NAMES:
        req = g == "cross_domain_self_attention"
        for p in model.group_parameters(g):
            p.requires_grad_(req)
    opt = torch.optim.Adam(
        model.group_parameters("cross_domain_self_attention"),
        lr=cfg.learning_rate,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )

    front = training_views.view("front")
    feats = encode_image(encoder, front)
    conds = [view_condition(feats, d, text_encoder, domain=DOMAIN_JOINT) for d in DIRECTIONS]
    joint_shape = (6, training_views.resolution, training_views.resolution)

    for it in range(cfg.iterations):
        opt.zero_grad()
        loss = None
        for vi, direction in enumerate(DIRECTIONS):
            t = int(
                torch.randint(
                    1, sched.T + 1, (1,),
                    generator=make_generator(seed, "prior", it, direction, "t"),
                ).item()
            )
            eps = torch.randn(
                (1, *joint_shape),
                generator=make_generator(seed, "prior", it, direction, "eps"),
                dtype=torch.float64,
            )
            joint = torch.cat(
                [
                    training_views.colors[vi : vi + 1],
                    training_views.normals[vi : vi + 1],
                ],
                dim=1,
            )
            li = diffusion_loss(model, joint, conds[vi], t, eps, sched)
            loss = li if loss is None else loss + li
        loss = loss / len(DIRECTIONS) + cfg.lam * parameter_drift(model, theta0)
        if not torch.isfinite(loss):
            raise NonFiniteError(f"subject-prior loss non-finite at iteration {it}", context={"iteration": it})
        loss.backward()
        opt.step()
        if loss_log is not None:
            loss_log.append(loss.item())

    for p in model.parameters():
        p.requires_grad_(True)
    return model
