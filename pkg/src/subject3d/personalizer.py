"""The single-image personalized model and its identity fine-tuning stage.

The personalizer conditions on a prompt embedding (text cross-attention)
and subject image features (image cross-attention). Identity fine-tuning
trains only the image cross-attention group on the six direction-tagged
views of the subject, with view-dependent prompts and seeded
augmentations; the backbone and the text cross-attention stay frozen,
which tests verify bitwise.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch

from .augment import augment
from .encoders import HashTextEncoder, ImageFeatureEncoder, encode_image, text_condition
from .errors import NonFiniteError, ShapeError
from .models import DOMAIN_COLOR, GROUP_NAMES, ConditionBundle
from .multiview import MultiViewBatch
from .prompts import DIRECTIONS, ViewPrompt
from .rng import make_generator, stream_seed
from .sampling import diffusion_loss, reverse_sample
from .schedule import NoiseSchedule


@dataclass
class PersonalizerTrainConfig:
    """Hyperparameters of the identity stage.

    Defaults follow the reference recipe (Adam 1e-4 / weight decay 0.01,
    30 iterations, image size 256); ``toy()`` shrinks the image size and
    raises the learning rate for the desk-scale models.
    """

    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    iterations: int = 30
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    image_size: int = 256

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ShapeError("learning_rate must be positive, weight_decay nonnegative")
        if self.iterations < 0:
            raise ShapeError("iterations must be nonnegative")
        if self.image_size < 4:
            raise ShapeError("image_size too small")

    @classmethod
    def toy(cls, **overrides) -> "PersonalizerTrainConfig":
        defaults = dict(image_size=32, learning_rate=3e-3)
        defaults.update(overrides)
        return cls(**defaults)


def identity_aware_optimize(
    model,
    views: MultiViewBatch,
    prompts: tuple[ViewPrompt, ...],
    encoder: ImageFeatureEncoder,
    cfg: PersonalizerTrainConfig,
    seed: int,
    sched: NoiseSchedule,
    text_encoder: HashTextEncoder | None = None,
    extra_text: str = "",
    loss_log: list | None = None,
):
    """Fine-tune only the image cross-attention group on the subject views.

    Each iteration walks the six views in canonical order; for each it
    draws a timestep and a noise tensor from the seed stream, augments
    the view, and conditions on (view prompt embedding, features of the
    augmented view). One Adam step per iteration on the summed loss.
    Returns a tuned copy; the input model is untouched.

    ``extra_text`` is appended to each view prompt at embedding time
    (off by default: plain view prompts drive this stage; appending the
    text modification is the documented alternative).

    Raises:
        ShapeError: if prompts and view directions disagree.
        NonFiniteError: on a non-finite loss, naming the iteration.
    """
    text_encoder = text_encoder or HashTextEncoder()
    if tuple(p.direction for p in prompts) != tuple(views.directions):
        raise ShapeError(
            f"prompt directions {[p.direction for p in prompts]} do not match "
            f"view directions {list(views.directions)}"
        )
    model = copy.deepcopy(model)
    if cfg.iterations == 0:
        return model

    for g in GROUP_NAMES:
        req = g == "image_cross_attention"
        for p in model.group_parameters(g):
            p.requires_grad_(req)
    opt = torch.optim.Adam(
        model.group_parameters("image_cross_attention"),
        lr=cfg.learning_rate,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )

    suffix = f", {extra_text.strip()}" if extra_text.strip() else ""
    prompt_embeds = [text_encoder.encode(p.rendered_text + suffix) for p in prompts]

    for it in range(cfg.iterations):
        opt.zero_grad()
        loss = None
        for vi, direction in enumerate(DIRECTIONS):
            view = views.colors[vi]
            aug = augment(view, stream_seed(seed, "identity", it, direction, "aug"))
            feats = encode_image(encoder, aug)
            cond = ConditionBundle(text=prompt_embeds[vi], image=feats, domain=DOMAIN_COLOR)
            t = int(
                torch.randint(
                    1, sched.T + 1, (1,),
                    generator=make_generator(seed, "identity", it, direction, "t"),
                ).item()
            )
            eps = torch.randn(
                (1, *view.shape),
                generator=make_generator(seed, "identity", it, direction, "eps"),
                dtype=torch.float64,
            )
            li = diffusion_loss(model, view.unsqueeze(0), cond, t, eps, sched)
            loss = li if loss is None else loss + li
        loss = loss / len(DIRECTIONS)
        if not torch.isfinite(loss):
            raise NonFiniteError(f"identity loss non-finite at iteration {it}", context={"iteration": it})
        loss.backward()
        opt.step()
        if loss_log is not None:
            loss_log.append(loss.item())

    for p in model.parameters():
        p.requires_grad_(True)
    return model


def personalize(
    model,
    subject_features,
    text: str,
    sched: NoiseSchedule,
    steps: int,
    w: float,
    seed: int,
    text_encoder: HashTextEncoder | None = None,
) -> torch.Tensor:
    """One sampled image conditioned on the subject features and text.

    Blank text yields the null text condition. Deterministic per seed;
    returns a (3, H, W) image in [-1, 1].
    """
    text_encoder = text_encoder or HashTextEncoder()
    cond = ConditionBundle(
        text=text_condition(text_encoder, text), image=subject_features, domain=DOMAIN_COLOR
    )
    return reverse_sample(model, cond, sched, steps, w, seed).item(0)
