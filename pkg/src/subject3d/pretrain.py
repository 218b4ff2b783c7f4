"""Corpus pretraining of the desk-scale base models.

The pipeline assumes "pretrained" backbones the way a production stack
assumes large open checkpoints; here both toy models are pretrained
briefly on the synthetic corpus (a seeded, deterministic run) and cached
as regular checkpoints:

* personalizer: given image features of one view of a subject plus a
  view prompt, denoise another view of that subject (identity transfer
  across views);
* multi-view model: given image features of a subject's front view plus
  a direction word, denoise that direction's (color, normal) pair
  jointly.

Both train all parameter groups. A fraction of each batch drops its
conditions, so classifier-free guidance has a meaningful unconditional
branch. Each step shares one timestep across the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .corpus import Corpus
from .encoders import HashTextEncoder, ImageFeatureEncoder, encode_image
from .errors import NonFiniteError
from .models import DOMAIN_COLOR, DOMAIN_JOINT, ConditionBundle, ToyDenoiser
from .prompts import DIRECTIONS, build_view_prompts
from .rng import make_generator
from .sampling import diffusion_loss  # noqa: F401 - re-exported for stage code
from .schedule import forward_noise
from .schedule import NoiseSchedule


@dataclass
class PretrainConfig:
    steps: int = 1200
    batch_size: int = 8
    learning_rate: float = 2e-3
    condition_dropout: float = 0.1
    seed: int = 1001


def default_model_kwargs(resolution: int, domains=(DOMAIN_COLOR,), seed: int = 0, schedule=None) -> dict:
    return dict(
        resolution=resolution,
        base_channels=16,
        attn_dim=16,
        text_dim=16,
        image_dim=64,
        time_dim=8,
        domains=domains,
        seed=seed,
        schedule=schedule,
    )


def _reconstruction_loss(model, x0, cond, t, eps, sched):
    """Clean-image reconstruction error through the noise-prediction interface.

    ||x0 - (x_t - sigma eps_hat) / alpha||^2 equals (sigma/alpha)^2 times
    the plain noise-prediction MSE, which weights every timestep's
    clean-image error equally; uniform weighting is what makes the tiny
    models learn to use their conditions at high t, where the noise-MSE
    signal alone is vanishing.
    """
    x_t = forward_noise(x0, eps, t, sched)
    pred = model.predict(x_t, cond, t)
    if not torch.isfinite(pred).all():
        raise NonFiniteError(f"model output non-finite at t={t}", context={"t": t})
    x0_hat = (x_t - sched.sigma(t) * pred) / sched.alpha(t)
    return (x0 - x0_hat).pow(2).mean()


def _step_loss(model, targets, texts, images, domain, t, eps, sched, n_drop):
    """Batched loss with the trailing ``n_drop`` items unconditional."""
    n = targets.shape[0]
    n_cond = n - n_drop
    loss = None
    if n_cond:
        cond = ConditionBundle(text=texts[:n_cond], image=images[:n_cond], domain=domain)
        loss = _reconstruction_loss(model, targets[:n_cond], cond, t, eps[:n_cond], sched) * (n_cond / n)
    if n_drop:
        uncond = ConditionBundle(domain=domain)
        lu = _reconstruction_loss(model, targets[n_cond:], uncond, t, eps[n_cond:], sched) * (n_drop / n)
        loss = lu if loss is None else loss + lu
    return loss


def _train(model, sample_batch, cfg, sched, stream_name, loss_log):
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    gen = make_generator(cfg.seed, stream_name)
    for step in range(cfg.steps):
        opt.zero_grad()
        targets, texts, images, domain = sample_batch(gen)
        n_drop = int(
            torch.sum(torch.rand(cfg.batch_size, generator=gen) < cfg.condition_dropout).item()
        )
        t = int(torch.randint(1, sched.T + 1, (1,), generator=gen).item())
        eps = torch.randn(targets.shape, generator=gen, dtype=torch.float64)
        loss = _step_loss(model, targets, texts, images, domain, t, eps, sched, n_drop)
        if not torch.isfinite(loss):
            raise NonFiniteError(f"pretraining diverged at step {step}", context={"step": step})
        loss.backward()
        opt.step()
        if loss_log is not None:
            loss_log.append(loss.item())
    return model


def pretrain_personalizer(
    corpus: Corpus,
    subject_ids: list[str],
    sched: NoiseSchedule,
    cfg: PretrainConfig,
    encoder: ImageFeatureEncoder,
    text_encoder: HashTextEncoder,
    model: ToyDenoiser | None = None,
    loss_log: list | None = None,
) -> ToyDenoiser:
    """Train the single-image personalizer base on the given corpus subjects."""
    model = model or ToyDenoiser(**default_model_kwargs(corpus.resolution, seed=cfg.seed, schedule=sched))
    views, prompt_embeds, feats = [], [], []
    for sid in subject_ids:
        info = corpus.subject(sid)
        batch = corpus.views(sid)
        prompts = build_view_prompts(info.identifier, info.class_noun)
        views.append(batch.colors)
        prompt_embeds.append(torch.stack([text_encoder.encode(p.rendered_text) for p in prompts]))
        feats.append(
            torch.stack([encode_image(encoder, batch.colors[i]).embedding for i in range(6)])
        )
    views_t = torch.stack(views)  # (S, 6, 3, H, W)
    prompts_t = torch.stack(prompt_embeds)  # (S, 6, D)
    feats_t = torch.stack(feats)  # (S, 6, F)
    n_subj = len(subject_ids)

    def sample_batch(gen):
        si = torch.randint(n_subj, (cfg.batch_size,), generator=gen)
        src = torch.randint(6, (cfg.batch_size,), generator=gen)
        tgt = torch.randint(6, (cfg.batch_size,), generator=gen)
        return views_t[si, tgt], prompts_t[si, tgt], feats_t[si, src], DOMAIN_COLOR

    return _train(model, sample_batch, cfg, sched, "pretrain-personalizer", loss_log)


def pretrain_multiview(
    corpus: Corpus,
    subject_ids: list[str],
    sched: NoiseSchedule,
    cfg: PretrainConfig,
    encoder: ImageFeatureEncoder,
    text_encoder: HashTextEncoder,
    model: ToyDenoiser | None = None,
    loss_log: list | None = None,
) -> ToyDenoiser:
    """Train the multi-view base: joint color+normal views from a front image."""
    model = model or ToyDenoiser(
        **default_model_kwargs(corpus.resolution, domains=("color", "normal"), seed=cfg.seed + 1, schedule=sched)
    )
    joints, feats = [], []
    for sid in subject_ids:
        batch = corpus.views(sid)
        joints.append(torch.cat([batch.colors, batch.normals], dim=1))  # (6, 6, H, W)
        feats.append(encode_image(encoder, batch.view("front")).embedding)
    joints_t = torch.stack(joints)  # (S, 6, 6, H, W)
    feats_t = torch.stack(feats)  # (S, F)
    direction_embeds = torch.stack([text_encoder.encode(d) for d in DIRECTIONS])
    n_subj = len(subject_ids)

    def sample_batch(gen):
        si = torch.randint(n_subj, (cfg.batch_size,), generator=gen)
        vi = torch.randint(6, (cfg.batch_size,), generator=gen)
        return joints_t[si, vi], direction_embeds[vi], feats_t[si], DOMAIN_JOINT

    return _train(model, sample_batch, cfg, sched, "pretrain-multiview", loss_log)
