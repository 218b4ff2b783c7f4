"""Training objective, classifier-free guidance, and deterministic sampling.

The sampler is the non-stochastic reverse update (DDIM with eta=0): it
starts from seeded Gaussian noise and alternately estimates the clean
image and re-noises to the next coarser timestep. Determinism given
(model parameters, condition, seed) is a hard contract here; the
pipeline's factorization and resume tests compare outputs bitwise.
"""

from __future__ import annotations

import torch

from .errors import NonFiniteError, ScheduleError, ShapeError
from .images import ImageBatch
from .models import ConditionBundle
from .rng import make_generator
from .schedule import NoiseSchedule, forward_noise


def diffusion_loss(
    model,
    x0,
    cond: ConditionBundle,
    t: int,
    eps: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Noise-prediction MSE at timestep t.

    Noises ``x0`` with the caller-supplied ``eps`` draw, asks the model
    for its noise estimate, and returns the squared error averaged over
    batch and pixels as a scalar tensor (differentiable).

    Raises:
        NonFiniteError: if the model output is not finite, so a NaN can
            never propagate silently into an optimizer step.
    """
    data = x0.data if isinstance(x0, ImageBatch) else x0
    eps_data = eps.data if isinstance(eps, ImageBatch) else eps
    if data.shape != eps_data.shape:
        raise ShapeError(f"x0 shape {tuple(data.shape)} != eps shape {tuple(eps_data.shape)}")
    x_t = forward_noise(data, eps_data, t, sched)
    pred = model.predict(x_t, cond, t)
    if not torch.isfinite(pred).all():
        raise NonFiniteError(f"model output non-finite at t={t}", context={"t": t})
    return (eps_data - pred).pow(2).mean()


def cfg_predict(model, x_t: torch.Tensor, cond: ConditionBundle, t: int, w: float) -> torch.Tensor:
    """Guided noise estimate w * eps(x, cond) + (1 - w) * eps(x, null).

    The unconditional branch drops both the text and the image condition
    but keeps the domain tag. w=1 reduces to the conditional prediction
    and w=0 to the unconditional one, exactly.
    """
    conditional = model.predict(x_t, cond, t)
    if w == 1.0 or cond.is_unconditional:
        return conditional
    unconditional = model.predict(x_t, cond.as_unconditional(), t)
    if w == 0.0:
        return unconditional
    return w * conditional + (1.0 - w) * unconditional


def sampling_timesteps(sched: NoiseSchedule, num_inference_steps: int) -> list[int]:
    """Descending timestep ladder T = t_0 > t_1 > ... > t_S = 0."""
    if not 1 <= num_inference_steps <= sched.T:
        raise ScheduleError(
            f"num_inference_steps must be in [1, T={sched.T}], got {num_inference_steps}"
        )
    grid = torch.linspace(sched.T, 0, num_inference_steps + 1)
    return [int(round(float(v))) for v in grid]


def reverse_sample_raw(
    model,
    cond: ConditionBundle,
    sched: NoiseSchedule,
    num_inference_steps: int,
    w: float,
    seed: int,
    shape: tuple[int, ...],
    dtype=torch.float64,
    x0_clip_min: float = -1.0,
    x0_clip_max: float = 1.0,
) -> torch.Tensor:
    """Core deterministic reverse loop on a raw tensor of the given shape.

    Raises:
        NonFiniteError: if any iterate diverges; the message names the
            failing step and timestep.
    """
    x = torch.randn(shape, generator=make_generator(seed), dtype=dtype)
    ladder = sampling_timesteps(sched, num_inference_steps)
    with torch.no_grad():
        for i in range(num_inference_steps):
            t_hi, t_lo = ladder[i], ladder[i + 1]
            eps_hat = cfg_predict(model, x, cond, t_hi, w)
            a_hi, s_hi = sched.alpha(t_hi), sched.sigma(t_hi)
            a_lo, s_lo = sched.alpha(t_lo), sched.sigma(t_lo)
            # Static clipping of the clean-image estimate: keeps the 1/alpha
            # amplification at early (high-t) steps from derailing the
            # trajectory when the noise estimate is imperfect.
            x0_hat = ((x - s_hi * eps_hat) / a_hi).clamp(x0_clip_min, x0_clip_max)
            x = a_lo * x0_hat + s_lo * eps_hat
            if not torch.isfinite(x).all():
                raise NonFiniteError(
                    f"sampling diverged at step {i} (t={t_hi} -> {t_lo})",
                    context={"step": i, "t_hi": t_hi, "t_lo": t_lo},
                )
    return x.clamp(-1.0, 1.0)


def reverse_sample(
    model,
    cond: ConditionBundle,
    sched: NoiseSchedule,
    num_inference_steps: int,
    w: float,
    seed: int,
    batch_size: int = 1,
    shape: tuple[int, ...] | None = None,
) -> ImageBatch:
    """Deterministic sample as an ImageBatch in [-1, 1].

    ``shape`` defaults to (batch_size, 3, R, R) using the model's
    declared resolution; only 3-channel shapes can be wrapped as an
    ImageBatch (the multi-view joint domain goes through
    ``reverse_sample_raw``).
    """
    if shape is None:
        res = model.resolution
        shape = (batch_size, 3, res, res)
    if shape[1] != 3:
        raise ShapeError("reverse_sample wraps 3-channel outputs; use reverse_sample_raw")
    x = reverse_sample_raw(model, cond, sched, num_inference_steps, w, seed, shape)
    return ImageBatch(x)
