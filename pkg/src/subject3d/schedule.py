"""Discrete noise schedules and the forward noising map.

A schedule holds the fixed coefficient sequences (alpha_t, sigma_t) for
t = 0..T of a variance-preserving forward process, with the identity at
t=0 (alpha_0=1, sigma_0=0) and alpha_t^2 + sigma_t^2 = 1 throughout.

Both kinds are sampled from continuous-time closed forms at u = t/T, so
tables for different T agree along shared fractions:

* ``variance-preserving-linear``: linear beta ramp,
  alpha(u) = exp(-1/2 (b0 u + 1/2 (b1 - b0) u^2)) with b0=0.1, b1=20.
* ``variance-preserving-cosine``: shifted cosine,
  alpha(u) = cos(pi/2 (u+s)/(1+s)) / cos(pi/2 s/(1+s)) with s=0.008,
  floored at ALPHA_FLOOR so the t=T endpoint stays strictly positive
  (the deterministic sampler divides by alpha_t).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .errors import ScheduleError, ShapeError

VP_LINEAR = "variance-preserving-linear"
VP_COSINE = "variance-preserving-cosine"
SCHEDULE_KINDS = (VP_LINEAR, VP_COSINE)

BETA_MIN = 0.1
BETA_MAX = 20.0
COSINE_SHIFT = 0.008
ALPHA_FLOOR = 1e-3


@dataclass(frozen=True)
class NoiseSchedule:
    """Fixed (alpha_t, sigma_t) sequences for t = 0..T."""

    num_steps: int
    alphas: torch.Tensor  # (T+1,) float64, nonincreasing, alphas[0] = 1
    sigmas: torch.Tensor  # (T+1,) float64, nondecreasing, sigmas[0] = 0
    kind: str = field(default=VP_LINEAR)

    @property
    def T(self) -> int:
        return self.num_steps

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t])

    def sigma(self, t: int) -> float:
        self._check_t(t)
        return float(self.sigmas[t])

    def _check_t(self, t: int) -> None:
        if not 0 <= t <= self.num_steps:
            raise ScheduleError(f"timestep {t} outside [0, {self.num_steps}]")

    def descriptor(self) -> dict:
        """JSON-ready description sufficient to rebuild the schedule."""
        return {"num_steps": self.num_steps, "kind": self.kind}


def _alpha_linear(u: torch.Tensor) -> torch.Tensor:
    return torch.exp(-0.5 * (BETA_MIN * u + 0.5 * (BETA_MAX - BETA_MIN) * u * u))


def _alpha_cosine(u: torch.Tensor) -> torch.Tensor:
    s = COSINE_SHIFT
    num = torch.cos(math.pi / 2 * (u + s) / (1 + s))
    den = math.cos(math.pi / 2 * s / (1 + s))
    return (num / den).clamp_min(ALPHA_FLOOR)


def build_schedule(T: int, kind: str = VP_LINEAR) -> NoiseSchedule:
    """Build the (T+1)-entry schedule table for the given kind.

    Raises:
        ScheduleError: for T < 1 or an unknown kind.
    """
    if not isinstance(T, int) or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T!r}")
    u = torch.arange(T + 1, dtype=torch.float64) / T
    if kind == VP_LINEAR:
        alphas = _alpha_linear(u)
    elif kind == VP_COSINE:
        alphas = _alpha_cosine(u)
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    alphas[0] = 1.0
    sigmas = torch.sqrt((1.0 - alphas * alphas).clamp_min(0.0))
    return NoiseSchedule(num_steps=T, alphas=alphas, sigmas=sigmas, kind=kind)


def schedule_from_descriptor(desc: dict) -> NoiseSchedule:
    return build_schedule(int(desc["num_steps"]), str(desc["kind"]))


def forward_noise(x0: torch.Tensor, eps: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    """Noisy state x_t = alpha_t * x0 + sigma_t * eps, elementwise.

    Accepts raw tensors of any matching shape; the caller owns batch
    semantics. Raises on shape mismatch or t outside [0, T].
    """
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    return sched.alpha(t) * x0 + sched.sigma(t) * eps
