"""Noise-prediction networks with named parameter groups.

The denoiser is a small convolutional encoder/decoder operating at a
fixed square resolution, with three attention blocks hung off the latent
feature map:

* a text cross-attention block fed by a prompt embedding,
* an image cross-attention block fed by subject image features,
* a self-attention block whose tokens carry a domain tag and, when the
  input stacks a color and a normal stream, attend jointly across both.

Every trainable parameter belongs to exactly one of four groups
(``backbone``, ``text_cross_attention``, ``image_cross_attention``,
``cross_domain_self_attention``); the fine-tuning stages optimize one
group while the rest stay frozen, and tests verify that bitwise.

Models are single-writer during optimization; ``predict`` is read-only
and treats batch items independently, so prediction may be sharded
across workers freely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F
from torch import nn

from .errors import GroupMismatchError, ShapeError
from .rng import make_generator

GROUP_NAMES = (
    "backbone",
    "text_cross_attention",
    "image_cross_attention",
    "cross_domain_self_attention",
)

DOMAIN_COLOR = "color"
DOMAIN_NORMAL = "normal"
DOMAIN_JOINT = "joint"  # color stream then normal stream, stacked on channels
_DOMAIN_IDS = {DOMAIN_COLOR: 0, DOMAIN_NORMAL: 1}


@dataclass(frozen=True)
class ConditionBundle:
    """Conditioning for one prediction: prompt embedding, image features, domain.

    ``text`` is a (text_dim,) embedding or None; ``image`` is an
    ImageFeatures (anything with an ``embedding`` attribute) or a raw
    (image_dim,) tensor or None. The all-None bundle is the unconditional
    input of classifier-free guidance. ``domain`` selects which stream(s)
    the denoiser processes: color, normal, or joint (color + normal
    stacked as 6 channels).
    """

    text: torch.Tensor | None = None
    image: object | None = None
    domain: str = DOMAIN_COLOR

    def __post_init__(self):
        if self.domain not in (DOMAIN_COLOR, DOMAIN_NORMAL, DOMAIN_JOINT):
            raise ShapeError(f"unknown domain tag {self.domain!r}")

    def as_unconditional(self) -> "ConditionBundle":
        """Drop text and image conditions; the domain tag is kept."""
        return replace(self, text=None, image=None)

    @property
    def is_unconditional(self) -> bool:
        return self.text is None and self.image is None

    def image_embedding(self) -> torch.Tensor | None:
        if self.image is None:
            return None
        return getattr(self.image, "embedding", self.image)


def null_condition(domain: str = DOMAIN_COLOR) -> ConditionBundle:
    return ConditionBundle(text=None, image=None, domain=domain)


def timestep_features(t: int, dim: int, dtype=torch.float64) -> torch.Tensor:
    """Sinusoidal features of an integer timestep index."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / max(half, 1))
    ang = float(t) * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)])


class CrossAttentionBlock(nn.Module):
    """Single-head cross-attention from spatial tokens to a condition vector.

    The condition vector is reshaped into ``n_tokens`` key/value tokens
    (so different spatial positions can read different slices of it) and
    a learned register token is appended, keeping the softmax non-trivial
    even for a single condition token.
    """

    def __init__(self, feat_dim: int, attn_dim: int, cond_dim: int, n_tokens: int = 1):
        super().__init__()
        if cond_dim % n_tokens != 0:
            raise ShapeError(f"cond_dim {cond_dim} not divisible into {n_tokens} tokens")
        self.cond_dim = cond_dim
        self.n_tokens = n_tokens
        self.token_dim = cond_dim // n_tokens
        self.scale = attn_dim**-0.5
        self.to_q = nn.Linear(feat_dim, attn_dim)
        self.to_k = nn.Linear(self.token_dim, attn_dim)
        self.to_v = nn.Linear(self.token_dim, attn_dim)
        self.to_out = nn.Linear(attn_dim, feat_dim)
        self.register = nn.Parameter(torch.zeros(self.token_dim))

    def forward(self, h: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        b, c, hh, ww = h.shape
        if cond.ndim == 1:
            cond = cond.unsqueeze(0).expand(b, -1)
        if cond.shape != (b, self.cond_dim):
            raise ShapeError(f"condition shape {tuple(cond.shape)} != ({b}, {self.cond_dim})")
        tokens = h.flatten(2).transpose(1, 2)  # (B, HW, C)
        kv = torch.cat(
            [cond.reshape(b, self.n_tokens, self.token_dim), self.register.expand(b, 1, -1)],
            dim=1,
        )
        q = self.to_q(tokens)
        k = self.to_k(kv)
        v = self.to_v(kv)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        out = self.to_out(attn @ v)
        return h + out.transpose(1, 2).reshape(b, c, hh, ww)


class DomainSelfAttention(nn.Module):
    """Self-attention over spatial tokens of one or two domain streams.

    Each token is offset by a learned embedding of its domain tag; when a
    color and a normal stream are passed together, their tokens are
    concatenated and attend to each other in a single softmax.
    """

    def __init__(self, feat_dim: int, attn_dim: int):
        super().__init__()
        self.scale = attn_dim**-0.5
        self.to_q = nn.Linear(feat_dim, attn_dim)
        self.to_k = nn.Linear(feat_dim, attn_dim)
        self.to_v = nn.Linear(feat_dim, attn_dim)
        self.to_out = nn.Linear(attn_dim, feat_dim)
        self.domain_embed = nn.Embedding(2, feat_dim)

    def forward(self, streams: list[torch.Tensor], domain_ids: list[int]) -> list[torch.Tensor]:
        b, c, hh, ww = streams[0].shape
        toks = []
        for h, did in zip(streams, domain_ids):
            toks.append(h.flatten(2).transpose(1, 2) + self.domain_embed.weight[did])
        tokens = torch.cat(toks, dim=1)  # (B, S*HW, C)
        q, k, v = self.to_q(tokens), self.to_k(tokens), self.to_v(tokens)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        out = self.to_out(attn @ v)
        pieces = out.split(hh * ww, dim=1)
        return [h + p.transpose(1, 2).reshape(b, c, hh, ww) for h, p in zip(streams, pieces)]


class Backbone(nn.Module):
    """Two-scale convolutional encoder/decoder with timestep modulation.

    The encoded input is scaled by a learned per-channel, per-timestep
    gate before the positional and timestep embeddings are added: at
    high noise levels the model can fade the (noise-dominated) input out
    and paint from its conditions over the positional grid instead.
    """

    def __init__(self, channels: int, time_dim: int, resolution: int, in_channels: int = 3):
        super().__init__()
        self.conv_in = nn.Conv2d(in_channels, channels, 3, padding=1)
        self.down = nn.Conv2d(channels, channels, 3, stride=2, padding=1)
        self.time_proj = nn.Linear(time_dim, channels)
        self.time_gate = nn.Linear(time_dim, channels)
        half = resolution // 2
        self.pos_embed = nn.Parameter(torch.zeros(channels, half, half))
        self.up = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv_out = nn.Conv2d(channels, in_channels, 3, padding=1)

    def encode(self, x: torch.Tensor, time_feat: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.conv_in(x))
        h = F.silu(self.down(h))
        gate = torch.sigmoid(self.time_gate(time_feat))[None, :, None, None]
        return gate * h + self.pos_embed + self.time_proj(time_feat)[None, :, None, None]

    def decode(self, h: torch.Tensor) -> torch.Tensor:
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.silu(self.up(h))
        return self.conv_out(h)


class ToyDenoiser(nn.Module):
    """Desk-scale noise predictor instantiating all four parameter groups.

    ``domains`` declares which streams the model handles: ("color",) for
    the single-image personalizer, ("color", "normal") for the
    multi-view model, whose joint inputs stack both streams as 6
    channels. ``predict`` output always matches its input shape.
    """

    def __init__(
        self,
        resolution: int = 32,
        base_channels: int = 8,
        attn_dim: int = 8,
        text_dim: int = 16,
        image_dim: int = 64,
        time_dim: int = 8,
        domains: tuple[str, ...] = (DOMAIN_COLOR,),
        seed: int = 0,
        schedule=None,
        text_tokens: int = 2,
        image_tokens: int = 8,
        dtype=torch.float64,
    ):
        super().__init__()
        if resolution % 2 != 0 or resolution < 4:
            raise ShapeError(f"resolution must be even and >= 4, got {resolution}")
        for d in domains:
            if d not in _DOMAIN_IDS:
                raise ShapeError(f"unknown domain {d!r}")
        self.resolution = resolution
        self.base_channels = base_channels
        self.attn_dim = attn_dim
        self.text_dim = text_dim
        self.image_dim = image_dim
        self.time_dim = time_dim
        self.domains = tuple(domains)
        self.seed = seed
        self.text_tokens = text_tokens
        self.image_tokens = image_tokens

        self.backbone = Backbone(base_channels, time_dim, resolution)
        self.text_cross_attention = CrossAttentionBlock(base_channels, attn_dim, text_dim, text_tokens)
        self.image_cross_attention = CrossAttentionBlock(base_channels, attn_dim, image_dim, image_tokens)
        self.cross_domain_self_attention = DomainSelfAttention(base_channels, attn_dim)

        # With a schedule attached, the network's raw output is read as a
        # clean-image estimate and converted to a noise prediction via
        # eps = (x_t - alpha_t g) / sigma_t. At desk-scale capacity this
        # keeps the sampler's 1/alpha reconstruction from amplifying
        # noise-prediction error at high t. Without a schedule the raw
        # output is the noise prediction itself.
        self._schedule_desc = None
        if schedule is not None:
            self._schedule_desc = schedule.descriptor()
            self.register_buffer("_sched_alphas", schedule.alphas.clone())
            self.register_buffer("_sched_sigmas", schedule.sigmas.clone())
        else:
            self._sched_alphas = None
            self._sched_sigmas = None

        self.to(dtype)
        self._init_weights(seed, dtype)

    def _init_weights(self, seed: int, dtype) -> None:
        # Deterministic init independent of torch's global RNG state.
        gen = make_generator(seed, "model-init")
        with torch.no_grad():
            for name, p in self.named_parameters():
                if p.ndim >= 2:
                    fan_in = p.shape[1:].numel()
                    bound = 1.0 / math.sqrt(fan_in)
                    p.copy_(torch.empty_like(p).uniform_(-bound, bound, generator=gen))
                elif name.endswith("register"):
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=dtype) * 0.5)
                else:
                    p.zero_()

    # -- parameter-group machinery -------------------------------------------------

    def group_parameters(self, group: str) -> list[nn.Parameter]:
        if group not in GROUP_NAMES:
            raise GroupMismatchError(f"unknown parameter group {group!r}")
        module = getattr(self, group)
        return [p for _, p in sorted(module.named_parameters(), key=lambda kv: kv[0])]

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def metadata(self) -> dict:
        return {
            "arch": "toy-denoiser-v1",
            "resolution": self.resolution,
            "base_channels": self.base_channels,
            "attn_dim": self.attn_dim,
            "text_dim": self.text_dim,
            "image_dim": self.image_dim,
            "time_dim": self.time_dim,
            "domains": list(self.domains),
            "seed": self.seed,
            "text_tokens": self.text_tokens,
            "image_tokens": self.image_tokens,
            "schedule": self._schedule_desc,
            "group_sizes": {g: sum(p.numel() for p in self.group_parameters(g)) for g in GROUP_NAMES},
            "total_parameters": self.num_parameters(),
        }

    @classmethod
    def from_metadata(cls, meta: dict, dtype=torch.float64) -> "ToyDenoiser":
        if meta.get("arch") != "toy-denoiser-v1":
            raise GroupMismatchError(f"unknown architecture {meta.get('arch')!r}")
        schedule = None
        if meta.get("schedule") is not None:
            from .schedule import schedule_from_descriptor

            schedule = schedule_from_descriptor(meta["schedule"])
        return cls(
            resolution=int(meta["resolution"]),
            base_channels=int(meta["base_channels"]),
            attn_dim=int(meta["attn_dim"]),
            text_dim=int(meta["text_dim"]),
            image_dim=int(meta["image_dim"]),
            time_dim=int(meta["time_dim"]),
            domains=tuple(meta["domains"]),
            seed=int(meta["seed"]),
            schedule=schedule,
            text_tokens=int(meta.get("text_tokens", 1)),
            image_tokens=int(meta.get("image_tokens", 1)),
            dtype=dtype,
        )

    # -- prediction ------------------------------------------------------------------

    def _streams_for(self, domain: str) -> list[int]:
        if domain == DOMAIN_JOINT:
            if DOMAIN_NORMAL not in self.domains:
                raise ShapeError("model has no normal domain; joint input unsupported")
            return [_DOMAIN_IDS[DOMAIN_COLOR], _DOMAIN_IDS[DOMAIN_NORMAL]]
        if domain == DOMAIN_NORMAL and DOMAIN_NORMAL not in self.domains:
            raise ShapeError("model has no normal domain")
        return [_DOMAIN_IDS[domain]]

    def input_channels(self, domain: str) -> int:
        return 3 * len(self._streams_for(domain))

    def predict(self, x: torch.Tensor, cond: ConditionBundle, t: int) -> torch.Tensor:
        """Predicted noise, same shape as ``x``.

        ``x`` is (B, 3, H, W) for a single-domain condition or
        (B, 6, H, W) for the joint domain (color channels first).
        """
        domain_ids = self._streams_for(cond.domain)
        b, c, hh, ww = x.shape
        if c != 3 * len(domain_ids):
            raise ShapeError(f"{cond.domain} input needs {3 * len(domain_ids)} channels, got {c}")
        if hh != self.resolution or ww != self.resolution:
            raise ShapeError(f"expected {self.resolution}x{self.resolution} input, got {hh}x{ww}")
        if self._sched_alphas is not None and not 0 <= t < len(self._sched_alphas):
            raise ShapeError(f"timestep {t} outside the model's schedule table")

        dtype = x.dtype
        tfeat = timestep_features(t, self.time_dim, dtype=dtype)
        streams = [self.backbone.encode(s, tfeat) for s in x.split(3, dim=1)]

        if cond.text is not None:
            streams = [self.text_cross_attention(h, cond.text.to(dtype)) for h in streams]
        img = cond.image_embedding()
        if img is not None:
            streams = [self.image_cross_attention(h, img.to(dtype)) for h in streams]
        streams = self.cross_domain_self_attention(streams, domain_ids)

        out = torch.cat([self.backbone.decode(h) for h in streams], dim=1)
        if self._sched_alphas is None:
            return out
        a_t = self._sched_alphas[t]
        s_t = self._sched_sigmas[t].clamp_min(1e-6)
        return (x - a_t * out) / s_t

    forward = predict


# -- snapshots ------------------------------------------------------------------------


def snapshot_params(model) -> dict[str, torch.Tensor]:
    """Flat per-group parameter vectors, cloned and detached."""
    snap = {}
    for g in GROUP_NAMES:
        params = model.group_parameters(g)
        snap[g] = (
            torch.cat([p.detach().reshape(-1) for p in params])
            if params
            else torch.zeros(0, dtype=torch.float64)
        )
    return snap


def restore_params(model, snapshot: dict[str, torch.Tensor]) -> None:
    """Write a snapshot back into the model, bitwise."""
    if set(snapshot) != set(GROUP_NAMES):
        raise GroupMismatchError(
            f"snapshot groups {sorted(snapshot)} != expected {sorted(GROUP_NAMES)}"
        )
    for g in GROUP_NAMES:
        write_group_vector(model, g, snapshot[g])


def write_group_vector(model, group: str, vec: torch.Tensor) -> None:
    params = model.group_parameters(group)
    total = sum(p.numel() for p in params)
    if vec.numel() != total:
        raise GroupMismatchError(f"group {group!r} expects {total} values, got {vec.numel()}")
    offset = 0
    with torch.no_grad():
        for p in params:
            n = p.numel()
            p.copy_(vec[offset : offset + n].reshape(p.shape).to(p.dtype))
            offset += n
