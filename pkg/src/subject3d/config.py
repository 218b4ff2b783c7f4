"""Run configuration: a strict, human-readable YAML schema.

A config document mirrors the stage hyperparameters, sampler settings,
and subject description. Unknown keys anywhere are errors. The
``profile`` selects desk-scale or paper-scale defaults; explicit keys
always win over profile defaults. The config hash (SHA-256 of the
canonical merged document) keys resume integrity checks.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .multiview import MVTrainConfig
from .personalizer import PersonalizerTrainConfig

PROFILES = ("toy", "paper")
IDENTITY_PROMPT_MODES = ("view_only", "view_plus_text")

# Profile defaults. "paper" keeps the reference recipe's sizes and rates;
# "toy" is the desk-scale profile every shipped config and test uses.
_DEFAULTS = {
    "toy": {
        "sampler": {
            "train_steps": 200,
            "kind": "variance-preserving-linear",
            "steps": 12,
            "guidance": 1.0,
        },
        "personalizer_opt": {
            "learning_rate": 3e-3,
            "weight_decay": 0.01,
            "iterations": 30,
            "adam_beta1": 0.9,
            "adam_beta2": 0.999,
            "adam_eps": 1e-8,
            "image_size": 32,
        },
        "multiview_opt": {
            "learning_rate": 2e-3,
            "weight_decay": 0.01,
            "iterations": 100,
            "lam": 1.0,
            "adam_beta1": 0.9,
            "adam_beta2": 0.999,
            "adam_eps": 1e-8,
            "image_size": 32,
        },
        "recon": {
            "gaussians": 192,
            "iterations": 250,
            "field_resolution": 32,
            "iso_fraction": 0.5,
        },
    },
    "paper": {
        "sampler": {
            "train_steps": 1000,
            "kind": "variance-preserving-linear",
            "steps": 50,
            "guidance": 3.0,
        },
        "personalizer_opt": {
            "learning_rate": 1e-4,
            "weight_decay": 0.01,
            "iterations": 30,
            "adam_beta1": 0.9,
            "adam_beta2": 0.999,
            "adam_eps": 1e-8,
            "image_size": 256,
        },
        "multiview_opt": {
            "learning_rate": 5e-5,
            "weight_decay": 0.01,
            "iterations": 100,
            "lam": 1.0,
            "adam_beta1": 0.9,
            "adam_beta2": 0.999,
            "adam_eps": 1e-8,
            "image_size": 256,
        },
        "recon": {
            "gaussians": 512,
            "iterations": 600,
            "field_resolution": 64,
            "iso_fraction": 0.5,
        },
    },
}

_SCHEMA = {
    "profile": str,
    "seed": int,
    "workspace": str,
    "corpus": str,
    "subject": {"source": str, "id": str, "image": str, "text": str, "identifier": str, "class_noun": str},
    "models": {"personalizer": str, "multiview": str},
    "encoder": {"dim": int, "grid": int, "input_resolution": int, "seed": int},
    "text_encoder": {"dim": int, "seed": int},
    "sampler": {"train_steps": int, "kind": str, "steps": int, "guidance": float},
    "personalizer_opt": {
        "learning_rate": float,
        "weight_decay": float,
        "iterations": int,
        "adam_beta1": float,
        "adam_beta2": float,
        "adam_eps": float,
        "image_size": int,
    },
    "multiview_opt": {
        "learning_rate": float,
        "weight_decay": float,
        "iterations": int,
        "lam": float,
        "adam_beta1": float,
        "adam_beta2": float,
        "adam_eps": float,
        "image_size": int,
    },
    "identity_prompt_mode": str,
    "cascade": {"view1_via_multiview": bool},
    "recon": {"gaussians": int, "iterations": int, "field_resolution": int, "iso_fraction": float},
}


def _check_keys(doc: dict, schema: dict, path: str = "") -> None:
    for key, val in doc.items():
        where = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown config key {where!r}")
        expected = schema[key]
        if isinstance(expected, dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            _check_keys(val, expected, where)


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    """Parsed, profile-merged run configuration."""

    raw: dict = field(repr=False)

    def __init__(self, raw: dict):
        self.raw = raw

    # -- accessors ---------------------------------------------------------------

    @property
    def profile(self) -> str:
        return self.raw["profile"]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def workspace(self) -> str | None:
        return self.raw.get("workspace")

    @property
    def corpus_path(self) -> str:
        if "corpus" not in self.raw:
            raise ConfigError("config needs a 'corpus' path")
        return self.raw["corpus"]

    @property
    def subject(self) -> dict:
        return self.raw.get("subject", {})

    @property
    def model_paths(self) -> dict:
        return self.raw.get("models", {})

    @property
    def encoder_kwargs(self) -> dict:
        return dict(self.raw.get("encoder", {}))

    @property
    def text_encoder_kwargs(self) -> dict:
        return dict(self.raw.get("text_encoder", {}))

    @property
    def sampler(self) -> dict:
        return self.raw["sampler"]

    @property
    def identity_prompt_mode(self) -> str:
        return self.raw.get("identity_prompt_mode", "view_only")

    @property
    def view1_via_multiview(self) -> bool:
        return bool(self.raw.get("cascade", {}).get("view1_via_multiview", False))

    @property
    def recon(self) -> dict:
        return self.raw["recon"]

    def personalizer_config(self) -> PersonalizerTrainConfig:
        return PersonalizerTrainConfig(**self.raw["personalizer_opt"])

    def multiview_config(self) -> MVTrainConfig:
        return MVTrainConfig(**self.raw["multiview_opt"])

    def config_hash(self) -> str:
        canon = dict(self.raw)
        canon.pop("workspace", None)  # moving a workspace does not change the run
        return hashlib.sha256(json.dumps(canon, sort_keys=True).encode()).hexdigest()


def normalize_config(doc: dict) -> RunConfig:
    """Validate a raw mapping, merge profile defaults, coerce numbers."""
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping")
    _check_keys(doc, _SCHEMA)
    profile = doc.get("profile", "toy")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    merged = _deep_merge(_DEFAULTS[profile], doc)
    merged["profile"] = profile
    merged.setdefault("seed", 0)
    mode = merged.setdefault("identity_prompt_mode", "view_only")
    if mode not in IDENTITY_PROMPT_MODES:
        raise ConfigError(f"unknown identity_prompt_mode {mode!r}")
    for section in ("sampler", "personalizer_opt", "multiview_opt", "recon"):
        for key, kind in _SCHEMA[section].items():
            if key in merged[section] and kind is float:
                merged[section][key] = float(merged[section][key])
    return RunConfig(merged)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        doc = yaml.safe_load(f) or {}
    return normalize_config(doc)


def dump_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(cfg.raw, f, sort_keys=True)
