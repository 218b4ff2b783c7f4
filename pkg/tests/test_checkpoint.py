import pytest
import torch

from subject3d.checkpoint import (
    apply_delta,
    checkpoint_hash,
    load_checkpoint,
    model_hash,
    save_checkpoint,
    save_delta,
)
from subject3d.errors import IntegrityError
from subject3d.models import GROUP_NAMES, snapshot_params
from subject3d.schedule import build_schedule

from conftest import tiny_model


def test_full_checkpoint_round_trip(tmp_path):
    m = tiny_model(domains=("color", "normal"), seed=11)
    sched = build_schedule(10)
    path = tmp_path / "model.npz"
    h = save_checkpoint(path, m, sched.descriptor())
    assert checkpoint_hash(path) == h == model_hash(m)
    m2, meta = load_checkpoint(path)
    for g in GROUP_NAMES:
        assert torch.equal(snapshot_params(m)[g], snapshot_params(m2)[g])
    assert meta["schedule"] == sched.descriptor()
    assert meta["model"]["total_parameters"] == m.num_parameters()


def test_load_missing_checkpoint(tmp_path):
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "nope.npz")


def test_delta_round_trip(tmp_path):
    base = tiny_model(seed=1)
    base_hash = model_hash(base)
    tuned = tiny_model(seed=1)
    with torch.no_grad():
        tuned.group_parameters("image_cross_attention")[0].add_(0.5)
    delta_path = tmp_path / "delta.npz"
    save_delta(delta_path, tuned, "image_cross_attention", base_hash, config={"lr": 1e-4}, seed=7)

    fresh = tiny_model(seed=1)
    meta = apply_delta(delta_path, fresh)
    assert meta["group"] == "image_cross_attention"
    assert meta["config"] == {"lr": 1e-4} and meta["seed"] == 7
    assert model_hash(fresh) == model_hash(tuned)


def test_delta_rejects_wrong_base(tmp_path):
    base = tiny_model(seed=1)
    tuned = tiny_model(seed=1)
    with torch.no_grad():
        tuned.group_parameters("image_cross_attention")[0].add_(0.5)
    delta_path = tmp_path / "delta.npz"
    save_delta(delta_path, tuned, "image_cross_attention", model_hash(base), config={}, seed=0)
    other = tiny_model(seed=2)
    with pytest.raises(IntegrityError):
        apply_delta(delta_path, other)


def test_delta_tamper_detected(tmp_path):
    import json

    import numpy as np

    base = tiny_model(seed=1)
    delta_path = tmp_path / "delta.npz"
    save_delta(delta_path, base, "image_cross_attention", model_hash(base), config={}, seed=0)
    with np.load(delta_path) as data:
        meta = json.loads(bytes(data["__meta__"].tobytes()).decode())
        params = data["params"].copy()
    params[0] += 1.0  # tamper without updating the recorded hash
    np.savez_compressed(
        delta_path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), params=params
    )
    with pytest.raises(IntegrityError):
        apply_delta(delta_path, tiny_model(seed=1))
