import pytest
import torch

from subject3d.errors import GroupMismatchError, ShapeError
from subject3d.models import (
    GROUP_NAMES,
    ConditionBundle,
    ToyDenoiser,
    null_condition,
    snapshot_params,
    restore_params,
)

from conftest import tiny_condition, tiny_model


def test_every_parameter_in_exactly_one_group():
    m = tiny_model()
    total = sum(len(m.group_parameters(g)) for g in GROUP_NAMES)
    assert total == len(list(m.parameters()))
    sizes = m.metadata()["group_sizes"]
    assert sum(sizes.values()) == m.num_parameters()


def test_predict_preserves_shape():
    m = tiny_model(domains=("color", "normal"))
    c = tiny_condition()
    x = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    assert m.predict(x, c, 3).shape == x.shape
    xj = torch.randn(2, 6, 8, 8, dtype=torch.float64)
    cj = tiny_condition(domain="joint")
    assert m.predict(xj, cj, 3).shape == xj.shape


def test_predict_batch_items_independent():
    m = tiny_model()
    c = tiny_condition()
    x = torch.randn(3, 3, 8, 8, dtype=torch.float64)
    full = m.predict(x, c, 2)
    for i in range(3):
        solo = m.predict(x[i : i + 1], c, 2)
        assert torch.allclose(full[i], solo[0], atol=1e-12)


def test_predict_rejects_bad_inputs():
    m = tiny_model()  # color only
    with pytest.raises(ShapeError):
        m.predict(torch.randn(1, 6, 8, 8, dtype=torch.float64), tiny_condition(domain="joint"), 1)
    with pytest.raises(ShapeError):
        m.predict(torch.randn(1, 3, 16, 16, dtype=torch.float64), tiny_condition(), 1)
    with pytest.raises(ShapeError):
        m.predict(torch.randn(1, 3, 8, 8, dtype=torch.float64), tiny_condition(domain="normal"), 1)


def test_null_condition_drops_both_branches():
    m = tiny_model()
    x = torch.randn(1, 3, 8, 8, dtype=torch.float64)
    cond = tiny_condition()
    assert not torch.allclose(m.predict(x, cond, 1), m.predict(x, null_condition(), 1))
    assert cond.as_unconditional().is_unconditional


def test_snapshot_restore_round_trip():
    m = tiny_model()
    snap = snapshot_params(m)
    with torch.no_grad():
        for p in m.parameters():
            p.add_(0.25)
    restore_params(m, snap)
    for g in GROUP_NAMES:
        assert torch.equal(snapshot_params(m)[g], snap[g])


def test_snapshot_total_count_matches_metadata():
    m = tiny_model()
    snap = snapshot_params(m)
    assert sum(v.numel() for v in snap.values()) == m.metadata()["total_parameters"]


def test_snapshot_isolates_perturbed_group():
    m = tiny_model()
    before = snapshot_params(m)
    with torch.no_grad():
        m.group_parameters("image_cross_attention")[0].add_(1.0)
    after = snapshot_params(m)
    for g in GROUP_NAMES:
        same = torch.equal(before[g], after[g])
        assert same == (g != "image_cross_attention")


def test_restore_rejects_group_mismatch():
    m = tiny_model()
    snap = snapshot_params(m)
    bad = {k: v for k, v in snap.items() if k != "backbone"}
    with pytest.raises(GroupMismatchError):
        restore_params(m, bad)
    snap["backbone"] = snap["backbone"][:-1]
    with pytest.raises(GroupMismatchError):
        restore_params(m, snap)


def test_metadata_round_trip_rebuilds_architecture():
    m = tiny_model(domains=("color", "normal"), seed=9)
    m2 = ToyDenoiser.from_metadata(m.metadata())
    assert m2.metadata() == m.metadata()
    # same seed -> identical init
    for g in GROUP_NAMES:
        assert torch.equal(snapshot_params(m)[g], snapshot_params(m2)[g])


def test_seeded_init_is_deterministic():
    a, b = tiny_model(seed=5), tiny_model(seed=5)
    c = tiny_model(seed=6)
    assert torch.equal(snapshot_params(a)["backbone"], snapshot_params(b)["backbone"])
    assert not torch.equal(snapshot_params(a)["backbone"], snapshot_params(c)["backbone"])


def test_condition_bundle_validation():
    with pytest.raises(ShapeError):
        ConditionBundle(domain="depth")
