import pytest
import torch

from subject3d.errors import ScheduleError, ShapeError
from subject3d.schedule import (
    SCHEDULE_KINDS,
    VP_COSINE,
    VP_LINEAR,
    build_schedule,
    forward_noise,
    schedule_from_descriptor,
)

# Frozen from an independent evaluation of the closed-form linear-VP
# definition at T=10 (notes kept with the schedule derivation script).
ORACLE_T10_ALPHAS = [
    1.0,
    0.946721798820598,
    0.8113952356434114,
    0.6295500003364488,
    0.44219690927989863,
    0.2811828807967524,
    0.16186380616882481,
    0.08435257018282653,
    0.039795557242315927,
    0.016996463261689278,
    0.006571586494929619,
]
ORACLE_T10_SIGMAS = [
    0.0,
    0.3220525355247045,
    0.5844978798722651,
    0.7769599713475447,
    0.8969179970450505,
    0.9596542020680363,
    0.986813107053479,
    0.9964359707997054,
    0.9992078430555745,
    0.9998555496853503,
    0.9999784068923386,
]


def test_identity_at_t0():
    s = build_schedule(1000, VP_LINEAR)
    assert s.alpha(0) == 1.0
    assert s.sigma(0) == 0.0


def test_cosine_vp_constraint():
    s = build_schedule(50, VP_COSINE)
    assert torch.allclose(s.alphas**2 + s.sigmas**2, torch.ones(51, dtype=torch.float64), atol=1e-9)


def test_linear_t10_table_matches_oracle():
    s = build_schedule(10, VP_LINEAR)
    for t in range(11):
        assert s.alpha(t) == pytest.approx(ORACLE_T10_ALPHAS[t], abs=1e-12)
        assert s.sigma(t) == pytest.approx(ORACLE_T10_SIGMAS[t], abs=1e-12)


@pytest.mark.parametrize("kind", SCHEDULE_KINDS)
@pytest.mark.parametrize("T", list(range(1, 65)))
def test_invariant_sweep(T, kind):
    s = build_schedule(T, kind)
    assert s.alphas.shape == (T + 1,)
    assert s.alpha(0) == 1.0 and s.sigma(0) == 0.0
    assert (s.alphas[1:] <= s.alphas[:-1] + 1e-15).all(), "alphas must be nonincreasing"
    assert (s.sigmas[1:] >= s.sigmas[:-1] - 1e-15).all(), "sigmas must be nondecreasing"
    assert (s.alphas > 0).all() and (s.sigmas >= 0).all()
    assert ((s.alphas**2 + s.sigmas**2) - 1.0).abs().max() < 1e-9
    assert (s.alphas <= 1.0).all()


def test_rejects_bad_construction():
    with pytest.raises(ScheduleError):
        build_schedule(0)
    with pytest.raises(ScheduleError):
        build_schedule(10, "variance-exploding")


def test_descriptor_round_trip():
    s = build_schedule(17, VP_COSINE)
    s2 = schedule_from_descriptor(s.descriptor())
    assert torch.equal(s.alphas, s2.alphas) and torch.equal(s.sigmas, s2.sigmas)


def test_forward_noise_identity_at_t0(sched10):
    x0 = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    eps = torch.randn_like(x0)
    assert torch.equal(forward_noise(x0, eps, 0, sched10), x0)


def test_forward_noise_zero_signal(sched10):
    eps = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    out = forward_noise(torch.zeros_like(eps), eps, 4, sched10)
    assert torch.allclose(out, sched10.sigma(4) * eps)


def test_forward_noise_endpoint_from_table(sched10):
    ones = torch.ones(1, 3, 4, 4, dtype=torch.float64)
    out = forward_noise(ones, ones, 10, sched10)
    expected = ORACLE_T10_ALPHAS[10] + ORACLE_T10_SIGMAS[10]
    assert torch.allclose(out, torch.full_like(ones, expected), atol=1e-12)


def test_forward_noise_linear_in_both_arguments(sched10):
    gen = torch.Generator().manual_seed(5)
    x1, x2 = (torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64) for _ in range(2))
    e1, e2 = (torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64) for _ in range(2))
    a, b = 0.37, -1.9
    for t in (1, 5, 10):
        lhs = forward_noise(a * x1 + b * x2, a * e1 + b * e2, t, sched10)
        rhs = a * forward_noise(x1, e1, t, sched10) + b * forward_noise(x2, e2, t, sched10)
        assert (lhs - rhs).abs().max() < 1e-6


def test_forward_noise_errors(sched10):
    x = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
    with pytest.raises(ShapeError):
        forward_noise(x, torch.zeros(1, 3, 4, 5, dtype=torch.float64), 1, sched10)
    with pytest.raises(ScheduleError):
        forward_noise(x, x, 11, sched10)
    with pytest.raises(ScheduleError):
        forward_noise(x, x, -1, sched10)
