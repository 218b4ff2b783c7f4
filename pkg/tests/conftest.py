import pytest
import torch

from subject3d.models import ToyDenoiser
from subject3d.schedule import build_schedule


def tiny_model(domains=("color",), seed=3, resolution=8):
    """Smallest architecture exercising all four parameter groups (~800 params)."""
    return ToyDenoiser(
        resolution=resolution,
        base_channels=4,
        attn_dim=4,
        text_dim=4,
        image_dim=6,
        time_dim=4,
        domains=domains,
        seed=seed,
        text_tokens=2,
        image_tokens=3,
    )


def tiny_condition(seed=0, domain="color"):
    from subject3d.models import ConditionBundle

    gen = torch.Generator().manual_seed(seed)
    return ConditionBundle(
        text=torch.randn(4, generator=gen, dtype=torch.float64),
        image=torch.randn(6, generator=gen, dtype=torch.float64),
        domain=domain,
    )


@pytest.fixture(scope="session")
def sched10():
    return build_schedule(10)


@pytest.fixture(scope="session")
def corpus16(tmp_path_factory):
    """Session corpus: 16 subjects at 16x16 (tests stay fast at this size)."""
    from subject3d.corpus import generate_corpus

    root = tmp_path_factory.mktemp("corpus")
    return generate_corpus(root, n_subjects=16, resolution=16, seed=7)
