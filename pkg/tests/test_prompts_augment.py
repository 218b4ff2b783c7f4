import pytest
import torch

from subject3d.augment import augment
from subject3d.errors import ConfigError
from subject3d.prompts import DIRECTIONS, build_view_prompts, parse_view_prompt

# -- view prompts ---------------------------------------------------------------------


def test_template_example():
    prompts = build_view_prompts("xxy5syt00", "dog")
    assert prompts[0].rendered_text == "a xxy5syt00 dog, front"


def test_canonical_order_and_uniqueness():
    prompts = build_view_prompts("tok", "cat")
    assert tuple(p.direction for p in prompts) == DIRECTIONS
    assert DIRECTIONS == ("front", "front-right", "right", "back", "left", "front-left")
    assert len({p.rendered_text for p in prompts}) == 6


def test_round_trip_parse():
    for p in build_view_prompts("qj4xp8t2", "garden gnome"):
        back = parse_view_prompt(p.rendered_text)
        assert (back.identifier, back.class_noun, back.direction) == (
            "qj4xp8t2",
            "garden gnome",
            p.direction,
        )


def test_rejects_empty_fields():
    with pytest.raises(ConfigError):
        build_view_prompts("", "dog")
    with pytest.raises(ConfigError):
        build_view_prompts("tok", "  ")


def test_parse_rejects_malformed():
    for bad in ("xxy dog, front", "a xxy dog front", "a xxy dog, skyward", "a , front"):
        with pytest.raises(ConfigError):
            parse_view_prompt(bad)


# -- augmentation ---------------------------------------------------------------------


def _image(seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(3, 16, 16, generator=gen, dtype=torch.float64) * 2 - 1


def test_augment_deterministic_per_seed():
    img = _image()
    assert torch.equal(augment(img, 5), augment(img, 5))
    assert not torch.equal(augment(img, 5), augment(img, 6))


def test_augment_stays_in_range():
    img = _image(1)
    for seed in range(20):
        out = augment(img, seed)
        assert out.min() >= -1.0 and out.max() <= 1.0
        assert out.shape == img.shape


def test_augment_identity_configuration():
    img = _image(2)
    out = augment(img, 3, brightness=0.0, contrast=0.0, min_crop_area=1.0)
    assert torch.equal(out, img)


def test_augment_never_flips():
    # a strongly lateral gradient keeps its orientation under augmentation
    img = torch.linspace(-1, 1, 16, dtype=torch.float64).repeat(3, 16, 1)
    for seed in range(10):
        out = augment(img, seed)
        left, right = out[:, :, :4].mean(), out[:, :, -4:].mean()
        assert left < right
