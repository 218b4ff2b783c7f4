import numpy as np
import pytest
import torch

from subject3d.errors import ShapeError
from subject3d.images import (
    ImageBatch,
    decode_normal_map,
    encode_normal_map,
    from_uint8,
    load_mask_png,
    load_normal_png,
    load_png,
    save_mask_png,
    save_normal_png,
    save_png,
    single,
    to_uint8,
)


def test_batch_validation():
    with pytest.raises(ShapeError):
        ImageBatch(torch.zeros(2, 4, 8, 8, dtype=torch.float64))
    with pytest.raises(ShapeError):
        ImageBatch(torch.zeros(2, 3, 8, 4, dtype=torch.float64))
    with pytest.raises(ShapeError):
        ImageBatch(torch.full((1, 3, 4, 4), float("nan")))
    with pytest.raises(ShapeError):
        ImageBatch(torch.zeros(2, 3, 4, 4, dtype=torch.float64), labels=["one"])


def test_single_wraps_item():
    img = torch.zeros(3, 4, 4, dtype=torch.float64)
    b = single(img, label="front")
    assert len(b) == 1 and b.labels == ["front"]


def test_affine_map_endpoints():
    img = torch.tensor([-1.0, 0.0, 1.0], dtype=torch.float64).reshape(3, 1, 1).expand(3, 2, 2)
    u8 = to_uint8(img)
    assert u8[0, 0, 0] == 0 and u8[0, 0, 1] == 128 and u8[0, 0, 2] == 255


def test_uint8_round_trip_is_lossless_on_grid():
    # every uint8 level maps back to a value that re-quantizes to itself
    u8 = np.arange(256, dtype=np.uint8).reshape(1, 16, 16).repeat(3, axis=0).transpose(1, 2, 0)
    img = from_uint8(u8)
    assert np.array_equal(to_uint8(img), u8)


def test_png_round_trip(tmp_path):
    gen = torch.Generator().manual_seed(3)
    img = torch.rand(3, 8, 8, generator=gen, dtype=torch.float64) * 2 - 1
    save_png(img, tmp_path / "x.png")
    back = load_png(tmp_path / "x.png")
    assert (back - img).abs().max() <= (1.0 / 255.0)


def test_png_bytes_deterministic(tmp_path):
    img = torch.linspace(-1, 1, 3 * 16 * 16, dtype=torch.float64).reshape(3, 16, 16)
    save_png(img, tmp_path / "a.png")
    save_png(img, tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_normal_map_round_trip(tmp_path):
    gen = torch.Generator().manual_seed(5)
    n = torch.randn(3, 8, 8, generator=gen, dtype=torch.float64)
    n = n / n.pow(2).sum(0, keepdim=True).sqrt()
    save_normal_png(n, tmp_path / "n.png")
    back = load_normal_png(tmp_path / "n.png")
    norms = back.pow(2).sum(0).sqrt()
    assert (norms - 1).abs().max() < 1e-9  # renormalized on load
    cos = (back * n).sum(0).clamp(-1, 1)
    assert torch.rad2deg(torch.acos(cos)).max() < 1.0  # quantization only


def test_normal_encoding_validates_shape():
    with pytest.raises(ShapeError):
        encode_normal_map(torch.zeros(2, 4, 4, dtype=torch.float64))
    decoded = decode_normal_map(torch.tensor([0.0, 0.0, -1.0]).reshape(3, 1, 1).double())
    assert torch.allclose(decoded, torch.tensor([0.0, 0.0, -1.0]).reshape(3, 1, 1).double())


def test_mask_round_trip(tmp_path):
    mask = torch.zeros(8, 8, dtype=torch.bool)
    mask[2:5, 3:7] = True
    save_mask_png(mask, tmp_path / "m.png")
    assert torch.equal(load_mask_png(tmp_path / "m.png"), mask)
