import pytest
import torch

from subject3d.cameras import Camera
from subject3d.corpus import (
    Corpus,
    make_subject,
    render_subject_view,
    sphere_subject,
)
from subject3d.encoders import HashTextEncoder, ImageFeatureEncoder, encode_image, text_condition
from subject3d.errors import ShapeError
from subject3d.normals import NormalEstimator, estimate_normals
from subject3d.prompts import DIRECTIONS

# -- image encoder ---------------------------------------------------------------------


def test_encoder_deterministic():
    enc = ImageFeatureEncoder(input_resolution=16)
    img = torch.linspace(-1, 1, 3 * 16 * 16, dtype=torch.float64).reshape(3, 16, 16)
    a, b = enc.encode(img), enc.encode(img)
    assert torch.equal(a.embedding, b.embedding)
    assert a.encoder_id == enc.encoder_id


def test_encoder_unit_norm():
    enc = ImageFeatureEncoder(input_resolution=16)
    gen = torch.Generator().manual_seed(0)
    for _ in range(10):
        img = torch.rand(3, 16, 16, generator=gen, dtype=torch.float64) * 2 - 1
        assert abs(enc.encode(img).embedding.norm().item() - 1.0) < 1e-6


def test_encoder_resamples_other_resolutions():
    enc = ImageFeatureEncoder(input_resolution=16)
    img = torch.zeros(3, 64, 64, dtype=torch.float64)
    assert enc.encode(img).embedding.shape == (64,)


def test_encoder_rejects_non_finite():
    enc = ImageFeatureEncoder()
    bad = torch.full((3, 8, 8), float("inf"))
    with pytest.raises(ShapeError):
        enc.encode(bad)


def test_corpus_subject_separation(corpus16):
    """Intra-subject similarity must exceed inter-subject similarity,
    checked exhaustively over all corpus view pairs."""
    enc = ImageFeatureEncoder(input_resolution=corpus16.resolution)
    embeds = {}
    for info in corpus16.subjects:
        batch = corpus16.views(info.subject_id)
        embeds[info.subject_id] = torch.stack(
            [encode_image(enc, batch.colors[i]).embedding for i in range(6)]
        )
    intra_sim, inter_sim, intra_d, inter_d = [], [], [], []
    ids = list(embeds)
    for i, a in enumerate(ids):
        sims = embeds[a] @ embeds[a].T
        n = sims.shape[0]
        intra_sim.append(((sims.sum() - n) / (n * (n - 1))).item())
        intra_d.append((torch.cdist(embeds[a], embeds[a]).sum() / (n * (n - 1))).item())
        for b in ids[i + 1 :]:
            inter_sim.append((embeds[a] @ embeds[b].T).mean().item())
            inter_d.append(torch.cdist(embeds[a], embeds[b]).mean().item())
    assert sum(intra_sim) / len(intra_sim) > sum(inter_sim) / len(inter_sim)
    # distances carry the margin (cosines are compressed by the shared background)
    assert sum(inter_d) / len(inter_d) > 1.5 * (sum(intra_d) / len(intra_d))


# -- text encoder ----------------------------------------------------------------------


def test_text_encoder_deterministic_and_unit():
    enc = HashTextEncoder()
    a = enc.encode("a qj4xp8t2 gadget, front")
    b = enc.encode("a qj4xp8t2 gadget, front")
    assert torch.equal(a, b)
    assert abs(a.norm().item() - 1.0) < 1e-9
    assert not torch.equal(a, enc.encode("a qj4xp8t2 gadget, back"))


def test_text_condition_blank_is_null():
    enc = HashTextEncoder()
    assert text_condition(enc, "") is None
    assert text_condition(enc, "   ") is None
    assert text_condition(enc, "red hat") is not None


# -- corpus renderer --------------------------------------------------------------------


def test_render_sphere_normals_match_analytic():
    cam = Camera(0, 0, 2.5, 50, 32)
    view = render_subject_view(sphere_subject(radius=0.8), cam)
    mask = view["mask"]
    assert 0.05 < mask.float().mean().item() < 0.6
    norms = view["normal"].pow(2).sum(0).sqrt()
    assert (norms - 1).abs().max() < 1e-6
    # center pixel of a front view looks straight back at the camera
    center = view["normal"][:, 16, 16]
    assert center[2] > 0.99


def test_make_subject_deterministic():
    a, b = make_subject(3, 7), make_subject(3, 7)
    assert a.identifier == b.identifier
    assert [p.center for p in a.primitives] == [p.center for p in b.primitives]
    c = make_subject(3, 8)
    assert a.identifier != c.identifier


def test_corpus_round_trip(corpus16, tmp_path):
    assert len(corpus16.subjects) == 16
    batch = corpus16.views("subj_000")
    assert batch.directions == DIRECTIONS
    assert batch.colors.shape == (6, 3, 16, 16)
    assert batch.normals is not None and batch.masks is not None
    reloaded = Corpus.load(corpus16.root)
    assert [s.subject_id for s in reloaded.subjects] == [s.subject_id for s in corpus16.subjects]


def test_corpus_prompts_unique(corpus16):
    prompts = [s.prompt for s in corpus16.subjects]
    assert len(set(prompts)) == len(prompts)


# -- normal estimation --------------------------------------------------------------------


def test_estimated_sphere_normals_within_budget():
    cam = Camera(0, 0, 2.5, 50, 32)
    view = render_subject_view(sphere_subject(radius=0.8), cam)
    est = NormalEstimator()
    n_hat = estimate_normals(est, view["color"])
    norms = n_hat.pow(2).sum(0).sqrt()
    assert (norms - 1).abs().max() < 1e-9
    mask = view["mask"] & est.foreground_mask(view["color"])
    cos = (n_hat * view["normal"]).sum(0).clamp(-1, 1)
    median_err = torch.rad2deg(torch.acos(cos))[mask].median()
    assert median_err < 15.0


def test_estimator_blank_image_is_back_facing():
    est = NormalEstimator()
    out = estimate_normals(est, torch.ones(3, 16, 16, dtype=torch.float64))
    expected = torch.tensor([0.0, 0.0, -1.0]).reshape(3, 1, 1).expand(3, 16, 16).double()
    assert torch.equal(out, expected)
