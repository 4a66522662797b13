import numpy as np
import pytest
import torch

from helpers import finite_difference_check, rand_images
from makeupcloak import networks


def small_nets():
    torch.manual_seed(3)
    gen = networks.MakeupGenerator(channels=8)
    disc = networks.PatchDiscriminator(channels=8)
    pur = networks.Purifier(channels=8, rrdb_blocks=2, growth=6)
    emb = networks.FaceEmbedder(model_seed=5, embed_dim=16)
    return gen, disc, pur, emb


def test_generator_shape_and_range():
    gen, _, _, _ = small_nets()
    x, y = rand_images(2, 16, seed=1), rand_images(2, 16, seed=2)
    out = gen(x, y).detach()
    assert out.shape == x.shape
    assert out.min() > -1.0 and out.max() < 1.0


def test_generator_shape_mismatch_error():
    gen, _, _, _ = small_nets()
    with pytest.raises(ValueError, match="shape mismatch"):
        gen(rand_images(1, 16), rand_images(1, 8))


def test_discriminator_open_interval_and_determinism():
    _, disc, _, _ = small_nets()
    disc.eval()
    x = rand_images(4, 16, seed=3)
    out = disc(x).detach()
    assert out.min() > 0.0 and out.max() < 1.0
    assert torch.equal(out, disc(x).detach())


def test_discriminator_never_saturates():
    # extreme logits stay strictly inside (0, 1) thanks to the sigmoid margin
    big = torch.full((1, 100), 1e9)
    out = networks.bounded_sigmoid(big)
    assert out.max() < 1.0
    assert networks.bounded_sigmoid(-big).min() > 0.0


def test_purifier_zero_init_is_identity():
    _, _, pur, _ = small_nets()
    x = rand_images(2, 16, seed=4)
    out = pur(x).detach()
    assert (out - x).abs().max() < 1e-4
    assert out.shape == x.shape


def test_embedder_unit_norm_and_self_cosine():
    _, _, _, emb = small_nets()
    emb.eval()
    x = rand_images(100, 16, seed=5)
    with torch.no_grad():
        e = emb(x)
    norms = e.norm(dim=1)
    assert (norms - 1.0).abs().max() < 1e-5
    assert abs(float((e[0] * e[0]).sum()) - 1.0) < 1e-6


def test_embedder_seeds_draw_different_architectures():
    counts = {s: sum(p.numel() for p in networks.FaceEmbedder(model_seed=s).parameters()) for s in (1, 2)}
    assert counts[1] != counts[2]


def test_forward_outputs_finite_many_inputs():
    gen, _, pur, _ = small_nets()
    gen.eval(), pur.eval()
    for seed in range(50):
        x, y = rand_images(2, 16, seed=seed), rand_images(2, 16, seed=1000 + seed)
        with torch.no_grad():
            assert torch.isfinite(gen(x, y)).all()
            assert torch.isfinite(pur(x)).all()


def test_generator_gradient_check():
    gen, _, _, _ = small_nets()
    gen.double().eval()
    y = rand_images(1, 8, seed=7, dtype=torch.float64)
    finite_difference_check(lambda x: gen(x, y).sum(), rand_images(1, 8, seed=8, dtype=torch.float64))
    # gradients also flow into the reference input
    x = rand_images(1, 8, seed=9, dtype=torch.float64)
    finite_difference_check(lambda r: gen(x, r).sum(), rand_images(1, 8, seed=10, dtype=torch.float64))


def test_discriminator_gradient_check():
    _, disc, _, _ = small_nets()
    disc.double().eval()
    finite_difference_check(lambda x: disc(x).sum(), rand_images(1, 8, seed=11, dtype=torch.float64))


def test_purifier_gradient_check():
    _, _, pur, _ = small_nets()
    pur.double().eval()
    finite_difference_check(lambda x: pur(x).sum(), rand_images(1, 8, seed=12, dtype=torch.float64))


def test_embedder_cosine_gradient_check():
    _, _, _, emb = small_nets()
    emb.double().eval()
    z = rand_images(1, 8, seed=13, dtype=torch.float64)
    with torch.no_grad():
        target = emb(z)[0]
    finite_difference_check(
        lambda x: (emb(x) * target).sum(), rand_images(1, 8, seed=14, dtype=torch.float64)
    )


def test_parameter_gradients_flow():
    gen, _, _, _ = small_nets()
    out = gen(rand_images(1, 16, seed=15), rand_images(1, 16, seed=16)).sum()
    out.backward()
    grads = [p.grad for p in gen.parameters() if p.grad is not None]
    assert grads and any(g.abs().sum() > 0 for g in grads)


def test_train_face_embedder_verification(trained_embedder):
    # measured on held-out pairs at the model's own EER threshold:
    # >=90% of same-identity pairs accepted and >=90% of different-identity
    # pairs rejected
    m = trained_embedder
    assert m.verification_accuracy >= 0.90
    assert m.eer_frr <= 0.10  # same-identity pairs above tau
    assert m.eer_far <= 0.10  # different-identity pairs below tau


def test_train_face_embedder_needs_identities(face_bank):
    few = [f for f in face_bank if f.image.identity_id < 4]
    with pytest.raises(ValueError, match="identities"):
        networks.train_face_embedder(few, model_seed=0)


def test_train_face_embedder_budget_error(face_bank):
    with pytest.raises(RuntimeError, match="failed to reach"):
        networks.train_face_embedder(face_bank, model_seed=0, epochs=1, min_epochs=1, min_accuracy=1.01)
