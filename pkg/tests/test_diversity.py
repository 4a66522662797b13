import pytest
import torch

from helpers import finite_difference_check, rand_images
from makeupcloak.diversity import DiversityConfig, apply_diversity, gaussian_noise, random_resize
from makeupcloak.errors import ConfigError


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


def test_config_validation():
    with pytest.raises(ConfigError):
        DiversityConfig(p=1.5)
    with pytest.raises(ConfigError):
        DiversityConfig(scale_low=0.0)
    with pytest.raises(ConfigError):
        DiversityConfig(scale_low=0.9, scale_high=0.5)
    with pytest.raises(ConfigError):
        DiversityConfig(sigma=-0.1)


def test_resize_unit_scale_identity():
    x = rand_images(2, 16, seed=1)
    assert torch.equal(random_resize(x, 1.0, 1.0, gen()), x)


def test_resize_preserves_constants():
    x = torch.full((1, 3, 16, 16), 0.37)
    out = random_resize(x, 0.6, 0.9, gen(2))
    assert out.shape == x.shape
    assert (out - 0.37).abs().max() < 1e-6


def test_resize_shape_contract():
    x = rand_images(3, 17, seed=3)
    for s in range(10):
        assert random_resize(x, 0.5, 1.0, gen(s)).shape == x.shape


def test_noise_zero_sigma_identity():
    x = rand_images(2, 8, seed=4)
    assert torch.equal(gaussian_noise(x, 0.0, gen()), x)


def test_noise_sample_std():
    # sigma 0.1 over 10^4 pixels: sample std within the 99% chi-square band
    x = torch.zeros(1, 1, 100, 100)
    out = gaussian_noise(x, 0.1, gen(5))
    sample_std = float(out.std(unbiased=True))
    assert 0.097 <= sample_std <= 0.103


def test_noise_output_clamped():
    x = torch.ones(1, 3, 32, 32) * 0.999
    out = gaussian_noise(x, 0.5, gen(6))
    assert out.max() <= 1.0 and out.min() >= -1.0


def test_apply_p_zero_identity():
    cfg = DiversityConfig(p=0.0)
    x = rand_images(2, 8, seed=7)
    g = gen(7)
    for _ in range(20):
        assert torch.equal(apply_diversity(x, cfg, g), x)


def test_apply_p_one_degenerate_transforms_identity():
    cfg = DiversityConfig(p=1.0, scale_low=1.0, scale_high=1.0, sigma=0.0)
    x = rand_images(2, 8, seed=8)
    assert torch.equal(apply_diversity(x, cfg, gen(8)), x)


def test_apply_bernoulli_rate():
    # p=0.5 over 10^4 draws: applied 5000 +- 150 (binomial 99% bound)
    cfg = DiversityConfig(p=0.5, scale_low=0.5, scale_high=0.5, sigma=0.0)
    x = torch.zeros(1, 3, 9, 9)
    x[0, 0, 4, 4] = 1.0  # resize at scale 0.5 visibly changes this
    g = gen(9)
    applied = sum(1 for _ in range(10_000) if not torch.equal(apply_diversity(x, cfg, g), x))
    assert 4850 <= applied <= 5150, applied


def test_apply_deterministic_given_state():
    cfg = DiversityConfig(p=0.7, sigma=0.03)
    x = rand_images(2, 8, seed=10)
    a = [apply_diversity(x, cfg, gen(11)) for _ in range(1)]
    b = [apply_diversity(x, cfg, gen(11)) for _ in range(1)]
    assert torch.equal(a[0], b[0])


def test_gradients_flow_through_both_branches():
    x64 = rand_images(1, 8, seed=12, dtype=torch.float64)
    # identity branch
    cfg_id = DiversityConfig(p=0.0)
    finite_difference_check(lambda t: apply_diversity(t, cfg_id, gen(0)).sum(), x64)
    # transform branch: fix the rng per call so every FD evaluation sees the
    # same draw (sigma 0 keeps the comparison noiseless)
    cfg_tr = DiversityConfig(p=1.0, scale_low=0.7, scale_high=0.9, sigma=0.0)
    finite_difference_check(lambda t: apply_diversity(t, cfg_tr, gen(13)).sum(), x64)
