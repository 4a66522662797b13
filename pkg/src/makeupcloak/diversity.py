"""Stochastic input-diversity transform applied before surrogate embedding.

With probability ``p`` the image batch is resized by a random factor (and back)
and perturbed with Gaussian noise; otherwise it passes through unchanged. Both
branches stay differentiable so attack gradients flow to the input.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError


@dataclass
class DiversityConfig:
    p: float = 0.5
    scale_low: float = 0.8
    scale_high: float = 1.0
    sigma: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"diversity.p must be in [0, 1], got {self.p}")
        if not 0.0 < self.scale_low <= self.scale_high:
            raise ConfigError("diversity scale range must satisfy 0 < low <= high")
        if self.sigma < 0.0:
            raise ConfigError("diversity.sigma must be >= 0")


def random_resize(
    images: torch.Tensor, scale_low: float, scale_high: float, generator: torch.Generator
) -> torch.Tensor:
    """Resize by u ~ Uniform(low, high) (bilinear) then back to the original size."""
    h, w = images.shape[-2:]
    u = scale_low + (scale_high - scale_low) * torch.rand((), generator=generator).item()
    nh, nw = max(1, round(h * u)), max(1, round(w * u))
    if (nh, nw) == (h, w):
        return images
    small = F.interpolate(images, size=(nh, nw), mode="bilinear", align_corners=False)
    return F.interpolate(small, size=(h, w), mode="bilinear", align_corners=False)


def gaussian_noise(images: torch.Tensor, sigma: float, generator: torch.Generator) -> torch.Tensor:
    """Add N(0, sigma^2) noise and clamp back to [-1, 1]."""
    if sigma == 0.0:
        return images
    noise = torch.randn(images.shape, generator=generator, dtype=images.dtype) * sigma
    return torch.clamp(images + noise, -1.0, 1.0)


def apply_diversity(images: torch.Tensor, config: DiversityConfig, generator: torch.Generator) -> torch.Tensor:
    """One Bernoulli(p) draw per call: either resize-then-noise or identity."""
    if config.p > 0.0 and torch.rand((), generator=generator).item() < config.p:
        images = random_resize(images, config.scale_low, config.scale_high, generator)
        images = gaussian_noise(images, config.sigma, generator)
    return images
