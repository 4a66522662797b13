"""Gradient-based targeted (impersonation) attacks against an embedder
ensemble: PGD, MI-FGSM, and TI-DIM. Comparison baselines for the GAN pipeline.

All attacks minimize the mean ensemble cosine distance to the target
embedding, keep the perturbation inside an L-infinity ball of radius epsilon
(in [-1, 1] pixel units), and clamp to the valid pixel range after every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .diversity import DiversityConfig, apply_diversity
from .errors import ConfigError
from .losses import ensemble_target_distance

_NORM_FLOOR = 1e-12


@dataclass
class AttackConfig:
    epsilon: float = 0.1
    step_size: float = 0.01
    iterations: int = 40
    momentum: float = 1.0
    kernel_size: int = 5
    kernel_sigma: float | None = None  # defaults to kernel_size / 3
    diversity: DiversityConfig = field(default_factory=lambda: DiversityConfig(p=0.5))

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.step_size <= 0:
            raise ConfigError("step_size must be > 0")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.momentum < 0:
            raise ConfigError("momentum must be >= 0")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd and >= 1")


def target_embeddings(models, target_image: torch.Tensor) -> list[torch.Tensor]:
    if target_image.dim() == 3:
        target_image = target_image.unsqueeze(0)
    with torch.no_grad():
        return [m(target_image)[0] for m in models]


def _project(adv: torch.Tensor, x: torch.Tensor, epsilon: float) -> torch.Tensor:
    delta = torch.clamp(adv - x, -epsilon, epsilon)
    return torch.clamp(x + delta, -1.0, 1.0)


def _ensemble_grad(models, targets, images: torch.Tensor) -> torch.Tensor:
    images = images.detach().requires_grad_(True)
    loss = ensemble_target_distance(models, targets, images)
    return torch.autograd.grad(loss, images)[0]


def pgd_targeted(x: torch.Tensor, z: torch.Tensor, models, cfg: AttackConfig) -> torch.Tensor:
    """Iterative sign-gradient descent toward the target identity."""
    targets = target_embeddings(models, z)
    adv = x.clone()
    for _ in range(cfg.iterations):
        grad = _ensemble_grad(models, targets, adv)
        adv = adv.detach() - cfg.step_size * grad.sign()
        adv = _project(adv, x, cfg.epsilon)
    return adv.detach()


def _l1_normalized(grad: torch.Tensor) -> torch.Tensor:
    norm = grad.abs().flatten(1).sum(dim=1).clamp_min(_NORM_FLOOR)
    return grad / norm.view(-1, *([1] * (grad.dim() - 1)))


def mifgsm_targeted(x: torch.Tensor, z: torch.Tensor, models, cfg: AttackConfig) -> torch.Tensor:
    """PGD with an L1-normalized momentum accumulator."""
    targets = target_embeddings(models, z)
    adv = x.clone()
    accum = torch.zeros_like(x)
    for _ in range(cfg.iterations):
        grad = _ensemble_grad(models, targets, adv)
        accum = cfg.momentum * accum + _l1_normalized(grad)
        adv = adv.detach() - cfg.step_size * accum.sign()
        adv = _project(adv, x, cfg.epsilon)
    return adv.detach()


def gaussian_kernel(size: int, sigma: float | None = None) -> np.ndarray:
    """Normalized 2-D Gaussian smoothing kernel (sums to 1)."""
    if sigma is None:
        sigma = max(size / 3.0, 1e-6)
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def _smooth_gradient(grad: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    c = grad.shape[1]
    weight = kernel.to(grad.dtype).expand(c, 1, -1, -1)
    return F.conv2d(grad, weight, padding=kernel.shape[-1] // 2, groups=c)


def tidim_targeted(
    x: torch.Tensor, z: torch.Tensor, models, cfg: AttackConfig, generator: torch.Generator | None = None
) -> torch.Tensor:
    """MI-FGSM with input diversity and translation-invariant gradient smoothing."""
    if generator is None:
        generator = torch.Generator().manual_seed(0)
    targets = target_embeddings(models, z)
    kernel = torch.from_numpy(gaussian_kernel(cfg.kernel_size, cfg.kernel_sigma)).view(
        1, 1, cfg.kernel_size, cfg.kernel_size
    )
    adv = x.clone()
    accum = torch.zeros_like(x)
    for _ in range(cfg.iterations):
        leaf = adv.detach().requires_grad_(True)
        diversified = apply_diversity(leaf, cfg.diversity, generator)
        loss = ensemble_target_distance(models, targets, diversified)
        grad = torch.autograd.grad(loss, leaf)[0]
        grad = _smooth_gradient(grad, kernel)
        accum = cfg.momentum * accum + _l1_normalized(grad)
        adv = adv.detach() - cfg.step_size * accum.sign()
        adv = _project(adv, x, cfg.epsilon)
    return adv.detach()


ATTACKS = {"pgd": pgd_targeted, "mifgsm": mifgsm_targeted, "tidim": tidim_targeted}
