"""Every training objective as a pure function of network outputs.

Conventions shared by all terms:
  * image-space norms are per-pixel means (L1) or root-mean-squares (L2), so
    loss weights are resolution independent;
  * GAN terms assume discriminator outputs strictly inside (0, 1);
  * detaching is the caller's job and is stated per function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diversity import DiversityConfig, apply_diversity
from .errors import ConfigError, DivergenceError
from .networks import cosine_similarity

_RMS_EPS = 1e-16


@dataclass
class LossWeights:
    """Weights for (gan, reg, adv, make, idt), in that order."""

    gan: float = 10.0
    reg: float = 10.0
    adv: float = 5.0
    make: float = 2.0
    idt: float = 5.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v >= 0.0):
                raise ConfigError(f"loss weight {f.name} must be finite and >= 0, got {v}")


@dataclass
class LossTerms:
    """Raw (unweighted) per-term values; floats or scalar tensors."""

    gan_d: object = 0.0
    gan_g: object = 0.0
    reg_g: object = 0.0
    adv_g: object = 0.0
    make_g: object = 0.0
    idt: object = 0.0
    gan_h: object = 0.0
    adv_h: object = 0.0
    make_h: object = 0.0


def total_d(terms: LossTerms, w: LossWeights):
    return w.gan * terms.gan_d


def total_g(terms: LossTerms, w: LossWeights):
    return w.gan * terms.gan_g + w.reg * terms.reg_g + w.adv * terms.adv_g + w.make * terms.make_g + w.idt * terms.idt


def total_h(terms: LossTerms, w: LossWeights):
    return w.gan * terms.gan_h + w.adv * terms.adv_h + w.make * terms.make_h + w.idt * terms.idt


@dataclass
class LossReport:
    """Per-term scalars plus the weighted totals actually optimized."""

    gan_d: float
    gan_g: float
    reg_g: float
    adv_g: float
    make_g: float
    idt: float
    gan_h: float
    adv_h: float
    make_h: float
    total_d: float
    total_g: float
    total_h: float

    def __post_init__(self):
        if self._weights is not None:
            t = LossTerms(**{f.name: getattr(self, f.name) for f in fields(LossTerms)})
            for got, want in (
                (self.total_d, total_d(t, self._weights)),
                (self.total_g, total_g(t, self._weights)),
                (self.total_h, total_h(t, self._weights)),
            ):
                if abs(got - want) > 1e-6:
                    raise ValueError(f"loss totals inconsistent with terms: {got} vs {want}")

    _weights: LossWeights = None


def totals(terms: LossTerms, weights: LossWeights) -> LossReport:
    """Weighted totals for the discriminator, generator, and purifier objectives."""
    vals = {f.name: float(getattr(terms, f.name)) for f in fields(LossTerms)}
    as_floats = LossTerms(**vals)
    return LossReport(
        **vals,
        total_d=total_d(as_floats, weights),
        total_g=total_g(as_floats, weights),
        total_h=total_h(as_floats, weights),
        _weights=weights,
    )


def _check_finite(value: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.isfinite(value).all():
        raise DivergenceError(f"{name} is non-finite")
    return value


def gan_loss_d(disc_source, disc_reference, x, y, to_ref, to_src) -> torch.Tensor:
    """Discriminator objective: real images score high, generated ones low.

    ``to_ref``/``to_src`` are the generator outputs G(x, y) / G(y, x) and must
    be detached by the caller. Averaged over batch and patch map.
    """
    loss = (
        -torch.log(disc_source(x)).mean()
        - torch.log(1.0 - disc_source(to_src)).mean()
        - torch.log(disc_reference(y)).mean()
        - torch.log(1.0 - disc_reference(to_ref)).mean()
    )
    return _check_finite(loss, "gan_loss_d")


def gan_loss_g(disc_source, disc_reference, to_ref, to_src) -> torch.Tensor:
    """Generator realism objective; discriminators must be frozen by the caller."""
    loss = -torch.log(disc_source(to_src)).mean() - torch.log(disc_reference(to_ref)).mean()
    return _check_finite(loss, "gan_loss_g")


def gan_loss_purifier(disc_source, disc_reference, purified_to_src, purified_to_ref) -> torch.Tensor:
    """Realism penalty on purified generator outputs (discriminators frozen)."""
    loss = -torch.log(disc_source(purified_to_src)).mean() - torch.log(disc_reference(purified_to_ref)).mean()
    return _check_finite(loss, "gan_loss_purifier")


def purified_cycle_loss(gen, purifier, x, y) -> torch.Tensor:
    """Cycle consistency routed through the purifier in both directions.

    Each generated image is purified before being translated back, and the
    reconstruction is purified again before comparison; this keeps the cycle
    loop functional even though the raw generator outputs carry attack noise.
    """
    rec_x = purifier(gen(purifier(gen(x, y)), x))
    rec_y = purifier(gen(purifier(gen(y, x)), y))
    return (rec_x - x).abs().mean() + (rec_y - y).abs().mean()


def ensemble_target_distance(embedders, target_embeddings, images) -> torch.Tensor:
    """(1/K) sum_k mean_batch (1 - cos(M_k(images), target_k))."""
    assert len(embedders) == len(target_embeddings) and len(embedders) >= 1
    acc = 0.0
    for m, t in zip(embedders, target_embeddings):
        acc = acc + (1.0 - cosine_similarity(m(images), t)).mean()
    return acc / len(embedders)


def impersonation_loss(
    embedders,
    target_embeddings,
    to_ref,
    to_src,
    diversity_config: DiversityConfig,
    generator: torch.Generator,
) -> torch.Tensor:
    """Ensemble cosine pull toward the target identity, with input diversity.

    The diversity transform is drawn independently per (embedder, direction)
    term. ``target_embeddings[k]`` is the cached unit embedding of the target
    image under embedder k.
    """
    k = len(embedders)
    total = 0.0
    for images in (to_ref, to_src):
        for m, t in zip(embedders, target_embeddings):
            transformed = apply_diversity(images, diversity_config, generator)
            total = total + (1.0 - cosine_similarity(m(transformed), t)).mean() / (2.0 * k)
    return total


def purifier_restore_loss(embedders, x, y, purified_to_ref, purified_to_src) -> torch.Tensor:
    """Purified outputs should embed like the clean images they came from.

    No input diversity here: the purifier only needs to strip the attack
    signal, not make it transferable.
    """
    k = len(embedders)
    total = 0.0
    for m in embedders:
        ex = m(x).detach()
        ey = m(y).detach()
        total = total + (1.0 - cosine_similarity(m(purified_to_ref), ex)).mean() / (2.0 * k)
        total = total + (1.0 - cosine_similarity(m(purified_to_src), ey)).mean() / (2.0 * k)
    return total


def makeup_loss(output: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Root-mean-square distance to the histogram-matched composite (detached)."""
    if output.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(output.shape)} vs {tuple(target.shape)}")
    return torch.sqrt(((output - target) ** 2).mean() + _RMS_EPS)


class FeaturePyramidDistance(nn.Module):
    """Perceptual distance from a frozen, seed-fixed random conv pyramid.

    Stand-in for a learned perceptual model: features at three scales are
    channel-normalized and compared with mean squared error, summed over
    levels. Identical inputs give exactly 0. Any module with the same
    ``(a, b) -> scalar`` signature can be plugged in instead.
    """

    def __init__(self, seed: int = 0, channels: tuple[int, ...] = (8, 16, 24)):
        super().__init__()
        gen = torch.Generator().manual_seed(int(seed))
        convs = []
        in_ch = 3
        for out_ch in channels:
            conv = nn.Conv2d(in_ch, out_ch, 5, stride=2, padding=2)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * 0.2)
                conv.bias.zero_()
            in_ch = out_ch
            convs.append(conv)
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def _levels(self, x):
        feats = []
        h = x
        for conv in self.convs:
            h = torch.tanh(conv(h))
            feats.append(F.normalize(h, dim=1, eps=1e-8))
        return feats

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        dist = 0.0
        for fa, fb in zip(self._levels(a), self._levels(b)):
            dist = dist + ((fa - fb) ** 2).mean()
        return dist


def reconstruction_loss(gen, purifier, x, y, perceptual_fn) -> torch.Tensor:
    """Self-reconstruction: styling an image with itself should change nothing.

    L1 plus perceptual distance between purifier(gen(v, v)) and v, for v in
    {x, y}.
    """
    rx = purifier(gen(x, x))
    ry = purifier(gen(y, y))
    return (rx - x).abs().mean() + perceptual_fn(rx, x) + (ry - y).abs().mean() + perceptual_fn(ry, y)
