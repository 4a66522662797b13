"""Shared test utilities: finite-difference gradient checking and stubs."""

from __future__ import annotations

import numpy as np
import torch


def finite_difference_check(
    fn,
    x: torch.Tensor,
    num_coords: int = 20,
    step: float = 1e-3,
    rtol: float = 1e-3,
    seed: int = 0,
):
    """Compare autodiff gradients of ``fn(x)`` (scalar) against central differences.

    Runs in float64. Relative error uses a floor of 1e-2 in the denominator so
    near-zero gradients are compared at absolute tolerance rtol * 1e-2.
    """
    x = x.detach().double().clone().requires_grad_(True)
    out = fn(x)
    (auto_grad,) = torch.autograd.grad(out, x)
    auto_grad = auto_grad.detach()

    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(x.numel(), size=min(num_coords, x.numel()), replace=False)
    worst = 0.0
    for idx in flat_idx:
        coord = np.unravel_index(int(idx), tuple(x.shape))
        plus = x.detach().clone()
        minus = x.detach().clone()
        plus[coord] += step
        minus[coord] -= step
        with torch.no_grad():
            f_plus = float(fn(plus))
            f_minus = float(fn(minus))
        fd = (f_plus - f_minus) / (2.0 * step)
        ad = float(auto_grad[coord])
        rel = abs(fd - ad) / max(abs(fd), abs(ad), 1e-2)
        worst = max(worst, rel)
        assert rel <= rtol, f"coord {coord}: autodiff {ad:.6e} vs central diff {fd:.6e} (rel {rel:.2e})"
    return worst


class StubEmbedder(torch.nn.Module):
    """Embedder returning a fixed unit vector for every input."""

    def __init__(self, vector, model_id="stub"):
        super().__init__()
        v = torch.as_tensor(vector, dtype=torch.float32)
        self.register_buffer("v", v / v.norm())
        self.model_id = model_id

    def forward(self, images):
        return self.v.unsqueeze(0).expand(images.shape[0], -1)


class LinearEmbedder(torch.nn.Module):
    """Normalized linear map, for closed-form attack gradients."""

    def __init__(self, weight, model_id="linear"):
        super().__init__()
        self.register_buffer("weight", torch.as_tensor(weight, dtype=torch.float32))
        self.model_id = model_id

    def forward(self, images):
        flat = images.flatten(1)
        out = flat @ self.weight.t()
        return torch.nn.functional.normalize(out, dim=1, eps=1e-12)


def rand_images(n, res, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand((n, 3, res, res), generator=g, dtype=torch.float64) * 1.8 - 0.9).to(dtype)
