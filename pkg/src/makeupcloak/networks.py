"""Differentiable networks: makeup generator, patch discriminators, the
purifier that strips attack noise so cycle reconstruction stays healthy, and
small face-recognition embedders used as the surrogate ensemble.

Everything is deliberately compact so the whole pipeline trains on a laptop
CPU. No BatchNorm/dropout anywhere: every forward is a deterministic function
of (parameters, input).
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import MaskedFace

# Keeps sigmoid heads strictly inside (0, 1) so log terms never hit +-inf.
_SIGMOID_MARGIN = 1e-6
# Soft-identity skip: residual nets start as x -> x * (1 - eps) within tanh range.
_IDENTITY_SQUEEZE = 1.0 - 5e-5


def bounded_sigmoid(logits: torch.Tensor) -> torch.Tensor:
    return 0.5 + (1.0 - 2.0 * _SIGMOID_MARGIN) * (torch.sigmoid(logits) - 0.5)


def soft_identity_residual(x: torch.Tensor, residual: torch.Tensor) -> torch.Tensor:
    """tanh(atanh(x * squeeze) + residual): output in (-1, 1), equals ~x at residual 0."""
    squeezed = torch.clamp(x, -1.0, 1.0) * _IDENTITY_SQUEEZE
    return torch.tanh(torch.atanh(squeezed) + residual)


def _conv(in_ch, out_ch, kernel=3, stride=1, norm=True, act=True):
    layers = [nn.Conv2d(in_ch, out_ch, kernel, stride, kernel // 2)]
    if norm:
        layers.append(nn.InstanceNorm2d(out_ch, affine=True))
    if act:
        layers.append(nn.SiLU(inplace=True))
    return nn.Sequential(*layers)


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(_conv(ch, ch), _conv(ch, ch, act=False))

    def forward(self, x):
        return x + self.body(x)


class MakeupGenerator(nn.Module):
    """Style-transfer generator: (source image, reference image) -> styled image.

    The reference conditions the output through feature concatenation at the
    bottleneck. Output matches the input shape, range (-1, 1) via tanh.
    """

    def __init__(self, channels: int = 32):
        super().__init__()
        c = channels
        self.enc_src = nn.Sequential(_conv(3, c, 7), _conv(c, c, stride=2), _conv(c, 2 * c, stride=2))
        self.enc_ref = nn.Sequential(_conv(3, c, 7), _conv(c, c, stride=2), _conv(c, 2 * c, stride=2))
        self.fuse = nn.Sequential(_conv(4 * c, 2 * c), ResBlock(2 * c), ResBlock(2 * c))
        self.dec = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            _conv(2 * c, c),
            nn.Upsample(scale_factor=2, mode="nearest"),
            _conv(c, c),
            nn.Conv2d(c, 3, 7, 1, 3),
        )

    def forward(self, source: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
        if source.shape != reference.shape:
            raise ValueError(f"shape mismatch: {tuple(source.shape)} vs {tuple(reference.shape)}")
        h = torch.cat([self.enc_src(source), self.enc_ref(reference)], dim=1)
        return torch.tanh(self.dec(self.fuse(h)))


class PatchDiscriminator(nn.Module):
    """Patch classifier: image -> per-patch realness map, strictly in (0, 1)."""

    def __init__(self, channels: int = 32):
        super().__init__()
        c = channels
        self.body = nn.Sequential(
            _conv(3, c, 4, stride=2, norm=False),
            _conv(c, 2 * c, 4, stride=2),
            nn.Conv2d(2 * c, 1, 3, 1, 1),
        )

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return bounded_sigmoid(self.body(image))


class DenseBlock(nn.Module):
    """Densely connected conv block with residual scaling."""

    def __init__(self, ch, growth):
        super().__init__()
        self.c1 = nn.Conv2d(ch, growth, 3, 1, 1)
        self.c2 = nn.Conv2d(ch + growth, growth, 3, 1, 1)
        self.c3 = nn.Conv2d(ch + 2 * growth, ch, 3, 1, 1)
        self.act = nn.SiLU(inplace=True)

    def forward(self, x):
        d1 = self.act(self.c1(x))
        d2 = self.act(self.c2(torch.cat([x, d1], 1)))
        d3 = self.c3(torch.cat([x, d1, d2], 1))
        return x + 0.2 * d3


class RRDB(nn.Module):
    """Residual-in-residual dense block (stacked dense blocks, outer skip)."""

    def __init__(self, ch, growth, inner_blocks: int = 2):
        super().__init__()
        self.blocks = nn.Sequential(*[DenseBlock(ch, growth) for _ in range(inner_blocks)])

    def forward(self, x):
        return x + 0.2 * self.blocks(x)


class Purifier(nn.Module):
    """Encoder / RRDB trunk / decoder net that removes attack perturbations.

    The final conv is zero-initialized so a fresh purifier is (numerically) the
    identity map; training then only has to learn the cleanup delta.
    """

    def __init__(self, channels: int = 24, rrdb_blocks: int = 3, growth: int = 12):
        super().__init__()
        c = channels
        self.encoder = nn.Sequential(nn.Conv2d(3, c, 3, 1, 1), nn.SiLU(True), nn.Conv2d(c, c, 4, 2, 1))
        self.trunk = nn.Sequential(*[RRDB(c, growth) for _ in range(rrdb_blocks)])
        self.decoder = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(c, c, 3, 1, 1),
            nn.SiLU(True),
            nn.Conv2d(c, 3, 3, 1, 1),
        )
        nn.init.zeros_(self.decoder[-1].weight)
        nn.init.zeros_(self.decoder[-1].bias)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        feats = self.encoder(image)
        residual = self.decoder(feats + self.trunk(feats))
        return soft_identity_residual(image, residual)


class FaceEmbedder(nn.Module):
    """Face-recognition embedder producing unit-norm vectors.

    The architecture (width, depth) is drawn from ``model_seed`` so an ensemble
    of embedders is structurally diverse, mirroring a zoo of unrelated
    recognition backbones.
    """

    def __init__(self, model_seed: int = 0, embed_dim: int = 64):
        super().__init__()
        draw = np.random.default_rng(np.random.SeedSequence([0xFACE, int(model_seed)]))
        width = int(draw.choice([16, 24, 32]))
        depth = int(draw.choice([2, 3]))
        self.model_id = f"toyfr-{model_seed}"
        self.model_seed = int(model_seed)
        self.embed_dim = embed_dim

        layers = []
        ch = 3
        w = width
        for _ in range(depth):
            layers += [nn.Conv2d(ch, w, 4, 2, 1), nn.GroupNorm(4, w), nn.SiLU(True)]
            ch, w = w, min(2 * w, 128)
        self.backbone = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(4)
        self.feature_dim = ch * 16
        # feature BN removes the shared constant direction that would otherwise
        # collapse all embeddings onto one ray (eval mode: fixed running stats)
        self.feature_bn = nn.BatchNorm1d(self.feature_dim)
        self.head = nn.Linear(self.feature_dim, embed_dim)

    def features(self, image: torch.Tensor) -> torch.Tensor:
        """Penultimate activations (pre-embedding); also the FID feature space."""
        h = self.pool(self.backbone(image))
        return self.feature_bn(h.flatten(1))

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        emb = self.head(self.features(image))
        return F.normalize(emb, dim=1, eps=1e-12)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine between (N, d) and (N, d) or (d,) embeddings."""
    if b.dim() == 1:
        b = b.unsqueeze(0)
    return (a * b).sum(dim=1)


def _collate(faces: list[MaskedFace]) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(np.stack([f.image.pixels for f in faces]))
    labels = torch.tensor([f.image.identity_id for f in faces], dtype=torch.long)
    return images, labels


def _eer_threshold(pos: np.ndarray, neg: np.ndarray) -> tuple[float, float, float, float]:
    """Threshold equalizing false-accept and false-reject rates.

    Returns (tau, accuracy, far, frr) at the equal-error point.
    """
    taus = np.unique(np.concatenate([pos, neg]))
    best = (0.0, 0.0, 1.0, 1.0)
    best_gap = np.inf
    for tau in taus:
        far = float((neg >= tau).mean())
        frr = float((pos < tau).mean())
        if abs(far - frr) < best_gap:
            best_gap = abs(far - frr)
            best = (float(tau), 1.0 - 0.5 * (far + frr), far, frr)
    return best


def verification_pairs(
    faces: list[MaskedFace], rng: np.random.Generator, num_pairs: int = 400
) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Index pairs (same-identity, different-identity) drawn from a face bank."""
    by_id: dict[int, list[int]] = {}
    for i, f in enumerate(faces):
        by_id.setdefault(f.image.identity_id, []).append(i)
    ids = [k for k, v in by_id.items() if len(v) >= 2]
    pos, neg = [], []
    for _ in range(num_pairs):
        k = ids[int(rng.integers(len(ids)))]
        i, j = rng.choice(by_id[k], size=2, replace=False)
        pos.append((int(i), int(j)))
        ka, kb = rng.choice(ids, size=2, replace=False)
        pos_a = by_id[ka][int(rng.integers(len(by_id[ka])))]
        pos_b = by_id[kb][int(rng.integers(len(by_id[kb])))]
        neg.append((int(pos_a), int(pos_b)))
    return pos, neg


def train_face_embedder(
    dataset: list[MaskedFace],
    model_seed: int,
    epochs: int = 60,
    min_epochs: int = 20,
    batch_size: int = 32,
    lr: float = 2e-3,
    margin: float = 0.35,
    scale: float = 24.0,
    min_accuracy: float = 0.90,
    min_separation: float = 0.4,
    holdout_fraction: float = 0.25,
    embed_dim: int = 64,
) -> FaceEmbedder:
    """Train one toy face-recognition embedder on synthetic identities.

    Uses a cosine-margin classification objective; training stops once held-out
    verification accuracy at the model's own EER threshold reaches
    ``min_accuracy`` and the positive/negative cosine means are separated by at
    least ``min_separation`` (so thresholds are geometrically meaningful, not
    buried in the 4th decimal). Raises with diagnostics if the budget runs out.
    """
    identities = sorted({f.image.identity_id for f in dataset})
    if len(identities) < 8:
        raise ValueError(f"need >= 8 identities, got {len(identities)}")
    torch.manual_seed(int(model_seed) * 7919 + 13)

    # per-identity holdout split
    by_id: dict[int, list[MaskedFace]] = {}
    for f in dataset:
        by_id.setdefault(f.image.identity_id, []).append(f)
    train_faces, held_faces = [], []
    for k in identities:
        n_hold = max(1, int(round(len(by_id[k]) * holdout_fraction)))
        held_faces += by_id[k][:n_hold]
        train_faces += by_id[k][n_hold:]

    model = FaceEmbedder(model_seed=model_seed, embed_dim=embed_dim)
    id_to_class = {k: i for i, k in enumerate(identities)}
    class_weights = nn.Parameter(torch.randn(len(identities), embed_dim) * 0.1)
    opt = torch.optim.Adam(list(model.parameters()) + [class_weights], lr=lr)

    images, labels = _collate(train_faces)
    classes = torch.tensor([id_to_class[int(l)] for l in labels])
    rng = np.random.default_rng(np.random.SeedSequence([0xE3, int(model_seed)]))
    pos_pairs, neg_pairs = verification_pairs(held_faces, rng)
    held_images, _ = _collate(held_faces)

    history = []
    for epoch in range(epochs):
        perm = torch.from_numpy(rng.permutation(len(images)))
        model.train()
        for start in range(0, len(images), batch_size):
            idx = perm[start : start + batch_size]
            emb = model(images[idx])
            w = F.normalize(class_weights, dim=1)
            logits = emb @ w.t()
            target = classes[idx]
            logits = logits - margin * F.one_hot(target, len(identities))
            loss = F.cross_entropy(scale * logits, target)
            opt.zero_grad()
            loss.backward()
            opt.step()

        if epoch + 1 < min_epochs:
            continue
        model.eval()
        with torch.no_grad():
            held_emb = model(held_images).numpy()
        pos = np.array([float(held_emb[i] @ held_emb[j]) for i, j in pos_pairs])
        neg = np.array([float(held_emb[i] @ held_emb[j]) for i, j in neg_pairs])
        tau, acc, far, frr = _eer_threshold(pos, neg)
        separation = float(pos.mean() - neg.mean())
        history.append((acc, separation))
        if acc >= min_accuracy and separation >= min_separation:
            model.eer_threshold = tau
            model.verification_accuracy = acc
            model.eer_far = far
            model.eer_frr = frr
            model.cosine_separation = separation
            return model

    raise RuntimeError(
        f"embedder {model_seed} failed to reach {min_accuracy:.0%} verification accuracy "
        f"with cosine separation >= {min_separation} within {epochs} epochs; "
        "per-epoch (accuracy, separation): "
        + ", ".join(f"({a:.3f}, {s:.3f})" for a, s in history)
    )
