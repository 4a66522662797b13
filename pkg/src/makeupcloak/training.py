"""Joint training loop: alternate discriminator, generator, and purifier
updates against a frozen surrogate-embedder ensemble.

Update order within one step is D -> G -> H, one Adam step each:
  1. discriminators on real vs detached fakes;
  2. generator with discriminators and purifier parameters frozen (gradients
     still flow *through* the purifier to the generator);
  3. purifier with discriminators frozen and fresh generator outputs detached.
"""

from __future__ import annotations

import base64
import csv
import hashlib
import json
import struct
import time
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .data import MaskedFace, PairStream, TargetIdentity, TrainingPair, synth_face, synth_identity_set
from .diversity import DiversityConfig
from .errors import CheckpointIntegrityError, ConfigError, DivergenceError
from .histmatch import makeup_target
from .losses import FeaturePyramidDistance, LossReport, LossTerms, LossWeights
from .networks import FaceEmbedder, MakeupGenerator, PatchDiscriminator, Purifier, train_face_embedder

CHECKPOINT_MAGIC = b"MCLOAK01"
TRACE_COLUMNS = [
    "step", "l_d", "l_g_gan", "l_g_reg", "l_g_adv", "l_g_make", "l_idt",
    "l_h_gan", "l_h_adv", "l_h_make", "l_g_total", "l_h_total", "l_d_total", "wall_ms",
]


@dataclass
class TrainConfig:
    epochs: int = 1
    steps_per_epoch: int = 200
    batch_size: int = 8
    resolution: int = 64
    num_identities: int = 16
    samples_per_identity: int = 12
    target_identity: int | None = None  # defaults to the last identity
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    loss_weights: LossWeights = field(default_factory=LossWeights)
    diversity: DiversityConfig = field(default_factory=DiversityConfig)
    ensemble_seeds: tuple[int, ...] = (1, 2)
    holdout_seed: int = 3
    seed: int = 0
    checkpoint_every: int = 500
    use_purifier: bool = True  # False reproduces the no-regularizer ablation
    generator_channels: int = 32
    discriminator_channels: int = 32
    purifier_channels: int = 24
    purifier_blocks: int = 3
    embed_dim: int = 64
    histogram_bins: int = 256

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0.0 <= b < 1.0:
                raise ConfigError("adam betas must be in [0, 1)")
        self.ensemble_seeds = tuple(int(s) for s in self.ensemble_seeds)
        if self.holdout_seed in self.ensemble_seeds:
            raise ConfigError("holdout model must not be part of the training ensemble")
        if self.batch_size < 1 or self.steps_per_epoch < 1 or self.epochs < 1:
            raise ConfigError("epochs, steps_per_epoch and batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ensemble_seeds"] = list(self.ensemble_seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        if "loss_weights" in d and isinstance(d["loss_weights"], dict):
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        if "diversity" in d and isinstance(d["diversity"], dict):
            d["diversity"] = DiversityConfig(**d["diversity"])
        if "ensemble_seeds" in d:
            d["ensemble_seeds"] = tuple(d["ensemble_seeds"])
        return cls(**d)


def config_hash(config: TrainConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


@dataclass
class StepTrace:
    step: int
    report: LossReport
    wall_ms: float

    def row(self) -> list:
        r = self.report
        return [
            self.step, r.gan_d, r.gan_g, r.reg_g, r.adv_g, r.make_g, r.idt,
            r.gan_h, r.adv_h, r.make_h, r.total_g, r.total_h, r.total_d, self.wall_ms,
        ]


class Nets:
    """Parameter containers for one training run."""

    def __init__(self, config: TrainConfig):
        torch.manual_seed(_derive_seed(config.seed, "nets"))
        self.gen = MakeupGenerator(config.generator_channels)
        self.disc_source = PatchDiscriminator(config.discriminator_channels)
        self.disc_reference = PatchDiscriminator(config.discriminator_channels)
        self.purifier = Purifier(config.purifier_channels, config.purifier_blocks) if config.use_purifier else None
        self.perceptual = FeaturePyramidDistance(seed=_derive_seed(config.seed, "perceptual") % (2**31))

    def named(self) -> dict:
        out = {"gen": self.gen, "d_src": self.disc_source, "d_ref": self.disc_reference}
        if self.purifier is not None:
            out["purifier"] = self.purifier
        return out


def _derive_seed(seed: int, label: str, extra: int = 0) -> int:
    h = hashlib.sha256(f"{seed}:{label}:{extra}".encode()).digest()
    return int.from_bytes(h[:8], "little") % (2**63)


def _set_requires_grad(module, flag: bool):
    if module is not None:
        for p in module.parameters():
            p.requires_grad_(flag)


def _identity_purifier(x):
    return x


class TrainState:
    """Everything that evolves during training: nets, optimizers, rng, step."""

    def __init__(self, config: TrainConfig, nets: Nets):
        self.config = config
        self.nets = nets
        betas = (config.adam_beta1, config.adam_beta2)
        lr = config.learning_rate
        self.opt = {
            name: torch.optim.Adam(net.parameters(), lr=lr, betas=betas)
            for name, net in nets.named().items()
        }
        self.diversity_rng = torch.Generator().manual_seed(_derive_seed(config.seed, "diversity") % (2**63))
        self.step = 0


def collate_pairs(pairs: list[TrainingPair]) -> dict:
    x = torch.from_numpy(np.stack([p.x.pixels for p in pairs]))
    y = torch.from_numpy(np.stack([p.y.pixels for p in pairs]))
    return {"x": x, "y": y, "pairs": pairs}


def batch_makeup_targets(pairs: list[TrainingPair], bins: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Histogram-matched composites for both transfer directions, as fixed targets."""
    hm_xy = [makeup_target(p.x.pixels, p.masks_x, p.y.pixels, p.masks_y, bins).pixels for p in pairs]
    hm_yx = [makeup_target(p.y.pixels, p.masks_y, p.x.pixels, p.masks_x, bins).pixels for p in pairs]
    return torch.from_numpy(np.stack(hm_xy)), torch.from_numpy(np.stack(hm_yx))


def train_step(
    state: TrainState,
    batch: dict,
    target: TargetIdentity,
    embedders: list[FaceEmbedder],
    last_checkpoint: Path | None = None,
) -> StepTrace:
    """One D -> G -> H alternation on a collated batch. Returns the loss trace."""
    t0 = time.perf_counter()
    cfg = state.config
    w = cfg.loss_weights
    nets = state.nets
    gen, d_src, d_ref = nets.gen, nets.disc_source, nets.disc_reference
    purifier = nets.purifier if cfg.use_purifier else _identity_purifier
    x, y = batch["x"], batch["y"]
    hm_xy, hm_yx = batch_makeup_targets(batch["pairs"], cfg.histogram_bins)
    target_embs = [
        torch.as_tensor(target.embeddings[m.model_id], dtype=torch.float32) for m in embedders
    ]

    # --- discriminators ---
    _set_requires_grad(d_src, True)
    _set_requires_grad(d_ref, True)
    _set_requires_grad(gen, False)
    with torch.no_grad():
        to_ref_det = gen(x, y)
        to_src_det = gen(y, x)
    l_gan_d = L.gan_loss_d(d_src, d_ref, x, y, to_ref_det, to_src_det)
    loss_d = w.gan * l_gan_d
    if not torch.isfinite(loss_d):
        raise DivergenceError("discriminator loss is non-finite", last_checkpoint)
    state.opt["d_src"].zero_grad(set_to_none=True)
    state.opt["d_ref"].zero_grad(set_to_none=True)
    loss_d.backward()
    state.opt["d_src"].step()
    state.opt["d_ref"].step()

    # --- generator ---
    _set_requires_grad(d_src, False)
    _set_requires_grad(d_ref, False)
    _set_requires_grad(gen, True)
    _set_requires_grad(nets.purifier, False)
    to_ref = gen(x, y)
    to_src = gen(y, x)
    l_gan_g = L.gan_loss_g(d_src, d_ref, to_ref, to_src)
    if cfg.use_purifier:
        l_reg = L.purified_cycle_loss(gen, purifier, x, y)
    else:
        l_reg = torch.zeros(())
    l_adv_g = L.impersonation_loss(embedders, target_embs, to_ref, to_src, cfg.diversity, state.diversity_rng)
    l_make_g = L.makeup_loss(to_ref, hm_xy) + L.makeup_loss(to_src, hm_yx)
    l_idt = L.reconstruction_loss(gen, purifier, x, y, nets.perceptual)
    terms_g = LossTerms(gan_g=l_gan_g, reg_g=l_reg, adv_g=l_adv_g, make_g=l_make_g, idt=l_idt)
    loss_g = L.total_g(terms_g, w)
    if not torch.isfinite(loss_g):
        raise DivergenceError("generator loss is non-finite", last_checkpoint)
    state.opt["gen"].zero_grad(set_to_none=True)
    loss_g.backward()
    state.opt["gen"].step()

    # --- purifier ---
    l_gan_h = l_adv_h = l_make_h = torch.zeros(())
    if cfg.use_purifier:
        _set_requires_grad(gen, False)
        _set_requires_grad(nets.purifier, True)
        with torch.no_grad():  # fresh fakes from the just-updated generator
            to_ref_det = gen(x, y)
            to_src_det = gen(y, x)
        p_ref = purifier(to_ref_det)
        p_src = purifier(to_src_det)
        l_gan_h = L.gan_loss_purifier(d_src, d_ref, p_src, p_ref)
        l_adv_h = L.purifier_restore_loss(embedders, x, y, p_ref, p_src)
        l_make_h = L.makeup_loss(p_ref, hm_xy) + L.makeup_loss(p_src, hm_yx)
        with torch.no_grad():
            g_xx = gen(x, x)
            g_yy = gen(y, y)
        rx, ry = purifier(g_xx), purifier(g_yy)
        l_idt_h = (
            (rx - x).abs().mean() + nets.perceptual(rx, x) + (ry - y).abs().mean() + nets.perceptual(ry, y)
        )
        loss_h = w.gan * l_gan_h + w.adv * l_adv_h + w.make * l_make_h + w.idt * l_idt_h
        if not torch.isfinite(loss_h):
            raise DivergenceError("purifier loss is non-finite", last_checkpoint)
        state.opt["purifier"].zero_grad(set_to_none=True)
        loss_h.backward()
        state.opt["purifier"].step()
        _set_requires_grad(gen, True)

    _set_requires_grad(d_src, True)
    _set_requires_grad(d_ref, True)
    _set_requires_grad(nets.purifier, True)

    state.step += 1

    def val(t):
        return float(t.detach()) if torch.is_tensor(t) else float(t)

    terms = LossTerms(
        gan_d=val(l_gan_d), gan_g=val(l_gan_g), reg_g=val(l_reg), adv_g=val(l_adv_g),
        make_g=val(l_make_g), idt=val(l_idt), gan_h=val(l_gan_h), adv_h=val(l_adv_h),
        make_h=val(l_make_h),
    )
    report = L.totals(terms, w)
    return StepTrace(step=state.step, report=report, wall_ms=(time.perf_counter() - t0) * 1000.0)


# ---------------------------------------------------------------------------
# run assembly


def build_face_banks(config: TrainConfig) -> tuple[list[MaskedFace], list[MaskedFace]]:
    sources = synth_identity_set(
        config.num_identities, config.samples_per_identity, config.resolution,
        _derive_seed(config.seed, "sources") % (2**31), style_domain="source",
    )
    references = synth_identity_set(
        config.num_identities, config.samples_per_identity, config.resolution,
        _derive_seed(config.seed, "references") % (2**31), style_domain="reference",
    )
    return sources, references


def build_embedders(config: TrainConfig, seeds=None, dataset=None) -> list[FaceEmbedder]:
    """Train the surrogate ensemble (deterministic given config.seed and model seeds)."""
    seeds = list(config.ensemble_seeds) if seeds is None else list(seeds)
    if dataset is None:
        dataset = synth_identity_set(
            max(8, config.num_identities), max(8, config.samples_per_identity), config.resolution,
            _derive_seed(config.seed, "fr-data") % (2**31), style_domain="source",
        )
    models = []
    for s in seeds:
        model = train_face_embedder(dataset, model_seed=s, embed_dim=config.embed_dim)
        model.eval()
        models.append(model)
    return models


def build_target(config: TrainConfig, embedders: list[FaceEmbedder]) -> TargetIdentity:
    """The fixed impersonation target for the whole run, with cached embeddings."""
    tid = config.target_identity if config.target_identity is not None else config.num_identities - 1
    rng = np.random.default_rng(np.random.SeedSequence([_derive_seed(config.seed, "target") % (2**31)]))
    image, _ = synth_face(tid, "source", rng, config.resolution)
    target = TargetIdentity(image=image)
    batch = torch.from_numpy(image.pixels[None])
    with torch.no_grad():
        for m in embedders:
            target.embeddings[m.model_id] = m(batch)[0].numpy()
    return target


def train(
    config: TrainConfig,
    run_dir,
    resume_from=None,
    force: bool = False,
    embedders: list[FaceEmbedder] | None = None,
    log_every: int = 0,
) -> tuple[Path, list[StepTrace]]:
    """Full training run: returns (final checkpoint path, step traces).

    Writes ``trace.csv`` and periodic checkpoints under ``run_dir``. With
    ``resume_from`` the run continues from a saved checkpoint; a config-hash
    mismatch requires ``force=True``.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    sources, references = build_face_banks(config)
    if embedders is None:
        embedders = build_embedders(config)
    target = build_target(config, embedders)
    stream = PairStream(sources, references, seed=_derive_seed(config.seed, "pairs") % (2**63))

    nets = Nets(config)
    state = TrainState(config, nets)
    if resume_from is not None:
        load_checkpoint(resume_from, state, force=force)

    trace_path = run_dir / "trace.csv"
    mode = "a" if (resume_from is not None and trace_path.exists()) else "w"
    traces: list[StepTrace] = []
    last_ckpt: Path | None = Path(resume_from) if resume_from else None
    total_steps = config.epochs * config.steps_per_epoch

    with open(trace_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(TRACE_COLUMNS)
        while state.step < total_steps:
            pairs = stream.take(config.batch_size, start=state.step * config.batch_size)
            batch = collate_pairs(pairs)
            try:
                tr = train_step(state, batch, target, embedders, last_checkpoint=last_ckpt)
            except DivergenceError as exc:
                exc.last_checkpoint = last_ckpt
                raise
            traces.append(tr)
            writer.writerow(tr.row())
            if log_every and tr.step % log_every == 0:
                print(f"step {tr.step}/{total_steps} l_g={tr.report.total_g:.3f} "
                      f"l_d={tr.report.total_d:.3f} l_h={tr.report.total_h:.3f}", flush=True)
            if config.checkpoint_every and state.step % config.checkpoint_every == 0:
                last_ckpt = save_checkpoint(state, run_dir / f"ckpt_{state.step:06d}.bin")

    final = save_checkpoint(state, run_dir / "ckpt_final.bin")
    return final, traces


# ---------------------------------------------------------------------------
# checkpoint container: magic | u32 header length | canonical JSON header | payload
# parameter and Adam-moment blocks are raw little-endian float32


def _state_blocks(state: TrainState) -> dict[str, np.ndarray]:
    blocks: dict[str, np.ndarray] = {}
    for net_name, net in state.nets.named().items():
        sd = net.state_dict()
        for pname, tensor in sd.items():
            blocks[f"{net_name}.{pname}"] = tensor.detach().numpy().astype("<f4")
        opt_state = state.opt[net_name].state
        for pname, param in net.named_parameters():
            st = opt_state.get(param)
            if st:
                blocks[f"{net_name}.{pname}.m1"] = st["exp_avg"].numpy().astype("<f4")
                blocks[f"{net_name}.{pname}.m2"] = st["exp_avg_sq"].numpy().astype("<f4")
    return blocks


def _adam_steps(state: TrainState) -> dict[str, int]:
    steps = {}
    for net_name, net in state.nets.named().items():
        opt_state = state.opt[net_name].state
        for pname, param in net.named_parameters():
            st = opt_state.get(param)
            if st:
                steps[f"{net_name}.{pname}"] = int(st["step"])
    return steps


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    blocks = _state_blocks(state)
    names = sorted(blocks)
    payload = bytearray()
    manifest = []
    for name in names:
        arr = np.ascontiguousarray(blocks[name])
        raw = arr.tobytes()
        manifest.append({
            "name": name, "dtype": "<f4", "shape": list(arr.shape),
            "offset": len(payload), "nbytes": len(raw),
        })
        payload.extend(raw)
    header = {
        "format": 1,
        "step": state.step,
        "config_hash": config_hash(state.config),
        "blocks": manifest,
        "adam_steps": _adam_steps(state),
        "rng": {
            "torch": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode(),
            "diversity": base64.b64encode(state.diversity_rng.get_state().numpy().tobytes()).decode(),
        },
        "payload_sha256": hashlib.sha256(bytes(payload)).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(bytes(payload))
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse and integrity-check a checkpoint; returns (header, blocks)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointIntegrityError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    if len(raw) < off + hlen:
        raise CheckpointIntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(raw[off : off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointIntegrityError(f"{path}: corrupt header: {exc}") from exc
    off += hlen
    payload = raw[off:]
    expected = sum(b["nbytes"] for b in header["blocks"])
    if len(payload) != expected:
        raise CheckpointIntegrityError(f"{path}: payload length {len(payload)} != manifest {expected}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointIntegrityError(f"{path}: payload checksum mismatch")
    blocks = {}
    for entry in header["blocks"]:
        a, n = entry["offset"], entry["nbytes"]
        blocks[entry["name"]] = np.frombuffer(payload[a : a + n], dtype="<f4").reshape(entry["shape"]).copy()
    return header, blocks


def load_checkpoint(path, state: TrainState, force: bool = False) -> dict:
    """Restore parameters, optimizer moments, rng, and the step counter."""
    header, blocks = read_checkpoint(path)
    expect = config_hash(state.config)
    if header["config_hash"] != expect:
        warnings.warn(f"checkpoint config hash {header['config_hash'][:12]} != run config {expect[:12]}")
        if not force:
            raise ConfigError("config hash mismatch; pass force=True (--force) to resume anyway")

    for net_name, net in state.nets.named().items():
        sd = {}
        for pname in net.state_dict():
            key = f"{net_name}.{pname}"
            if key not in blocks:
                raise CheckpointIntegrityError(f"missing parameter block {key}")
            sd[pname] = torch.from_numpy(blocks[key])
        net.load_state_dict(sd)
        opt = state.opt[net_name]
        opt.state.clear()
        for pname, param in net.named_parameters():
            key = f"{net_name}.{pname}"
            if f"{key}.m1" in blocks:
                opt.state[param] = {
                    "step": torch.tensor(float(header["adam_steps"][key])),
                    "exp_avg": torch.from_numpy(blocks[f"{key}.m1"]),
                    "exp_avg_sq": torch.from_numpy(blocks[f"{key}.m2"]),
                }
    torch.set_rng_state(torch.frombuffer(base64.b64decode(header["rng"]["torch"]), dtype=torch.uint8).clone())
    state.diversity_rng.set_state(
        torch.frombuffer(base64.b64decode(header["rng"]["diversity"]), dtype=torch.uint8).clone()
    )
    state.step = int(header["step"])
    return header
