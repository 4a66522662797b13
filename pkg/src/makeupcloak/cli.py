"""Batch operator surface: train, protect, evaluate, calibrate.

Every command is non-interactive. Exit codes: 0 success, 2 configuration or
usage error, 3 training divergence. Run directories always contain a
``manifest.json`` (config, config hash, tool version, seed) sufficient to
reproduce the run. The run-root directory defaults to ``$MAKEUPCLOAK_RUN_ROOT``
or ``./runs``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .attacks import ATTACKS, AttackConfig
from .config import RunConfig
from .data import load_images, synth_identity_set
from .errors import CheckpointIntegrityError, ConfigError, DivergenceError
from .evaluation import (
    calibrate_threshold,
    evaluate_images,
    negative_pair_bank,
    pair_similarities,
)
from .networks import MakeupGenerator
from .training import (
    Nets,
    TrainState,
    build_embedders,
    build_face_banks,
    build_target,
    load_checkpoint,
    read_checkpoint,
    train,
    _derive_seed,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _run_root() -> Path:
    return Path(os.environ.get("MAKEUPCLOAK_RUN_ROOT", "runs"))


def _write_manifest(run_dir: Path, cfg: RunConfig):
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": cfg.doc,
        "config_hash": cfg.config_hash,
        "tool_version": __version__,
        "seed": cfg.seed,
    }
    with open(run_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if getattr(args, "override", None):
        cfg = cfg.apply_overrides(args.override)
    return cfg


def _restore_generator(checkpoint_path, cfg: RunConfig) -> tuple[MakeupGenerator, TrainState]:
    tc = cfg.train_config()
    state = TrainState(tc, Nets(tc))
    load_checkpoint(checkpoint_path, state, force=True)
    state.nets.gen.eval()
    return state.nets.gen, state


def cmd_train(args) -> int:
    cfg = _load_config(args)
    run_dir = Path(args.run_dir) if args.run_dir else _run_root() / f"train-{cfg.config_hash[:12]}"
    _write_manifest(run_dir, cfg)
    final, traces = train(
        cfg.train_config(), run_dir,
        resume_from=args.resume, force=args.force, log_every=args.log_every,
    )
    print(f"finished {len(traces)} steps; final checkpoint: {final}")
    return EXIT_OK


def cmd_protect(args) -> int:
    cfg = _load_config(args)
    tc = cfg.train_config()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    gen, _ = _restore_generator(args.checkpoint, cfg)
    sources = load_images(args.source_dir, tc.resolution, style_domain="source")
    reference = load_images_single(args.reference, tc.resolution)

    embedders = build_embedders(tc)
    target = build_target(tc, embedders)
    target_batch = torch.from_numpy(target.image.pixels[None])

    from PIL import Image

    from .data import denormalize_u8

    names = sorted(Path(args.source_dir).iterdir())
    names = [p for p in names if p.is_file() and not p.name.endswith(".mask.png")]
    sidecar = {}
    ref_batch = torch.from_numpy(reference.pixels[None])
    for face, path in zip(sources, names):
        x = torch.from_numpy(face.pixels[None])
        with torch.no_grad():
            protected = gen(x, ref_batch)
        arr = denormalize_u8(protected[0].numpy()).transpose(1, 2, 0)
        out_path = out_dir / (path.stem + ".png")
        Image.fromarray(arr).save(out_path)
        sims = {}
        for m in embedders:
            with torch.no_grad():
                sims[m.model_id] = float(m(protected) @ m(target_batch)[0])
        sidecar[out_path.name] = sims
    with open(out_dir / "similarities.json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    print(f"protected {len(sources)} images -> {out_dir}")
    return EXIT_OK


def load_images_single(path, resolution):
    from PIL import Image

    from .data import FaceImage, normalize_u8

    with Image.open(path) as im:
        rgb = im.convert("RGB").resize((resolution, resolution), Image.BILINEAR)
    return FaceImage(pixels=normalize_u8(np.asarray(rgb)).transpose(2, 0, 1), style_domain="reference")


def _test_banks(cfg: RunConfig):
    """Held-out synthetic test sources/references (disjoint seed from training)."""
    tc = cfg.train_config()
    n_test = int(cfg.doc["evaluation"]["num_test_images"])
    target_id = tc.target_identity if tc.target_identity is not None else tc.num_identities - 1
    per_id = max(1, n_test // max(1, tc.num_identities - 1) + 1)
    sources = [
        f for f in synth_identity_set(
            tc.num_identities, per_id, tc.resolution,
            _derive_seed(tc.seed, "test-sources") % (2**31), style_domain="source",
        )
        if f.image.identity_id != target_id
    ][:n_test]
    references = synth_identity_set(
        tc.num_identities, per_id, tc.resolution,
        _derive_seed(tc.seed, "test-references") % (2**31), style_domain="reference",
    )[:max(n_test, 16)]
    return sources, references


def _calibrated_models(cfg: RunConfig, tc, embedders, holdout):
    far = float(cfg.doc["evaluation"]["far"])
    n_pairs = int(cfg.doc["evaluation"]["calibration_pairs"])
    bank = synth_identity_set(
        max(8, tc.num_identities), 8, tc.resolution,
        _derive_seed(tc.seed, "calibration") % (2**31), style_domain="source",
    )
    pairs = negative_pair_bank(bank, n_pairs, seed=_derive_seed(tc.seed, "calib-pairs") % (2**31))
    models, thresholds = {}, {}
    for m in list(embedders) + [holdout]:
        sims = pair_similarities(m, bank, pairs)
        vt = calibrate_threshold(m, sims, far_target=far, min_pairs=min(1000, n_pairs))
        models[m.model_id] = m
        thresholds[m.model_id] = vt.tau
    return models, thresholds, far


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    tc = cfg.train_config()
    out_dir = Path(args.out)
    sources, references = _test_banks(cfg)
    clean = torch.from_numpy(np.stack([f.image.pixels for f in sources]))
    ref_imgs = torch.from_numpy(np.stack([f.image.pixels for f in references]))

    embedders = build_embedders(tc)
    holdout = build_embedders(tc, seeds=[tc.holdout_seed])[0]
    target = build_target(tc, embedders + [holdout])

    if args.checkpoint:
        gen, _ = _restore_generator(args.checkpoint, cfg)
        with torch.no_grad():
            refs = ref_imgs[torch.arange(len(clean)) % len(ref_imgs)]
            protected = gen(clean, refs)
    elif args.attack and args.attack != "none":
        atk_cfg = cfg.attack()
        overrides = {
            "epsilon": args.eps, "step_size": args.alpha, "iterations": args.steps,
            "momentum": args.mu, "kernel_size": args.kernel,
        }
        fields = {k: v for k, v in overrides.items() if v is not None}
        atk_cfg = AttackConfig(**{**_attack_dict(atk_cfg), **fields})
        z = torch.from_numpy(target.image.pixels)
        protected = ATTACKS[args.attack](clean, z, embedders, atk_cfg)
    else:
        protected = clean  # identity protection: reports asr == asr_clean

    models, thresholds, far = _calibrated_models(cfg, tc, embedders, holdout)
    report = evaluate_images(
        protected, clean, ref_imgs, target, models, thresholds,
        feature_model=holdout, cfg_hash=cfg.config_hash, out_dir=out_dir,
    )
    if args.plot:
        _plot_asr(report, out_dir / "asr.png")
    print(json.dumps(report.to_json(), indent=2, sort_keys=True))
    return EXIT_OK


def _attack_dict(cfg: AttackConfig) -> dict:
    return {
        "epsilon": cfg.epsilon, "step_size": cfg.step_size, "iterations": cfg.iterations,
        "momentum": cfg.momentum, "kernel_size": cfg.kernel_size, "kernel_sigma": cfg.kernel_sigma,
        "diversity": cfg.diversity,
    }


def _plot_asr(report, path: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ids = sorted(report.models)
    asr = [report.models[m]["asr"] for m in ids]
    clean = [report.models[m]["asr_clean"] for m in ids]
    xs = np.arange(len(ids))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(xs - 0.2, clean, width=0.4, label="clean")
    ax.bar(xs + 0.2, asr, width=0.4, label="protected")
    ax.set_xticks(xs, ids)
    ax.set_ylabel("ASR (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_calibrate(args) -> int:
    cfg = _load_config(args)
    tc = cfg.train_config()
    far = args.far if args.far is not None else float(cfg.doc["evaluation"]["far"])
    n_pairs = args.pairs if args.pairs is not None else int(cfg.doc["evaluation"]["calibration_pairs"])

    embedders = build_embedders(tc)
    holdout = build_embedders(tc, seeds=[tc.holdout_seed])[0]
    bank = synth_identity_set(
        max(8, tc.num_identities), 8, tc.resolution,
        _derive_seed(tc.seed, "calibration") % (2**31), style_domain="source",
    )
    pairs = negative_pair_bank(bank, n_pairs, seed=_derive_seed(tc.seed, "calib-pairs") % (2**31))
    records = []
    for m in list(embedders) + [holdout]:
        sims = pair_similarities(m, bank, pairs)
        vt = calibrate_threshold(m, sims, far_target=far)
        records.append({
            "model_id": vt.model_id, "tau": vt.tau,
            "far_achieved": vt.far_achieved, "far_target": vt.far_target,
        })
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        json.dump({"config_hash": cfg.config_hash, "thresholds": records}, fh, indent=2, sort_keys=True)
    print(f"wrote {len(records)} thresholds -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="makeupcloak", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the joint training loop")
    p.add_argument("--config", required=True)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--run-dir", default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--force", action="store_true", help="resume despite config-hash mismatch")
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("protect", help="apply a trained generator to a directory of images")
    p.add_argument("--config", required=True)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source-dir", required=True)
    p.add_argument("--reference", required=True, help="reference style image")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_protect)

    p = sub.add_parser("evaluate", help="score protected images (checkpoint or baseline attack)")
    p.add_argument("--config", required=True)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--attack", choices=["none", "pgd", "mifgsm", "tidim"], default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--mu", type=float, default=None)
    p.add_argument("--kernel", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory for report JSON/CSV")
    p.add_argument("--plot", action="store_true", help="emit a per-model ASR bar chart")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("calibrate", help="calibrate verification thresholds at a target FAR")
    p.add_argument("--config", required=True)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--far", type=float, default=None)
    p.add_argument("--pairs", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors already; keep that contract
        return int(exc.code) if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, CheckpointIntegrityError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc} (last checkpoint: {exc.last_checkpoint})", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
