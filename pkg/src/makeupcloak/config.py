"""Run configuration: one structured YAML document drives every command.

Key paths mirror the module layout (``training.*``, ``loss.*``,
``diversity.*``, ``attack.*``, ``evaluation.*``, ``networks.*``, ``data.*``).
Unknown keys are rejected; the canonical hash of the fully-resolved document
is stamped into every artifact so runs are traceable to their exact config.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

from .attacks import AttackConfig
from .diversity import DiversityConfig
from .errors import ConfigError
from .losses import LossWeights
from .training import TrainConfig

DEFAULTS: dict = {
    "seed": 0,
    "data": {
        "resolution": 64,
        "num_identities": 16,
        "samples_per_identity": 12,
    },
    "training": {
        "epochs": 1,
        "steps_per_epoch": 200,
        "batch_size": 8,
        "learning_rate": 2e-4,
        "adam_beta1": 0.5,
        "adam_beta2": 0.999,
        "checkpoint_every": 500,
        "use_purifier": True,
        "target_identity": None,
        "ensemble_seeds": [1, 2],
        "holdout_seed": 3,
    },
    "loss": {"gan": 10.0, "reg": 10.0, "adv": 5.0, "make": 2.0, "idt": 5.0},
    "diversity": {"p": 0.5, "scale_low": 0.8, "scale_high": 1.0, "sigma": 0.05},
    "attack": {
        "epsilon": 0.1,
        "step_size": 0.01,
        "iterations": 40,
        "momentum": 1.0,
        "kernel_size": 5,
    },
    "evaluation": {"far": 0.01, "num_test_images": 50, "calibration_pairs": 2000},
    "networks": {
        "generator_channels": 32,
        "discriminator_channels": 32,
        "purifier_channels": 24,
        "purifier_blocks": 3,
        "embed_dim": 64,
        "histogram_bins": 256,
    },
}


def _merge_checked(defaults: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(defaults[key], dict) and defaults[key]:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {here} must be a mapping")
            out[key] = _merge_checked(defaults[key], value, here)
        else:
            out[key] = value
    return out


class RunConfig:
    """Fully-resolved configuration document plus its canonical content hash."""

    def __init__(self, document: dict | None = None):
        self.doc = _merge_checked(DEFAULTS, document or {})

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            try:
                doc = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config root must be a mapping: {path}")
        return cls(doc)

    def apply_overrides(self, overrides: list[str]) -> "RunConfig":
        """Apply ``key.path=value`` overrides; values parse as YAML scalars."""
        doc = copy.deepcopy(self.doc)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must look like key.path=value, got {item!r}")
            key_path, raw = item.split("=", 1)
            value = yaml.safe_load(raw)
            node = doc
            parts = key_path.split(".")
            for part in parts[:-1]:
                if part not in node or not isinstance(node[part], dict):
                    raise ConfigError(f"unknown config key: {key_path}")
                node = node[part]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key: {key_path}")
            node[parts[-1]] = value
        return RunConfig(doc)

    @property
    def config_hash(self) -> str:
        canonical = json.dumps(self.doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    @property
    def seed(self) -> int:
        return int(self.doc["seed"])

    def loss_weights(self) -> LossWeights:
        return LossWeights(**self.doc["loss"])

    def diversity(self) -> DiversityConfig:
        return DiversityConfig(**self.doc["diversity"])

    def attack(self) -> AttackConfig:
        return AttackConfig(diversity=self.diversity(), **self.doc["attack"])

    def train_config(self) -> TrainConfig:
        t = self.doc["training"]
        d = self.doc["data"]
        n = self.doc["networks"]
        return TrainConfig(
            epochs=t["epochs"],
            steps_per_epoch=t["steps_per_epoch"],
            batch_size=t["batch_size"],
            resolution=d["resolution"],
            num_identities=d["num_identities"],
            samples_per_identity=d["samples_per_identity"],
            target_identity=t["target_identity"],
            learning_rate=t["learning_rate"],
            adam_beta1=t["adam_beta1"],
            adam_beta2=t["adam_beta2"],
            loss_weights=self.loss_weights(),
            diversity=self.diversity(),
            ensemble_seeds=tuple(t["ensemble_seeds"]),
            holdout_seed=t["holdout_seed"],
            seed=self.seed,
            checkpoint_every=t["checkpoint_every"],
            use_purifier=t["use_purifier"],
            generator_channels=n["generator_channels"],
            discriminator_channels=n["discriminator_channels"],
            purifier_channels=n["purifier_channels"],
            purifier_blocks=n["purifier_blocks"],
            embed_dim=n["embed_dim"],
            histogram_bins=n["histogram_bins"],
        )
