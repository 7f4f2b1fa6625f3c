"""Experiment configuration: dataclass sections, YAML loading, seed fan-out."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

SPLIT_NAMES = ("attacker_train", "shadow_train", "recognizer_train", "eval")
RECON_KINDS = ("transrec", "resrec", "urec")
DEFENSES = ("advface", "random", "dp", "none")


class ConfigError(ValueError):
    """Raised when a configuration contract fails before any compute starts."""


@dataclass
class DataConfig:
    root: str = "data/faces"
    image_size: int = 64
    fractions: tuple[float, float, float, float] = (0.3, 0.3, 0.25, 0.15)
    pair_file: str = ""          # TSV of (path_a, path_b, same); built from eval split if empty
    num_pos_pairs: int = 300
    num_neg_pairs: int = 300


@dataclass
class RecognizerConfig:
    widths: tuple[int, int, int, int] = (16, 32, 64, 128)
    strides: tuple[int, int, int, int, int, int] = (2, 1, 1, 2, 1, 2)
    split_index: int = 3
    embedding_dim: int = 64
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    lr_decay: float = 0.94
    triplet_margin: float = 0.2
    triplet_weight: float = 1.0
    ids_per_batch: int = 8       # P of the P*K triplet-mining sampler
    imgs_per_id: int = 4         # K


@dataclass
class ReconConfig:
    arch: str = "resrec"
    width: int = 32
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-4
    holdout_fraction: float = 0.1


@dataclass
class ProtectionConfig:
    """Knobs for adversarial-feature generation and the baseline defenses.

    epsilon is the radius of the L-inf ball the perturbation is projected onto
    (projection="ball"); projection="step" instead bounds each iteration's
    displacement by epsilon and never projects, so the total drift can reach
    iterations * epsilon.
    """

    alpha: float = 0.2
    epsilon: float = 0.2
    iterations: int = 40
    norm_order: str = "inf"
    projection: str = "ball"     # "ball" | "step"
    bn_batch_stats: bool = True
    batch_size: int = 32
    # baseline knobs
    random_bound: float = 0.2
    dp_budget: float = 1.0
    dp_noise_bound: float = 0.2

    def validate(self) -> None:
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.norm_order != "inf":
            raise ConfigError(f"only norm_order='inf' is supported, got {self.norm_order!r}")
        if self.projection not in ("ball", "step"):
            raise ConfigError(f"projection must be 'ball' or 'step', got {self.projection!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.dp_budget <= 0:
            raise ConfigError(f"dp_budget must be > 0, got {self.dp_budget}")
        if self.random_bound < 0:
            raise ConfigError(f"random_bound must be >= 0, got {self.random_bound}")


@dataclass
class EvalConfig:
    folds: int = 10
    protect_both_pair_sides: bool = True
    srra_enroll_per_identity: int = 3
    srra_same_image: bool = False   # enroll the vaulted image itself instead of a held-out one
    offline_epochs: int = 10
    offline_lr: float = 1e-4


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    recognizer: RecognizerConfig = field(default_factory=RecognizerConfig)
    recon: ReconConfig = field(default_factory=ReconConfig)
    protection: ProtectionConfig = field(default_factory=ProtectionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 7
    out_dir: str = "runs/desk"

    def validate(self) -> None:
        """Check every cross-field contract before any training starts."""
        if abs(sum(self.data.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {self.data.fractions}")
        if len(self.data.fractions) != len(SPLIT_NAMES):
            raise ConfigError(f"expected {len(SPLIT_NAMES)} split fractions")
        if any(f < 0 for f in self.data.fractions):
            raise ConfigError("split fractions must be nonnegative")
        if self.data.image_size < 8 or self.data.image_size % 4 != 0:
            raise ConfigError(f"image_size must be a multiple of 4 and >= 8, got {self.data.image_size}")
        if not 1 <= self.recognizer.split_index <= 5:
            raise ConfigError(f"split_index must be in [1, 5], got {self.recognizer.split_index}")
        if self.recon.arch not in RECON_KINDS:
            raise ConfigError(f"recon arch must be one of {RECON_KINDS}, got {self.recon.arch!r}")
        if self.eval.folds < 1:
            raise ConfigError(f"folds must be >= 1, got {self.eval.folds}")
        self.protection.validate()


_SECTIONS = {
    "data": DataConfig,
    "recognizer": RecognizerConfig,
    "recon": ReconConfig,
    "protection": ProtectionConfig,
    "eval": EvalConfig,
}


def _from_dict(cls, raw: dict):
    if not isinstance(raw, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(raw).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        if name in _SECTIONS:
            kwargs[name] = _from_dict(_SECTIONS[name], value)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    """Load an ExperimentConfig from YAML; `overrides` (dotted keys) win over file values."""
    raw = yaml.safe_load(Path(path).read_text()) or {}
    cfg = _from_dict(ExperimentConfig, raw)
    if overrides:
        for key, value in overrides.items():
            _apply_override(cfg, key, value)
    cfg.validate()
    return cfg


def _apply_override(cfg, dotted: str, value) -> None:
    obj = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        obj = getattr(obj, part)
    leaf = parts[-1]
    if not hasattr(obj, leaf):
        raise ConfigError(f"unknown config key {dotted!r}")
    current = getattr(obj, leaf)
    if isinstance(current, tuple) and isinstance(value, (list, tuple)):
        value = tuple(value)
    setattr(obj, leaf, value)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(asdict(cfg), sort_keys=False))


def config_hash(cfg) -> str:
    """Stable short hash over the config contents, for run provenance."""
    blob = json.dumps(asdict(cfg), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def stage_seed(master_seed: int, label: str) -> int:
    """Fan one master seed out to a per-stage seed by labeled hashing.

    Stages can rerun independently and reproducibly: the derived seed depends
    only on (master_seed, label).
    """
    digest = hashlib.blake2s(f"{master_seed}:{label}".encode(), digest_size=4).digest()
    return int.from_bytes(digest, "little") % (2**31)
