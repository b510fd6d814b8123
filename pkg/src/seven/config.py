"""Numeric defaults, hyperparameters, and run-config handling.

Every tunable constant that is not a layer weight lives here so a run is
fully described by its resolved config file.
"""

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

# Optimizer defaults: step size from the training recipe, decay/stabilizer
# from the standard RMSProp formulation.
RMSPROP_DECAY = 0.9
RMSPROP_EPS = 1e-8
DEFAULT_LR = 0.001

# Batch-norm running-stat smoothing and variance stabilizer.
BN_MOMENTUM = 0.9
BN_EPS = 1e-5

# Probability clamp applied before logs in the pair loss; keeps a wrong
# pair at distance 0 from producing an infinite loss.
PROB_CLAMP = 1e-7

# Guard added inside the square root when differentiating un-squared
# reconstruction norms (the norm itself is left exact).
NORM_GUARD = 1e-8

# Denominator guard for the distance gradient at coincident embeddings.
DIST_GUARD = 1e-12

# Embedding width shared by all built-in architectures.
EMBED_DIM = 128

# Hidden width of the fully-connected variant.
MLP_HIDDEN = 512

# Per-dataset generative weights from the training recipe.
ALPHA_DEFAULTS = {"mnist": 0.05, "usps": 0.05, "lfw": 0.1, "sonof": 0.2}

VARIANTS = ("seven", "disseven", "genseven", "seven_mlp")
PRESETS = ("mnist", "usps", "lfw", "sonof", "sonof80", "mlp", "custom")
REG_NORMS = ("squared", "plain")
PRECISIONS = ("double", "single")

ENV_DATA_DIR = "SEVEN_DATA_DIR"


@dataclass
class HyperParams:
    """Training hyperparameters for one run."""

    alpha: float = 0.05
    beta: float = 1e-4
    tau: float = 0.5
    lr: float = DEFAULT_LR
    batch_size: int = 64
    epochs: int = 150
    seed: int = 0
    variant: str = "seven"
    preset: str = "mnist"
    reg_norm: str = "squared"
    decoder_final_dropout: bool = False
    precision: str = "double"

    def __post_init__(self):
        self.variant = self.variant.lower()
        self.preset = self.preset.lower()
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.tau < 0:
            raise ConfigError(f"tau must be >= 0, got {self.tau}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}, expected one of {PRESETS}")
        if self.reg_norm not in REG_NORMS:
            raise ConfigError(f"reg_norm must be one of {REG_NORMS}, got {self.reg_norm!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32

    @property
    def effective_alpha(self) -> float:
        """The generative weight actually applied; the label-only variant pins it to 0."""
        return 0.0 if self.variant == "disseven" else self.alpha

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown hyperparameter keys: {sorted(unknown)}")
        return cls(**d)


# Full run-config schema with defaults. Unknown keys are rejected so typos
# cannot silently fall back to defaults.
RUN_CONFIG_DEFAULTS = {
    "preset": "mnist",
    "variant": "seven",
    "alpha": 0.05,
    "beta": 1e-4,
    "tau": 0.5,
    "lr": DEFAULT_LR,
    "batch_size": 64,
    "epochs": 150,
    "seed": 0,
    "samples": None,
    "pairs": None,
    "samples_test": None,
    "pairs_test": None,
    "out_dir": None,
    "checkpoint_interval": 0,
    "reg_norm": "squared",
    "decoder_final_dropout": False,
    "strict_uniform_label_draw": False,
    "precision": "double",
    "arch": None,
}

_HP_KEYS = (
    "alpha", "beta", "tau", "lr", "batch_size", "epochs", "seed",
    "variant", "preset", "reg_norm", "decoder_final_dropout", "precision",
)


def resolve_config(user: dict) -> dict:
    """Merge a user config over the defaults, rejecting unknown keys."""
    unknown = set(user) - set(RUN_CONFIG_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = dict(RUN_CONFIG_DEFAULTS)
    cfg.update(user)
    return cfg


def load_run_config(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return resolve_config(user)


def hyperparams_from_config(cfg: dict) -> HyperParams:
    return HyperParams(**{k: cfg[k] for k in _HP_KEYS})


def write_resolved_config(cfg: dict, path: str) -> None:
    """Write the fully-expanded config next to a run's outputs."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def resolve_data_path(path: str) -> str:
    """Resolve a data path against SEVEN_DATA_DIR when it is set and the path is relative."""
    root = os.environ.get(ENV_DATA_DIR)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def derive_rng(seed: int, *parts) -> np.random.Generator:
    """Derive an independent, reproducible generator for one role of a run.

    Hashing (seed, parts) keeps every stream — weight init, dropout, pairing,
    shuffling — decoupled: consuming more of one stream never shifts another.
    """
    digest = hashlib.sha256()
    digest.update(str(int(seed)).encode())
    for part in parts:
        digest.update(b"/")
        digest.update(str(part).encode())
    entropy = int.from_bytes(digest.digest()[:16], "little")
    return np.random.default_rng(np.random.SeedSequence(entropy))
