"""Pipeline configuration: one JSON document driving every subcommand."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

from .model import TrainConfig
from .registration import RegistrationConfig


class ConfigInvalid(Exception):
    pass


@dataclass
class PipelineConfig:
    """Validated settings for an end-to-end run.

    Relative paths are resolved against the config file's directory at load
    time, so a config travels with its data. ``reference`` names the volume
    every subject's T1w is registered to; when empty, the first subject's
    T1w (manifest order) serves as the reference. ``registration_enabled``
    exists because phantom cohorts share one grid: preprocessing can then
    skip the MI search and record identity transforms.
    """

    manifest: str
    workdir: str
    reference: str = ""
    seed: int = 0
    fold_count: int = 5
    width: int = 64
    epochs: int = 10
    head_epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    validation_fraction: float = 0.1
    balance_tolerance: float = 0.1
    registration_enabled: bool = True
    registration_bins: int = 32
    registration_levels: tuple = (4, 2, 1)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.registration_levels = tuple(self.registration_levels)
        if not self.manifest:
            raise ConfigInvalid("paths.manifest is required")
        if not self.workdir:
            raise ConfigInvalid("paths.workdir is required")
        if not isinstance(self.seed, int):
            raise ConfigInvalid(f"seed must be an integer, got {self.seed!r}")
        if self.fold_count < 2:
            raise ConfigInvalid(f"fold_count must be >= 2, got {self.fold_count}")
        if self.width < 1:
            raise ConfigInvalid(f"width must be >= 1, got {self.width}")
        if self.epochs < 1 or self.head_epochs < 1:
            raise ConfigInvalid("epochs and head_epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigInvalid(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigInvalid(f"learning_rate must be > 0, got {self.learning_rate}")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigInvalid(f"betas must be two reals in [0,1), got {self.betas}")
        if self.eps <= 0:
            raise ConfigInvalid(f"eps must be > 0, got {self.eps}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigInvalid("validation_fraction must be in [0, 1)")
        if not 0.0 <= self.balance_tolerance < 1.0:
            raise ConfigInvalid("balance_tolerance must be in [0, 1)")
        if self.registration_bins < 2:
            raise ConfigInvalid(f"registration bins must be >= 2, got {self.registration_bins}")
        if not self.registration_levels or any(
            not isinstance(f, int) or f < 1 for f in self.registration_levels
        ):
            raise ConfigInvalid(
                f"registration levels must be positive integers, got {self.registration_levels}"
            )

    def train_config(self, epochs=None, seed=None) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs if epochs is None else epochs,
            seed=self.seed if seed is None else seed,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            betas=self.betas,
            eps=self.eps,
            validation_fraction=self.validation_fraction,
        )

    def registration_config(self) -> RegistrationConfig:
        return RegistrationConfig(bins=self.registration_bins, levels=self.registration_levels)

    def to_json(self) -> dict:
        return {
            "paths": {
                "manifest": self.manifest,
                "workdir": self.workdir,
                "reference": self.reference,
            },
            "seed": self.seed,
            "fold_count": self.fold_count,
            "width": self.width,
            "train": {
                "epochs": self.epochs,
                "head_epochs": self.head_epochs,
                "batch_size": self.batch_size,
                "learning_rate": self.learning_rate,
                "betas": list(self.betas),
                "eps": self.eps,
                "validation_fraction": self.validation_fraction,
            },
            "balance_tolerance": self.balance_tolerance,
            "registration": {
                "enabled": self.registration_enabled,
                "bins": self.registration_bins,
                "levels": list(self.registration_levels),
            },
        }


_TOP_KEYS = {"paths", "seed", "fold_count", "width", "train", "balance_tolerance", "registration"}
_PATH_KEYS = {"manifest", "workdir", "reference"}
_TRAIN_KEYS = {"epochs", "head_epochs", "batch_size", "learning_rate", "betas", "eps",
               "validation_fraction"}
_REG_KEYS = {"enabled", "bins", "levels"}


def _check_keys(section, given, allowed):
    unknown = set(given) - allowed
    if unknown:
        raise ConfigInvalid(f"unknown {section} keys: {sorted(unknown)}")


def config_from_json(doc: dict, base_dir: str = ".") -> PipelineConfig:
    if not isinstance(doc, dict):
        raise ConfigInvalid(f"config must be a JSON object, got {type(doc).__name__}")
    _check_keys("config", doc, _TOP_KEYS)
    paths = doc.get("paths", {})
    if not isinstance(paths, dict):
        raise ConfigInvalid("paths must be an object")
    _check_keys("paths", paths, _PATH_KEYS)
    train = doc.get("train", {})
    if not isinstance(train, dict):
        raise ConfigInvalid("train must be an object")
    _check_keys("train", train, _TRAIN_KEYS)
    reg = doc.get("registration", {})
    if not isinstance(reg, dict):
        raise ConfigInvalid("registration must be an object")
    _check_keys("registration", reg, _REG_KEYS)

    def resolve(p):
        if not p:
            return ""
        return p if os.path.isabs(p) else os.path.normpath(os.path.join(base_dir, p))

    defaults = {
        "manifest": resolve(paths.get("manifest", "")),
        "workdir": resolve(paths.get("workdir", "")),
        "reference": resolve(paths.get("reference", "")),
        "seed": doc.get("seed", 0),
        "fold_count": doc.get("fold_count", 5),
        "width": doc.get("width", 64),
        "balance_tolerance": doc.get("balance_tolerance", 0.1),
        "registration_enabled": reg.get("enabled", True),
        "registration_bins": reg.get("bins", 32),
        "registration_levels": reg.get("levels", (4, 2, 1)),
    }
    for key in _TRAIN_KEYS:
        if key in train:
            defaults[key] = train[key]
    try:
        return PipelineConfig(**defaults)
    except (TypeError, ValueError) as e:
        raise ConfigInvalid(str(e)) from e


def load_config(path) -> PipelineConfig:
    """Parse, resolve, and validate a config file.

    The manifest (and reference volume, if named) must exist on disk;
    the workdir is created by the commands that use it.
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise ConfigInvalid(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigInvalid(f"config {path} is not valid JSON: {e}") from e
    config = config_from_json(doc, base_dir=os.path.dirname(os.path.abspath(path)))
    if not os.path.isfile(config.manifest):
        raise ConfigInvalid(f"manifest does not exist: {config.manifest}")
    if config.reference and not os.path.isfile(config.reference):
        raise ConfigInvalid(f"reference volume does not exist: {config.reference}")
    return config


def save_config(config: PipelineConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
