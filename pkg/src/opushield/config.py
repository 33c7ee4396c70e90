"""Experiment configuration: strict JSON in, validated dataclasses out.

Every run is a pure function of its config file: all randomness flows from
the named seeds here (any omitted seed is derived from the global one and
echoed back), and the echoed config in the run directory is sufficient to
reproduce every number bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .rng import SEED_FIELDS, derive_seed

__all__ = ["ExperimentConfig", "load_config", "save_config", "preset_config"]

CONFIG_SCHEMA_VERSION = 1


def _from_dict(cls, payload: dict, where: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{where}: expected an object, got {type(payload).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in payload:
        if key not in names:
            raise ConfigError(f"{where}: unknown key {key!r}")
    try:
        return cls(**payload)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class DatasetSection:
    kind: str = "idx"  # "idx" (reads dir) | "blobs" (synthetic, for smoke runs)
    dir: str = "data"
    num_classes: int = 10
    limit_train: int | None = None
    limit_test: int | None = None
    blob_dim: int = 8  # used by kind="blobs" only
    blob_train: int = 256
    blob_test: int = 256

    def validate(self):
        if self.kind not in ("idx", "blobs"):
            raise ConfigError(f"dataset.kind must be 'idx' or 'blobs', got {self.kind!r}")
        if self.num_classes < 2:
            raise ConfigError("dataset.num_classes must be >= 2")


@dataclass
class DimsSection:
    input: int = 64
    hidden: int = 256
    feature: int = 64
    opu_in: int = 64
    opu_out: int = 512
    classes: int = 10

    def validate(self):
        for name, v in dataclasses.asdict(self).items():
            if v < 1:
                raise ConfigError(f"dims.{name} must be >= 1, got {v}")


@dataclass
class BaseTrainSection:
    eps: float = 0.1
    pgd_steps: int = 10
    pgd_step_size: float = 0.025
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.001

    def validate(self):
        if self.eps < 0:
            raise ConfigError("base_train.eps must be >= 0")
        if self.eps > 0 and not (0 < self.pgd_step_size <= self.eps):
            raise ConfigError("base_train: need 0 < pgd_step_size <= eps")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("base_train: epochs/batch_size >= 1 and lr > 0")


@dataclass
class HeadTrainSection:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    epochs: int = 10
    batch_size: int = 64
    train_biases: bool = True

    def validate(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("head_train: lr > 0, epochs/batch_size >= 1")


@dataclass
class AttackSection:
    eps: float = 0.1
    apgd_iters: int = 50
    square_iters: int = 300
    n_restarts: int = 1
    n_target_classes: int = 9
    square_p_init: float = 0.8
    n_eval: int | None = None  # cap on evaluation samples; None = full test set
    pgd_eval_steps: int = 40

    def validate(self):
        if self.eps <= 0:
            raise ConfigError("attack.eps must be > 0")
        if self.apgd_iters < 1 or self.square_iters < 0:
            raise ConfigError("attack: apgd_iters >= 1, square_iters >= 0")


@dataclass
class AblationSection:
    binarize: bool = True
    square_nonlinearity: bool = True
    obfuscated: bool = True
    train_with_dfa: bool = True


@dataclass
class RetrievalSection:
    alphas: list = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(11)])
    fractions: list = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(11)])
    n_eval: int = 512
    apgd_iters: int = 25

    def validate(self):
        for v in list(self.alphas) + list(self.fractions):
            if not (0.0 <= float(v) <= 1.0):
                raise ConfigError(f"retrieval grid value {v} outside [0,1]")
        if self.n_eval < 1 or self.apgd_iters < 1:
            raise ConfigError("retrieval: n_eval and apgd_iters must be >= 1")


@dataclass
class ExperimentConfig:
    schema_version: int = CONFIG_SCHEMA_VERSION
    preset: str = "desk"
    out_dir: str = "runs/desk"
    seeds: dict = field(default_factory=lambda: {"global": 1234})
    dataset: DatasetSection = field(default_factory=DatasetSection)
    dims: DimsSection = field(default_factory=DimsSection)
    base_train: BaseTrainSection = field(default_factory=BaseTrainSection)
    head_train: HeadTrainSection = field(default_factory=HeadTrainSection)
    attack: AttackSection = field(default_factory=AttackSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)
    calibration_samples: int = 256

    def seed(self, name: str) -> int:
        return int(self.seeds[name])

    def validate(self) -> "ExperimentConfig":
        if self.schema_version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(
                f"config schema {self.schema_version} unsupported "
                f"(this build reads {CONFIG_SCHEMA_VERSION})"
            )
        if "global" not in self.seeds:
            raise ConfigError("seeds.global is required")
        for name, value in self.seeds.items():
            if name != "global" and name not in SEED_FIELDS:
                raise ConfigError(f"seeds: unknown key {name!r}")
            if not isinstance(value, int):
                raise ConfigError(f"seeds.{name} must be an integer")
        for name in SEED_FIELDS:
            self.seeds.setdefault(name, derive_seed(self.seeds["global"], name))
        for section in (
            self.dataset,
            self.dims,
            self.base_train,
            self.head_train,
            self.attack,
            self.retrieval,
        ):
            section.validate()
        if self.calibration_samples < 1:
            raise ConfigError("calibration_samples must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "dataset": DatasetSection,
    "dims": DimsSection,
    "base_train": BaseTrainSection,
    "head_train": HeadTrainSection,
    "attack": AttackSection,
    "ablation": AblationSection,
    "retrieval": RetrievalSection,
}


def config_from_dict(payload: dict) -> ExperimentConfig:
    if not isinstance(payload, dict):
        raise ConfigError("config root must be a JSON object")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key in payload:
        if key not in known:
            raise ConfigError(f"unknown key {key!r}")
    kwargs = dict(payload)
    for name, cls in _SECTIONS.items():
        if name in kwargs:
            kwargs[name] = _from_dict(cls, kwargs[name], name)
    cfg = ExperimentConfig(**kwargs)
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(payload)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def preset_config(name: str = "desk") -> ExperimentConfig:
    """Built-in presets: `desk` (minute-scale CI) and `paper-dims` (512->8000)."""
    if name == "desk":
        cfg = ExperimentConfig(preset="desk")
    elif name == "paper-dims":
        cfg = ExperimentConfig(
            preset="paper-dims",
            dims=DimsSection(input=64, hidden=256, feature=512, opu_in=512, opu_out=8000),
        )
    else:
        raise ConfigError(f"unknown preset {name!r}")
    return cfg.validate()
