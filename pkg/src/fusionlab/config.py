"""Experiment configuration: one YAML or JSON file with six sections, unknown keys rejected."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .data import SyntheticDatasetSpec
from .training import TrainConfig
from .vit import ViTConfig


class ConfigError(ValueError):
    """The configuration file is unreadable, has unknown keys, or holds invalid values."""


@dataclass
class AttackSection:
    kind: str = "dynamic"
    layers: tuple[int, ...] = (1, 2, 3, 4, 5)
    n_prompts: int = 8
    epsilon: float = 4 / 255
    target_class: int = 0
    rank: int = 8
    init_scale: float = 1.0
    hidden_bias: float = 0.0


@dataclass
class TrainSection:
    epochs: int = 30
    batch: int = 16
    lr_phi: float = 2e-3
    lr_delta: float = 1e-2
    weight_decay: float = 0.0
    l1_shrink: float = 0.0
    pretrain_epochs: int = 20
    pretrain_lr: float = 3e-3
    label_smoothing: float = 0.3


@dataclass
class TheorySection:
    p: int = 20
    k_shared: int = 4
    ratios: tuple[float, ...] = (1.0, 2.0, 5.0, 10.0)
    seeds: int = 50
    n_rows: int = 40
    lam: float = 4.0


@dataclass
class DefenseSection:
    nc_steps: int = 200
    lambda_l1: float = 0.01


@dataclass
class ExperimentConfig:
    model: ViTConfig = field(default_factory=ViTConfig)
    data: SyntheticDatasetSpec = field(default_factory=SyntheticDatasetSpec)
    attack: AttackSection = field(default_factory=AttackSection)
    train: TrainSection = field(default_factory=TrainSection)
    theory: TheorySection = field(default_factory=TheorySection)
    defense: DefenseSection = field(default_factory=DefenseSection)
    seed: int = 0

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed, data=replace(self.data, seed=seed))

    def with_backend(self, kind: str) -> "ExperimentConfig":
        return replace(self, attack=replace(self.attack, kind=kind))

    def train_config(self) -> TrainConfig:
        a, t = self.attack, self.train
        return TrainConfig(epochs=t.epochs, batch=t.batch, lr_phi=t.lr_phi, lr_delta=t.lr_delta,
                           epsilon=a.epsilon, target_class=a.target_class, kind=a.kind, seed=self.seed,
                           layers=tuple(a.layers), n_prompts=a.n_prompts, rank=a.rank,
                           weight_decay=t.weight_decay, l1_shrink=t.l1_shrink)

    def attack_kwargs(self) -> dict:
        """Initialisation knobs that only the dynamic generator takes."""
        if self.attack.kind != "dynamic":
            return {}
        return {"init_scale": self.attack.init_scale, "hidden_bias": self.attack.hidden_bias}

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = _plain(asdict(value)) if hasattr(value, "__dataclass_fields__") else value
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_SECTIONS = {
    "model": ViTConfig,
    "data": SyntheticDatasetSpec,
    "attack": AttackSection,
    "train": TrainSection,
    "theory": TheorySection,
    "defense": DefenseSection,
}


def _coerce(section: str, name: str, default, value):
    where = f"{section}.{name}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or not value:
            raise ConfigError(f"{where}: expected a non-empty list, got {value!r}")
        kind = type(default[0]) if default else float
        return tuple(_coerce(section, name, kind(0), v) for v in value)
    return value


def from_dict(raw: dict) -> ExperimentConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(raw) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    base = ExperimentConfig()
    seed = raw.get("seed", base.seed)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    built = {}
    for section, cls in _SECTIONS.items():
        values = raw.get(section) or {}
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        default = getattr(base, section)
        known = {f.name for f in fields(cls)}
        bad = set(values) - known
        if bad:
            raise ConfigError(f"unknown keys in {section}: {sorted(bad)}")
        kwargs = {k: _coerce(section, k, getattr(default, k), v) for k, v in values.items()}
        try:
            built[section] = replace(default, **kwargs)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{section}: {exc}") from None
    cfg = ExperimentConfig(**built, seed=seed)
    if "seed" not in (raw.get("data") or {}):
        cfg = replace(cfg, data=replace(cfg.data, seed=seed))
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    try:
        tc = cfg.train_config()
        tc.validate(cfg.model.classes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if any(not 1 <= l <= cfg.model.depth for l in cfg.attack.layers):
        raise ConfigError(f"attack.layers {cfg.attack.layers} outside 1..{cfg.model.depth}")
    if cfg.attack.n_prompts < 1 or cfg.attack.rank < 1:
        raise ConfigError("attack.n_prompts and attack.rank must be >= 1")
    th = cfg.theory
    if not 0 <= th.k_shared <= th.p or th.seeds < 1 or th.lam <= 0 or min(th.ratios) < 1:
        raise ConfigError("theory: need 0 <= k_shared <= p, seeds >= 1, lam > 0, ratios >= 1")
    if cfg.defense.nc_steps < 1 or cfg.defense.lambda_l1 < 0:
        raise ConfigError("defense: nc_steps >= 1 and lambda_l1 >= 0 required")


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return from_dict(raw)
