"""Run configuration: typed dataclasses stored as a flat ``key = value`` file."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

SCHEMA_VERSION = 1
SECTION = "hipode"


@dataclass
class AugmentConfig:
    eta: float = 0.5
    selecting_rate: float = 0.2
    n_candidates: int = 10
    penalty_weight: float = 1.0
    penalty_scope: float = 1.0
    mode: str = "offline_merge"
    ablation: str = "hipode"
    generation_batch: int = 1024
    dynamics_mode: str = "mean"
    clip_reward: bool = False


@dataclass
class ModelConfig:
    cvae_hidden: int = 750
    cvae_epochs: int = 60
    hidden_units: int = 256
    value_steps: int = 3000
    dynamics_steps: int = 3000
    batch_size: int = 256
    learning_rate: float = 1e-3


@dataclass
class PolicyConfig:
    steps: int = 50_000
    batch_size: int = 256
    hidden_units: int = 256
    bc_weight: float = 2.5
    learning_rate: float = 1e-3
    eval_episodes: int = 10
    eval_seed: int = 12345


@dataclass
class RunConfig:
    env: str = "pointmass2d"
    dataset: str = ""
    dataset_kind: str = "medium"
    dataset_size: int = 5000
    discount: float = 0.99
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs/default"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    models: ModelConfig = field(default_factory=ModelConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    # -- flat view ------------------------------------------------------------

    def to_flat(self) -> dict[str, object]:
        flat: dict[str, object] = {"schema_version": SCHEMA_VERSION}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for sub in dataclasses.fields(value):
                    flat[f"{f.name}.{sub.name}"] = getattr(value, sub.name)
            else:
                flat[f.name] = value
        return flat

    def set(self, key: str, raw) -> None:
        """Assign ``key`` (``name`` or ``group.name``) from a string or typed value."""
        target, name = self, key
        if "." in key:
            group, name = key.split(".", 1)
            if not hasattr(self, group) or not dataclasses.is_dataclass(getattr(self, group)):
                raise KeyError(f"unknown config group {group!r}")
            target = getattr(self, group)
        if name not in {f.name for f in dataclasses.fields(target)}:
            raise KeyError(f"unknown config key {key!r}")
        current = getattr(target, name)
        setattr(target, name, _coerce(raw, current, key))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_flat(), sort_keys=True).encode()).hexdigest()[:16]

    def save(self, path) -> None:
        parser = configparser.ConfigParser()
        parser[SECTION] = {k: _render(v) for k, v in self.to_flat().items()}
        with open(Path(path), "w") as fh:
            parser.write(fh)

    @classmethod
    def load(cls, path) -> "RunConfig":
        parser = configparser.ConfigParser()
        if not parser.read(Path(path)):
            raise FileNotFoundError(path)
        if SECTION not in parser:
            raise ValueError(f"{path}: missing [{SECTION}] section")
        items = dict(parser[SECTION])
        version = int(items.pop("schema_version", -1))
        if version != SCHEMA_VERSION:
            raise ValueError(f"{path}: schema_version {version} is not supported (expected {SCHEMA_VERSION})")
        cfg = cls()
        for key, value in items.items():
            cfg.set(key, value)
        return cfg


def _render(value) -> str:
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    return str(value)


def _coerce(raw, current, key):
    if not isinstance(raw, str):
        return raw
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, list):
        return [int(x) for x in raw.replace(" ", "").split(",") if x]
    return raw
