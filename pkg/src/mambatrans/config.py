"""Flat dotted-key run configuration shared by the CLI commands."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .attention import ConfigError
from .detector import DetectorConfig
from .losses import CharbonnierConfig
from .model import ModelConfig
from .train import TrainConfig

# Desk-scale preset: small enough for a single CPU core, large enough to
# exercise every block. Library dataclasses keep their own defaults.
DESK_MODEL = ModelConfig(feature_channels=8, num_heads=2, state_dim=4)
DESK_TRAIN = TrainConfig(lr=1e-3, batch_size=2, max_steps=500, seed=0)


@dataclass(frozen=True)
class LossSection:
    alpha: float = CharbonnierConfig.alpha
    beta: float = CharbonnierConfig.beta
    eps: float = CharbonnierConfig.eps
    reduction: str = CharbonnierConfig.reduction
    lam: float = 5.0
    theta: float = 1.0

    def charbonnier(self) -> CharbonnierConfig:
        return CharbonnierConfig(self.alpha, self.beta, self.eps, self.reduction)


@dataclass(frozen=True)
class PretrainSection:
    steps: int = 1000
    lr: float = 3e-3
    batch_size: int = 2
    seed: int = 0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: DESK_MODEL)
    train: TrainConfig = field(default_factory=lambda: replace(DESK_TRAIN))
    loss: LossSection = field(default_factory=LossSection)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)

    SECTIONS = ("model", "train", "loss", "detector", "pretrain")

    def to_flat(self) -> dict[str, Any]:
        flat = {}
        for section in self.SECTIONS:
            for key, value in asdict(getattr(self, section)).items():
                flat[f"{section}.{key}"] = list(value) if isinstance(value, tuple) else value
        return flat

    @classmethod
    def from_flat(cls, flat: dict[str, Any], base: "RunConfig | None" = None) -> "RunConfig":
        """Apply dotted keys on top of ``base`` (default preset); unknown keys raise ConfigError."""
        base = base or cls()
        updates: dict[str, dict[str, Any]] = {s: {} for s in cls.SECTIONS}
        for key, value in flat.items():
            section, _, name = key.partition(".")
            if section not in updates or not name:
                raise ConfigError(f"unknown config key {key!r}")
            known = {f.name: f for f in fields(type(getattr(base, section)))}
            if name not in known:
                raise ConfigError(f"unknown config key {key!r}")
            if name == "betas":
                value = tuple(value)
            updates[section][name] = value
        kwargs = {}
        for section in cls.SECTIONS:
            current = getattr(base, section)
            try:
                kwargs[section] = replace(current, **updates[section]) if updates[section] else current
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {section} settings: {exc}") from exc
        return cls(**kwargs)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_flat(), sort_keys=True, indent=1) + "\n")


def parse_value(text: str) -> Any:
    """Interpret an override value as JSON when possible, otherwise as a plain string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_run_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    flat: dict[str, Any] = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a single JSON object")
        flat.update(doc)
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        flat[key.strip()] = parse_value(value)
    return RunConfig.from_flat(flat)
