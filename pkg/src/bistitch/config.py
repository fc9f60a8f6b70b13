"""YAML configuration: dataset layout, model sizes and training settings.

One file drives all commands; see README for the schema. Unknown keys are
rejected so typos fail loudly instead of silently using defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import yaml

from .losses import LossWeights
from .train import TrainConfig

_AXIS_LETTERS = {"x": 0, "y": 1, "z": 2}


class ConfigError(ValueError):
    """Invalid or malformed configuration."""


@dataclass
class ContactSettings:
    speed_threshold: float = 0.2
    height_threshold: float = 8.0
    joints: list[str] | None = None  # explicit joint names; None = resolve by name


@dataclass
class DatasetConfig:
    bvh_dir: str = "."
    train_patterns: list[str] = field(default_factory=list)
    test_patterns: list[str] = field(default_factory=list)
    window: int = 50
    offset: int = 20
    frame_rate: float = 30.0
    units: str = "centimeters"
    ground_plane: tuple[int, int] = (0, 2)
    up_axis: int = 1
    contacts: ContactSettings = field(default_factory=ContactSettings)


@dataclass
class AppConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: dict = field(default_factory=dict)  # GeneratorConfig overrides
    train: TrainConfig = field(default_factory=TrainConfig)


def _build(cls, data: dict, context: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{context}: {exc}") from exc


def _axis(value, context: str) -> int:
    if isinstance(value, str):
        try:
            return _AXIS_LETTERS[value.lower()]
        except KeyError:
            raise ConfigError(f"{context}: unknown axis {value!r}") from None
    if value in (0, 1, 2):
        return int(value)
    raise ConfigError(f"{context}: axis must be x/y/z or 0/1/2, got {value!r}")


def load_config(path) -> AppConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(raw) - {"dataset", "model", "train"}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")

    dataset_raw = dict(raw.get("dataset") or {})
    contacts_raw = dict(dataset_raw.pop("contacts", {}) or {})
    if "ground_plane" in dataset_raw:
        axes = dataset_raw["ground_plane"]
        if not isinstance(axes, (list, tuple)) or len(axes) != 2:
            raise ConfigError("dataset.ground_plane must list two axes")
        dataset_raw["ground_plane"] = tuple(_axis(a, "dataset.ground_plane") for a in axes)
    if "up_axis" in dataset_raw:
        dataset_raw["up_axis"] = _axis(dataset_raw["up_axis"], "dataset.up_axis")
    dataset = _build(DatasetConfig, dataset_raw, "dataset")
    dataset.contacts = _build(ContactSettings, contacts_raw, "dataset.contacts")

    model = dict(raw.get("model") or {})

    train_raw = dict(raw.get("train") or {})
    weights_raw = dict(train_raw.pop("weights", {}) or {})
    train_cfg = _build(TrainConfig, train_raw, "train")
    train_cfg.weights = _build(LossWeights, weights_raw, "train.weights")
    return AppConfig(dataset=dataset, model=model, train=train_cfg)
