"""JSON run-configuration files with strict key checking.

Layout::

    {
      "taxonomy": "path/to/hierarchy.json",   # optional, bundled gastric otherwise
      "dataset": {...DatasetSpec fields...},
      "model":   {"hidden": 512, "split": 256, ...},
      "loss":    {...LossConfig fields...},
      "train":   {...TrainConfig fields...},
      "output":  "out/dir"
    }

Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

from .datagen import DatasetSpec
from .losses import LossConfig
from .model import ModelConfig
from .taxonomy import Taxonomy, gastric
from .taxonomy import load as load_taxonomy
from .trainer import TrainConfig

SECTIONS = ("taxonomy", "dataset", "model", "loss", "train", "output")
MODEL_KEYS = ("hidden", "split", "proj", "attn", "integration", "aggregator")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    taxonomy: Taxonomy = field(default_factory=gastric)
    dataset: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output: Path | None = None

    def dataset_spec(self) -> DatasetSpec:
        try:
            return DatasetSpec(taxonomy=self.taxonomy, **self.dataset)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid dataset section: {exc}") from exc

    def model_config(self, dim: int, taxonomy: Taxonomy | None = None) -> ModelConfig:
        tax = taxonomy or self.taxonomy
        try:
            return ModelConfig(dim=dim, n_coarse=tax.n_coarse, n_fine=tax.n_fine, **self.model)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid model section: {exc}") from exc


def _check_keys(section: str, data, allowed) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object")
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    return data


def parse_config(raw: dict, base_dir: Path = Path(".")) -> RunConfig:
    _check_keys("<root>", raw, SECTIONS)
    cfg = RunConfig()
    if raw.get("taxonomy") is not None:
        path = base_dir / raw["taxonomy"]
        if not path.exists():
            raise ConfigError(f"taxonomy file not found: {path}")
        try:
            cfg.taxonomy = load_taxonomy(path)
        except ValueError as exc:
            raise ConfigError(f"invalid taxonomy {path}: {exc}") from exc
    dataset_keys = [f.name for f in fields(DatasetSpec) if f.name != "taxonomy"]
    cfg.dataset = dict(_check_keys("dataset", raw.get("dataset", {}), dataset_keys))
    cfg.model = dict(_check_keys("model", raw.get("model", {}), MODEL_KEYS))
    loss = _check_keys("loss", raw.get("loss", {}), [f.name for f in fields(LossConfig)])
    train = _check_keys("train", raw.get("train", {}), [f.name for f in fields(TrainConfig)])
    try:
        cfg.loss = LossConfig(**loss)
        cfg.train = TrainConfig(**train)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if raw.get("output") is not None:
        cfg.output = base_dir / raw["output"]
    cfg.dataset_spec()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(raw, path.parent)


def bundled_tiny() -> RunConfig:
    """Small-dimension fixture used when no config is given on the command line."""
    text = resources.files("hiclass_mil").joinpath("data/tiny.json").read_text(encoding="utf-8")
    return parse_config(json.loads(text))
