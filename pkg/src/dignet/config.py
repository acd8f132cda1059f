"""RunConfig loading: JSON document validated against the packaged schema."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Optional

import jsonschema

from .data import Dataset, SyntheticSpec, load_dataset, make_dataset
from .model import NetworkConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """The run configuration is missing, unparsable or fails validation."""


@lru_cache(maxsize=None)
def run_config_schema() -> dict:
    text = resources.files("dignet").joinpath("schemas/run_config.schema.json").read_text()
    return json.loads(text)


@dataclass
class RunConfig:
    network: NetworkConfig
    train: TrainConfig
    data: dict
    seed: int = 0
    epochs: int = 1
    out: Optional[str] = None
    base_dir: str = "."
    raw: dict = field(default_factory=dict)

    def snapshot(self) -> dict:
        """What a checkpoint records; eval refuses checkpoints whose snapshot differs."""
        return {"network": self.network.to_dict(), "train": self.train.to_dict()}

    def load_data(self) -> Dataset:
        if "dir" in self.data:
            path = self.data["dir"]
            if not os.path.isabs(path):
                path = os.path.join(self.base_dir, path)
            return load_dataset(path)
        spec = SyntheticSpec.from_dict(self.data["synthetic"])
        return make_dataset(spec, self.data["train"], self.data["val"])


def parse_run_config(doc: dict, base_dir: str = ".") -> RunConfig:
    try:
        jsonschema.validate(doc, run_config_schema())
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid run config at {loc}: {exc.message}") from None
    try:
        network = NetworkConfig.from_dict(doc.get("network", {}))
        train = TrainConfig(**doc.get("train", {}))
        if "synthetic" in doc["data"]:
            SyntheticSpec.from_dict(doc["data"]["synthetic"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid run config: {exc}") from None
    return RunConfig(network, train, doc["data"], doc.get("seed", 0), doc.get("epochs", 1),
                     doc.get("out"), base_dir, doc)


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return parse_run_config(doc, os.path.dirname(os.path.abspath(path)))
