"""Run configuration: nested JSON, dotted overrides, strict keys."""
from __future__ import annotations

import copy
import json
import os
from pathlib import Path
from typing import Any

from .errors import ConfigurationError, InputError
from .inference import InferenceConfig
from .synth import SceneSpec
from .trainer import TrainConfig


def default_run_config() -> dict:
    return {
        "train": TrainConfig().to_dict(),
        "inference": InferenceConfig().__dict__.copy(),
        "data": {"train_dir": None, "val_dir": None, "points_file": None},
        "synth": SceneSpec().__dict__.copy(),
        "workers": 1,
    }


def _merge(base: dict, update: dict, path: str = "") -> dict:
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigurationError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"config key {where!r} must be an object")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value
    return base


def parse_value(text: str) -> Any:
    """JSON literal when it parses (numbers, booleans, null, lists), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(config: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigurationError(f"override {assignment!r} is not of the form key.path=value")
    dotted, raw = assignment.split("=", 1)
    keys = dotted.strip().split(".")
    node = config
    for i, key in enumerate(keys):
        if not isinstance(node, dict) or key not in node:
            raise ConfigurationError(f"unknown config key {'.'.join(keys[: i + 1])!r}")
        if i == len(keys) - 1:
            if isinstance(node[key], dict):
                raise ConfigurationError(f"config key {dotted!r} is a section, not a value")
            node[key] = parse_value(raw)
        else:
            node = node[key]


def load_run_config(path: str | Path | None = None, overrides: list[str] | None = None,
                    env: dict | None = None) -> dict:
    """Defaults, then the JSON file, then ``key.path=value`` overrides, then ``PFCN_SEED``."""
    cfg = default_run_config()
    if path is not None:
        p = Path(path)
        try:
            doc = json.loads(p.read_text())
        except FileNotFoundError:
            raise InputError(f"{p}: config file not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigurationError(f"{p}: top level must be an object")
        _merge(cfg, doc)
    for o in overrides or []:
        apply_override(cfg, o)
    env = os.environ if env is None else env
    if env.get("PFCN_SEED"):
        try:
            cfg["train"]["seed"] = int(env["PFCN_SEED"])
        except ValueError:
            raise ConfigurationError(f"PFCN_SEED must be an integer, got {env['PFCN_SEED']!r}") from None
    train_config(cfg)
    inference_config(cfg)
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(**copy.deepcopy(cfg["train"]))
    except TypeError as exc:
        raise ConfigurationError(f"train: {exc}") from None


def inference_config(cfg: dict) -> InferenceConfig:
    try:
        return InferenceConfig(**cfg["inference"])
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"inference: {exc}") from None


def scene_spec(cfg: dict) -> SceneSpec:
    return SceneSpec(**cfg["synth"])


def write_effective_config(cfg: dict, directory: str | Path) -> Path:
    path = Path(directory) / "effective_config.json"
    path.write_text(json.dumps(cfg, indent=1, default=list))
    return path
