"""Experiment configuration: one JSON file, every default materialized."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .cohort import CohortConfig
from .flow import FlowConfig, FlowTrainConfig
from .latent import AEConfig


class ConfigError(ValueError):
    pass


@dataclass
class SensitivityConfig:
    sigma_grid: tuple[float, ...] = tuple(round(0.05 * k, 2) for k in range(21))
    n_pixels: int = 1024
    n_trials: int = 200
    scenario: str = "antiphase"
    seed: int = 0


@dataclass
class PredictConfig:
    horizon_years: float = 9.0
    interval_years: float = 1.0


@dataclass
class ExperimentConfig:
    cohort: CohortConfig = field(default_factory=CohortConfig)
    split_fractions: tuple[float, float, float] = (0.80, 0.05, 0.15)
    split_seed: int = 0
    ae: AEConfig = field(default_factory=AEConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    flow_train: FlowTrainConfig = field(default_factory=FlowTrainConfig)
    predict: PredictConfig = field(default_factory=PredictConfig)
    sensitivity: SensitivityConfig = field(default_factory=SensitivityConfig)
    out_dir: str = "runs/default"

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with both training seeds set to ``seed``; cohort and split are untouched."""
        cfg = from_dict(to_dict(self))
        cfg.ae.seed = seed
        cfg.flow_train.seed = seed
        return cfg


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return _build(tp, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        args = typing.get_args(tp)
        inner = args[0] if args else typing.Any
        if (len(args) == 2 and args[1] is Ellipsis) or len(args) == 1:
            return tuple(_coerce(inner, v, where) for v in value)
        if len(args) != len(value):
            raise ConfigError(f"{where}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(a, v, where) for a, v in zip(args, value))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    return value


def _build(cls, data: dict, where: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config keys at {where or 'top level'}: {unknown}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}".lstrip(".")) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from e


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data)


def to_dict(cfg) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(cfg: ExperimentConfig | dict) -> str:
    """sha256 of the canonical JSON, ignoring ``out_dir`` so moved runs hash alike."""
    d = dict(cfg if isinstance(cfg, dict) else to_dict(cfg))
    d.pop("out_dir", None)
    return hashlib.sha256(canonical_json(d).encode("utf-8")).hexdigest()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot read config {path}: {e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return from_dict(data)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def ae_sections(cfg: ExperimentConfig) -> dict:
    """The parts of the config an autoencoder checkpoint depends on."""
    d = to_dict(cfg)
    return {k: d[k] for k in ("cohort", "split_fractions", "split_seed", "ae")}

