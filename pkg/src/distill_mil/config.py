"""Experiment configuration: one YAML file with a section per component.

Precedence, lowest to highest: built-in defaults, the file, environment
variables named ``DISTILL_MIL__<SECTION>__<KEY>`` (values parsed as YAML
scalars), then command-line flags. The resolved configuration is written next
to every run's outputs and its hash is embedded in them.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from pathlib import Path

import yaml

from .experiments import ModelConfigs, SweepConfig
from .model import PRESETS, FeatureExtractorSpec
from .types import ConfigError, DistillConfig, TrainConfig, VatConfig

ENV_PREFIX = "DISTILL_MIL__"

def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def _section(cls) -> dict:
    return {f.name: _plain(f.default) for f in dataclasses.fields(cls)}


DEFAULTS = {
    "dataset": {
        "kind": "mnist_bags",  # mnist_bags | colon_dir | manifest
        "num_bags": 100,
        "mean_bag_size": 10,
        "bag_size_variance": 5.0,
        "positive_digit": 9,
        "seed": 0,
        "digit_source": "mnist5k",
        "digit_path": None,
        "root": None,
        "manifest": None,
        "patch_size": 27,
        "stride": None,
        "white_threshold": 0.9,
        "white_fraction_cutoff": 0.75,
    },
    "model": {"extractor": "lenet5", "attention_dim": 128},
    "vat": {**_section(VatConfig), "delta": 3.0},  # l2 radius for 28x28 digits in [0, 1]
    "distill": _section(DistillConfig),
    "training": {
        "optimizer": "rmsprop",
        "lr": 1e-3,
        "batch_size": 1,
        "epochs": 20,
        "patience": None,
        "weight_decay": 0.0,
        "seeds": [0],
        "folds": 5,
        "test_fold": 0,
        "student_epochs": None,
        "student_lr": None,
    },
    "sweep": _section(SweepConfig),
    "output_dir": "runs/default",
}

_SECTIONS = [k for k, v in DEFAULTS.items() if isinstance(v, dict)]


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict) and k in _SECTIONS:
            if not isinstance(v, dict):
                raise ConfigError(f"section {k!r} must be a mapping")
            out[k] = _merge(base[k], v, f"{k}.")
        else:
            out[k] = v
    return out


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    over: dict = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX):].lower().split("__")
        value = yaml.safe_load(raw)
        if len(parts) == 1:
            over[parts[0]] = value
        elif len(parts) == 2:
            over.setdefault(parts[0], {})[parts[1]] = value
        else:
            raise ConfigError(f"bad override variable {name}")
    return over


def load_config(path=None, environ=None, overrides: dict | None = None) -> dict:
    """Resolve defaults, file, environment and explicit overrides into one dict."""
    raw: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    cfg = _merge(DEFAULTS, raw)
    cfg = _merge(cfg, env_overrides(environ))
    if overrides:
        cfg = _merge(cfg, overrides)
    build_model_configs(cfg)  # validates every section
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)


def extractor_spec(model_section: dict) -> FeatureExtractorSpec:
    ext = model_section["extractor"]
    if isinstance(ext, str):
        if ext not in PRESETS:
            raise ConfigError(f"unknown extractor {ext!r}; choose from {sorted(PRESETS)} or give a mapping")
        return PRESETS[ext]
    try:
        return FeatureExtractorSpec.from_dict(ext)
    except TypeError as e:
        raise ConfigError(f"bad extractor mapping: {e}") from None


def _build(cls, section: dict, name: str):
    try:
        kw = dict(section)
        for key in ("noise_count_range", "value_range"):
            if kw.get(key) is not None:
                kw[key] = tuple(kw[key])
        return cls(**kw)
    except TypeError as e:
        raise ConfigError(f"section {name!r}: {e}") from None


def train_config(cfg: dict, seed: int, stage: str = "teacher") -> TrainConfig:
    t = cfg["training"]
    epochs, lr = t["epochs"], t["lr"]
    if stage == "student":
        epochs = t["student_epochs"] if t["student_epochs"] is not None else epochs
        lr = t["student_lr"] if t["student_lr"] is not None else lr
    return _build(TrainConfig, {"optimizer": t["optimizer"], "lr": lr, "batch_size": t["batch_size"],
                                "epochs": epochs, "patience": t["patience"],
                                "weight_decay": t["weight_decay"], "seed": seed}, "training")


def build_model_configs(cfg: dict, seed: int = 0) -> ModelConfigs:
    if not cfg["training"]["seeds"]:
        raise ConfigError("training.seeds must list at least one seed")
    sweep_config(cfg)
    return ModelConfigs(
        spec=extractor_spec(cfg["model"]),
        attention_dim=int(cfg["model"]["attention_dim"]),
        vat=_build(VatConfig, cfg["vat"], "vat"),
        distill=_build(DistillConfig, cfg["distill"], "distill"),
        teacher_train=train_config(cfg, seed, "teacher"),
        student_train=train_config(cfg, seed, "student"),
    )


def sweep_config(cfg: dict) -> SweepConfig:
    s = dict(cfg["sweep"])
    for key in ("bag_counts", "bag_sizes", "seeds"):
        s[key] = tuple(s[key])
    return _build(SweepConfig, s, "sweep")
