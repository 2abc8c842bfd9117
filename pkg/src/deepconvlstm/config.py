"""Experiment configuration: defaults, recipe profiles, file loading and overrides.

The resolved configuration is a plain nested dict so it can be embedded
verbatim in every output file.  Precedence: command-line flag > config file >
profile > defaults.
"""
from __future__ import annotations

import copy
from pathlib import Path
from typing import Any

import yaml

from .data import window_geometry
from .errors import ConfigError
from .model import ModelConfig
from .train import TrainRunConfig

DEFAULTS: dict[str, Any] = {
    "profile": "default",
    "data": {
        "csv": None,
        "sampling_rate": 50.0,
        "synthetic": {"num_subjects": 4, "num_classes": 3, "channels": 3,
                      "duration_seconds": 60.0, "segment_seconds": 20.0, "seed": 0},
        "normalization": "zscore",
        "label_mode": "last",
        "holdout_subject": None,
        "class_names": None,
    },
    "window": {"seconds": 1.0, "overlap": 0.6},
    "model": {"num_conv_layers": 4, "num_filters": 64, "kernel_len": 11,
              "lstm_layers": 1, "hidden_units": 128, "dropout_p": 0.5},
    "train": {"epochs": 30, "batch_size": 100, "lr": 1e-4, "weight_decay": 1e-6,
              "decoupled_weight_decay": False, "shuffle": True, "loss_weighting": "inverse_frequency"},
    "seed": 1,
    "grid": {"hidden_units": [128, 256, 512, 1024], "lstm_layers": [1, 2], "seeds": [1, 2, 3, 4, 5]},
    "bench": {"hidden_units": [128, 1024], "repetitions": 5, "warmup": 1,
              "batches_per_epoch": 2, "batch_size": 32},
    "formats": ["csv", "structured"],
}

# Recipe variants keep the kernel/window ratio of the 50 Hz default (11/50):
# 100 Hz data doubles the kernel; the Opportunity-style setup uses 0.5 s
# windows with 50% overlap at 30 Hz (15 samples), so the kernel shrinks to 3.
PROFILES: dict[str, dict[str, Any]] = {
    "default": {},
    "hhar": {"data": {"sampling_rate": 100.0}, "model": {"kernel_len": 21}},
    "opportunity": {"data": {"sampling_rate": 30.0}, "window": {"seconds": 0.5, "overlap": 0.5},
                    "model": {"kernel_len": 3}},
}

# settings that affect where/how fast a run executes, not its results
RUNTIME_KEYS = ("out", "jobs", "resume")


def deep_merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in out and not (path == "" and key in RUNTIME_KEYS):
            raise ConfigError(where, "unknown configuration field")
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_file(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError("config", f"{path} must contain a mapping at top level")
    return data


def resolve(file_config: dict | None = None, overrides: dict | None = None) -> dict:
    file_config = file_config or {}
    overrides = overrides or {}
    profile = overrides.get("profile") or file_config.get("profile") or DEFAULTS["profile"]
    if profile not in PROFILES:
        raise ConfigError("profile", f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = deep_merge(DEFAULTS, PROFILES[profile])
    cfg = deep_merge(cfg, file_config)
    cfg = deep_merge(cfg, overrides)
    cfg["profile"] = profile
    validate(cfg)
    return cfg


def set_path(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


def snapshot(cfg: dict) -> dict:
    """The resolved config minus execution-only settings."""
    return {k: v for k, v in cfg.items() if k not in RUNTIME_KEYS}


def window_samples(cfg: dict) -> int:
    return window_geometry(float(cfg["data"]["sampling_rate"]), float(cfg["window"]["seconds"]),
                           float(cfg["window"]["overlap"]))[0]


def model_config(cfg: dict, num_classes: int, channels: int) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(num_classes=num_classes, channels=channels, window_samples=window_samples(cfg),
                       num_conv_layers=m["num_conv_layers"], num_filters=m["num_filters"],
                       kernel_len=m["kernel_len"], lstm_layers=m["lstm_layers"],
                       hidden_units=m["hidden_units"], dropout_p=float(m["dropout_p"]))


def train_config(cfg: dict, seed: int | None = None) -> TrainRunConfig:
    t = cfg["train"]
    return TrainRunConfig(epochs=t["epochs"], batch_size=t["batch_size"],
                          seed=cfg["seed"] if seed is None else seed, shuffle=bool(t["shuffle"]),
                          loss_weighting=t["loss_weighting"], lr=float(t["lr"]),
                          weight_decay=float(t["weight_decay"]),
                          decoupled_weight_decay=bool(t["decoupled_weight_decay"]))


def _positive_int_list(cfg, section, key):
    values = cfg[section][key]
    if not isinstance(values, list) or not values:
        raise ConfigError(f"{section}.{key}", "must be a non-empty list")
    for v in values:
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise ConfigError(f"{section}.{key}", f"entries must be positive integers, got {v!r}")


def validate(cfg: dict) -> None:
    """Check every downstream invariant that does not need the data itself."""
    d = cfg["data"]
    try:
        rate = float(d["sampling_rate"])
    except (TypeError, ValueError):
        raise ConfigError("sampling_rate", f"must be a number, got {d['sampling_rate']!r}") from None
    if rate <= 0:
        raise ConfigError("sampling_rate", f"must be positive, got {rate}")
    if d["normalization"] not in ("zscore", "minmax", "none"):
        raise ConfigError("normalization", f"must be zscore, minmax or none, got {d['normalization']!r}")
    if d["label_mode"] not in ("last", "majority"):
        raise ConfigError("label_mode", f"must be 'last' or 'majority', got {d['label_mode']!r}")
    overlap = cfg["window"]["overlap"]
    if not isinstance(overlap, (int, float)) or not 0.0 <= overlap < 1.0:
        raise ConfigError("overlap", f"must lie in [0, 1), got {overlap!r}")
    if not isinstance(cfg["window"]["seconds"], (int, float)) or cfg["window"]["seconds"] <= 0:
        raise ConfigError("window_seconds", f"must be positive, got {cfg['window']['seconds']!r}")
    model_config(cfg, num_classes=2, channels=1)
    train_config(cfg)
    for key in ("hidden_units", "lstm_layers", "seeds"):
        _positive_int_list(cfg, "grid", key)
    if any(v not in (1, 2) for v in cfg["grid"]["lstm_layers"]):
        raise ConfigError("grid.lstm_layers", "entries must be 1 or 2")
    _positive_int_list(cfg, "bench", "hidden_units")
    for key in ("repetitions", "batches_per_epoch", "batch_size"):
        v = cfg["bench"][key]
        if not isinstance(v, int) or v < 1:
            raise ConfigError(f"bench.{key}", f"must be a positive integer, got {v!r}")
    if not isinstance(cfg["bench"]["warmup"], int) or cfg["bench"]["warmup"] < 0:
        raise ConfigError("bench.warmup", "must be a non-negative integer")
    fmts = cfg["formats"]
    if not fmts or any(f not in ("csv", "structured") for f in fmts):
        raise ConfigError("format", f"must be a subset of csv/structured, got {fmts!r}")
    syn = d["synthetic"]
    for key in ("num_subjects", "num_classes", "channels", "duration_seconds", "segment_seconds"):
        if not isinstance(syn[key], (int, float)) or syn[key] <= 0:
            raise ConfigError(f"synthetic.{key}", f"must be positive, got {syn[key]!r}")
