"""Run configuration: defaults, YAML files and command-line overrides."""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

DEFAULTS = {
    "seed": 0,
    "model": {
        "n_objects": 4,
        "n_frames": 8,
        "d": 512,
        "d_e": 512,
        "aggregator": "average",
        "use_identity_embeddings": True,
        "nonlocal_blocks": 3,
        "appearance_dim": None,
        "encoder": "coords",
    },
    "optimizer": {
        "lr": 0.01,
        "momentum": 0.9,
        "weight_decay": 0.0001,
        "epochs": 50,
        "lr_drops": [35, 45],
        "drop_factor": 10.0,
        "batch_size": 32,
    },
    "fewshot": {"epochs": 50, "lr": 0.01},
    "tracker": {"iou_min": 0.3, "max_age": 1, "min_hits": 1, "score_threshold": 0.5},
    "search": {"max_configs": 0},
    "split": {"kind": "compositional", "k": 5, "noun": "box", "threshold": 100},
    "synth": {
        "verbs": "basic",
        "nouns_per_group": [4, 4],
        "frames": 16,
        "videos_per_pair": 50,
        "noise": 1.0,
        "distractor_prob": 0.3,
    },
    "data": {"annotations": None, "split": None, "tracklets": None, "detections": None, "checkpoint": None},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, update: dict, path: str = "") -> dict:
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value
    return base


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the YAML file at ``path``, then dotted ``overrides``."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(cfg, doc)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        *parents, leaf = dotted.split(".")
        node = {leaf: value}
        for p in reversed(parents):
            node = {p: node}
        _merge(cfg, node)
    return cfg


def save_config(cfg: dict, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=True), encoding="utf-8")


def estimator_params(cfg: dict) -> dict:
    params = dict(cfg["model"])
    params.update({k: v for k, v in cfg["optimizer"].items()})
    params["lr_drops"] = tuple(params["lr_drops"])
    params["random_state"] = cfg["seed"]
    return params
