"""Layered run configuration: built-in defaults <- YAML file <- CLI overrides.

The fully resolved document is hashed (sha256, 16 hex chars) and that hash
is embedded in every artifact a run writes, so any output can be traced to
the exact configuration that produced it.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Optional

import yaml

from .errors import ConfigError
from .pretrain import PretrainConfig
from .prompt import PromptTuneConfig
from .synth import SynthSpec
from .transr import TransRConfig

ENV_CONFIG = "URBANREP_CONFIG"

DEFAULTS: dict[str, Any] = {
    "seed": 7,
    "threads": 1,
    "synth": {
        "rows": 3,
        "cols": 3,
        "poi_range": [6, 12],
        "road_range": [2, 5],
        "junction_range": [2, 5],
        "n_poi_categories": 6,
        "n_brands": 5,
        "n_road_categories": 3,
        "n_junction_categories": 3,
        "brand_fraction": 0.6,
        "intervals": 24,
        "total_trips": 5000,
        "image_dim": 512,
        "images_per_region": [1, 3],
        "image_noise": 0.05,
        "task_noise": 0.05,
        "tasks": ["activity", "spending", "infrastructure"],
    },
    "transr": {
        "dim": 144,
        "margin": 1.0,
        "epochs": 100,
        "lr": 0.01,
        "negatives": 1,
        "projection_noise": 0.01,
    },
    "pretrain": {
        "dim": 144,
        "heads": 4,
        "layers": 2,
        "margin": 2.0,
        "fusion_weight": 0.01,
        "temperature": 0.1,
        "lr": 0.001,
        "weight_decay": 1.0e-6,
        "epochs": 100,
        "node_cap": 50,
        "spatial": True,
        "imagery": True,
        "flow": True,
        "fusion": True,
        "init": "transr",
        "optimizer": "adam",
        "resample_triplets": True,
        "normalize_contrastive": False,
        "fusion_only": False,
    },
    "prompt": {
        "sizes": [6, 8],
        "steps": 2,
        "walk_weights": None,
        "epochs": 200,
        "lr": 0.001,
        "weight_decay": 0.0,
        "node_cap": 50,
        "soft_adjacency": True,
        "keep_best": True,
    },
    "eval": {
        "k": 5,
        "ratio": 0.10,
        "repeats": 10,
        "alpha": 1.0,
        "standardize": True,
    },
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if key in out and isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_run_config(path: Optional[str | Path] = None) -> dict:
    """Defaults merged with an optional YAML document (or $URBANREP_CONFIG)."""
    if path is None:
        path = os.environ.get(ENV_CONFIG) or None
    config = json.loads(json.dumps(DEFAULTS))  # deep copy
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file must hold a mapping: {path}")
        config = _deep_merge(config, loaded)
    return config


def _parse_value(raw: str) -> Any:
    try:
        return yaml.safe_load(raw)
    except yaml.YAMLError:
        return raw


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings on top of the config document."""
    out = json.loads(json.dumps(config))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        dotted, _, raw = item.partition("=")
        keys = dotted.strip().split(".")
        node = out
        for key in keys[:-1]:
            if key not in node or not isinstance(node[key], dict):
                raise ConfigError(f"unknown config section {dotted!r}")
            node = node[key]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[keys[-1]] = _parse_value(raw.strip())
    return out


def run_hash(config: dict) -> str:
    payload = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def _pair(value) -> tuple[int, int]:
    a, b = value
    return int(a), int(b)


def synth_spec(config: dict) -> SynthSpec:
    c = config["synth"]
    return SynthSpec(
        rows=int(c["rows"]),
        cols=int(c["cols"]),
        poi_range=_pair(c["poi_range"]),
        road_range=_pair(c["road_range"]),
        junction_range=_pair(c["junction_range"]),
        n_poi_categories=int(c["n_poi_categories"]),
        n_brands=int(c["n_brands"]),
        n_road_categories=int(c["n_road_categories"]),
        n_junction_categories=int(c["n_junction_categories"]),
        brand_fraction=float(c["brand_fraction"]),
        intervals=int(c["intervals"]),
        total_trips=int(c["total_trips"]),
        image_dim=int(c["image_dim"]),
        images_per_region=_pair(c["images_per_region"]),
        image_noise=float(c["image_noise"]),
        task_noise=float(c["task_noise"]),
        tasks=tuple(c["tasks"]),
    )


def transr_config(config: dict) -> TransRConfig:
    c = config["transr"]
    return TransRConfig(
        dim=int(c["dim"]),
        margin=float(c["margin"]),
        epochs=int(c["epochs"]),
        lr=float(c["lr"]),
        negatives=int(c["negatives"]),
        projection_noise=float(c["projection_noise"]),
    )


def pretrain_config(config: dict) -> PretrainConfig:
    c = dict(config["pretrain"])
    if c.get("node_cap") is not None:
        c["node_cap"] = int(c["node_cap"])
    return PretrainConfig(**c)


def prompt_config(config: dict) -> PromptTuneConfig:
    c = dict(config["prompt"])
    c["sizes"] = tuple(int(s) for s in c["sizes"])
    if c.get("walk_weights") is not None:
        c["walk_weights"] = tuple(float(w) for w in c["walk_weights"])
    return PromptTuneConfig(**c)
