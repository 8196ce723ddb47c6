"""Layered run configuration: defaults <- preset <- YAML file <- environment <- flags.

Keys are namespaced (``train.epochs``, ``fusion.kind`` ...). Environment
variables use the ``CLINSYNTH_`` prefix with ``__`` between namespace and key,
e.g. ``CLINSYNTH_TRAIN__EPOCHS=40``. Unknown keys are rejected.
"""

from __future__ import annotations

import copy
import os
import platform
from pathlib import Path
from typing import TYPE_CHECKING, Any, Mapping

import yaml

from .errors import ConfigError

if TYPE_CHECKING:
    from .training import TrainConfig

ENV_PREFIX = "CLINSYNTH_"

DEFAULTS: dict[str, dict[str, Any]] = {
    "tabular": {"schema": None, "strict": False},
    "embedding": {"encoder_id": "stub-768", "backend": "deterministic-stub", "dimension": 768,
                  "model_name_or_path": None, "cache_dir": None, "max_tokens": 512},
    "model": {"base_channels": 32, "depth_levels": 4, "disc_base_channels": 16, "disc_n_down": 3},
    "fusion": {"kind": "auto", "levels": None, "key_dim": None, "residual": True},
    "diffusion": {"T": 250, "beta_schedule": "linear", "sigma_mode": "beta"},
    "train": {"backbone": "pix2pix", "use_text": False, "lr": None, "batch_size": 2, "epochs": 1800,
              "decay_start_epoch": 800, "seed": 0, "l1_weight": 100.0, "adv_weight": 1.0, "adam_betas": None,
              "checkpoint_every": 0},
    "data": {"crop_size": [64, 256, 256], "min_lung_fraction": 0.01, "hu_window": [-1000.0, 400.0],
             "max_attempts": 50},
    "eval": {"crops_per_subject": 5, "extractor": "stats", "kid_subsets": 100, "kid_subset_size": None,
             "is_splits": 10, "seed": 0},
    "analyze": {"attribute": "smoker", "from": "yes", "to": "no", "slices": "mid", "subjects": [], "seed": 0},
}

PRESETS: dict[str, dict[str, dict[str, Any]]] = {
    "full-scale": {},
    "desk-scale": {
        "model": {"base_channels": 8, "depth_levels": 2, "disc_base_channels": 8, "disc_n_down": 2},
        "train": {"epochs": 20, "decay_start_epoch": 10, "lr": 1e-3},
        "data": {"crop_size": [16, 16, 16]},
        "eval": {"kid_subsets": 10},
    },
}


def _merge(base: dict, layer: Mapping, source: str) -> None:
    for ns, values in layer.items():
        if ns not in DEFAULTS:
            raise ConfigError(f"{source}: unknown config section {ns!r}")
        if not isinstance(values, Mapping):
            raise ConfigError(f"{source}: section {ns!r} must be a mapping")
        for key, value in values.items():
            if key not in DEFAULTS[ns]:
                raise ConfigError(f"{source}: unknown config key {ns}.{key}")
            base[ns][key] = value


def parse_assignment(text: str) -> tuple[str, str, Any]:
    key, sep, raw = text.partition("=")
    if not sep or "." not in key:
        raise ConfigError(f"expected namespace.key=value, got {text!r}")
    ns, _, name = key.strip().partition(".")
    return ns, name, yaml.safe_load(raw) if raw.strip() else None


def build_config(preset: str | None = None, config_file: str | os.PathLike | None = None,
                 env: Mapping[str, str] | None = None, overrides: list[str] | Mapping | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        _merge(cfg, PRESETS[preset], f"preset {preset}")
    if config_file is not None:
        path = Path(config_file)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        data = yaml.safe_load(path.read_text("utf-8")) or {}
        _merge(cfg, data, str(path))
    env = os.environ if env is None else env
    layer: dict[str, dict] = {}
    for name, raw in env.items():
        if not name.startswith(ENV_PREFIX) or "__" not in name[len(ENV_PREFIX):]:
            continue
        ns, _, key = name[len(ENV_PREFIX):].lower().partition("__")
        layer.setdefault(ns, {})[key] = yaml.safe_load(raw)
    _merge(cfg, layer, "environment")
    if overrides:
        layer = {}
        if isinstance(overrides, Mapping):
            triples = [(*k.partition(".")[::2], v) for k, v in overrides.items()]
        else:
            triples = [parse_assignment(text) for text in overrides]
        for ns, name, value in triples:
            layer.setdefault(ns, {})[name] = value
        _merge(cfg, layer, "command line")
    return cfg


def train_config_from(cfg: Mapping) -> "TrainConfig":
    from .training import DiffusionConfig, ModelConfig, TrainConfig

    t, m, f, d = cfg["train"], cfg["model"], cfg["fusion"], cfg["data"]
    levels = tuple(f["levels"]) if f["levels"] is not None else None
    try:
        return TrainConfig(
            backbone=t["backbone"], use_text=bool(t["use_text"]), lr=t["lr"], batch_size=int(t["batch_size"]),
            epochs=int(t["epochs"]), decay_start_epoch=int(t["decay_start_epoch"]), seed=int(t["seed"]),
            l1_weight=float(t["l1_weight"]), adv_weight=float(t["adv_weight"]),
            adam_betas=tuple(t["adam_betas"]) if t["adam_betas"] else None,
            checkpoint_every=int(t["checkpoint_every"]), crop_size=tuple(d["crop_size"]),
            min_lung_fraction=float(d["min_lung_fraction"]), max_crop_attempts=int(d["max_attempts"]),
            model=ModelConfig(base_channels=int(m["base_channels"]), depth_levels=int(m["depth_levels"]),
                              fusion_kind=f["kind"], fusion_levels=levels, key_dim=f["key_dim"],
                              residual=bool(f["residual"]), disc_base_channels=int(m["disc_base_channels"]),
                              disc_n_down=int(m["disc_n_down"])),
            diffusion=DiffusionConfig(**cfg["diffusion"]),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def versions() -> dict:
    import numpy
    import torch

    from . import __version__

    return {"clinsynth": __version__, "python": platform.python_version(), "numpy": numpy.__version__,
            "torch": str(torch.__version__)}


def write_echo(run_dir: str | os.PathLike, cfg: Mapping, command: str, extra: Mapping | None = None) -> Path:
    """Write ``run_config.yaml``: effective config, seed, command and library versions."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "config": dict(cfg), "versions": versions()}
    if extra:
        doc.update(extra)
    path = run_dir / "run_config.yaml"
    path.write_text(yaml.safe_dump(doc, sort_keys=False), encoding="utf-8")
    return path
