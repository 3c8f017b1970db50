"""Experiment configuration: YAML file + ``key=value`` overrides -> ExperimentConfig.

Schema (every key optional; defaults shown by ``selfens run --print-config``)::

    dataset:    kind (blobs|idx|csv), classes, per_class, dim, spread,
                images/labels (idx), path (csv), test_images/test_labels/test_path
    split:      train, val, test            (sample counts; -1 = the rest)
    noise:      kind (symmetric|pairflip|nextclass), ratio, flip_map, exact
    validation: mode (noisy|clean_subset), clean_size
    model:      hidden
    optimizer:  lr, baseline_lr, momentum, weight_decay
    batch:      labeled, unlabeled
    loss:       consistency_weight, consistency_kind, logit_distance_weight,
                rampup_epochs, entropy_min_weight, entropy_scope,
                mean_entropy_max_weight, push_away_weight
    early_stop: max_epochs_per_iteration, patience, total_epoch_budget
    filter:     accumulation (per_epoch|per_iteration), topk, alpha,
                reset_per_iteration, max_iterations, warm_start, stop_on_fixed_point
    teacher:    decay
    input_noise, variant
    seeds:      data, init, noise
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "dataset": {"kind": "blobs", "classes": 10, "per_class": 500, "dim": 20, "spread": 1.0,
                "images": None, "labels": None, "path": None,
                "test_images": None, "test_labels": None, "test_path": None},
    "split": {"train": 3500, "val": 500, "test": -1},
    "noise": {"kind": "symmetric", "ratio": 0.4, "flip_map": {}, "exact": True},
    "validation": {"mode": "noisy", "clean_size": 1000},
    "model": {"hidden": [64, 64]},
    "optimizer": {"lr": 0.02, "baseline_lr": 0.01, "momentum": 0.9, "weight_decay": 2e-4},
    "batch": {"labeled": 16, "unlabeled": 48},
    "loss": {"consistency_weight": 10.0, "consistency_kind": "mse",
             "logit_distance_weight": 0.01, "rampup_epochs": 5, "entropy_min_weight": 1.0,
             "entropy_scope": "all", "mean_entropy_max_weight": 1.0, "push_away_weight": 1.0},
    "early_stop": {"max_epochs_per_iteration": 60, "patience": 10, "total_epoch_budget": 200},
    "filter": {"accumulation": "per_epoch", "topk": 1, "alpha": 0.6,
               "reset_per_iteration": False, "max_iterations": 10, "warm_start": True,
               "stop_on_fixed_point": True},
    "teacher": {"decay": 0.99},
    "input_noise": 1.0,
    "variant": "self_full",
    "seeds": {"data": 0, "init": 0, "noise": 0},
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated, fully-defaulted configuration tree (plain dicts inside)."""

    tree: dict

    def __getitem__(self, key):
        return self.tree[key]

    @property
    def variant(self) -> str:
        return self.tree["variant"]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.tree)

    def with_overrides(self, overrides) -> ExperimentConfig:
        tree = self.to_dict()
        for item in overrides:
            _apply_override(tree, item)
        return build_config(tree)

    def with_seeds(self, offset: int) -> ExperimentConfig:
        tree = self.to_dict()
        tree["seeds"] = {k: int(v) + offset for k, v in tree["seeds"].items()}
        return build_config(tree)


def _merge(base: dict, extra: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and k != "flip_map":
            if not isinstance(v, dict):
                raise ConfigError(f"{where}: expected a mapping")
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = v
    return out


def _apply_override(tree: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    node = tree
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        node[parts[-1]] = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {key}: {exc}") from exc


def _check(cond, msg):
    if not cond:
        raise ConfigError(msg)


def build_config(raw: dict | None = None, base_dir: Path | None = None) -> ExperimentConfig:
    tree = _merge(DEFAULTS, raw or {})
    ds = tree["dataset"]
    _check(ds["kind"] in ("blobs", "idx", "csv"), f"dataset.kind: unknown {ds['kind']!r}")
    for key in ("images", "labels", "path", "test_images", "test_labels", "test_path"):
        if ds[key] is not None and base_dir is not None and not Path(ds[key]).is_absolute():
            ds[key] = str((base_dir / ds[key]).resolve())
    if ds["kind"] == "idx":
        _check(ds["images"] and ds["labels"], "dataset: idx needs images and labels paths")
        needed = ["images", "labels"]
        if ds["test_images"] or ds["test_labels"]:
            needed += ["test_images", "test_labels"]
    elif ds["kind"] == "csv":
        _check(ds["path"], "dataset: csv needs path")
        needed = ["path"] + (["test_path"] if ds["test_path"] else [])
    else:
        needed = []
        _check(int(ds["classes"]) >= 2, "dataset.classes must be >= 2")
        _check(int(ds["per_class"]) >= 1, "dataset.per_class must be >= 1")
    for key in needed:
        _check(Path(ds[key]).is_file(), f"dataset.{key}: file not found: {ds[key]}")

    _check(0.0 <= float(tree["noise"]["ratio"]) <= 1.0, "noise.ratio must be in [0, 1]")
    _check(tree["noise"]["kind"] in ("symmetric", "pairflip", "nextclass"),
           f"noise.kind: unknown {tree['noise']['kind']!r}")
    tree["noise"]["flip_map"] = {int(k): int(v) for k, v in (tree["noise"]["flip_map"] or {}).items()}
    _check(tree["validation"]["mode"] in ("noisy", "clean_subset"),
           "validation.mode must be noisy|clean_subset")
    _check(tree["filter"]["accumulation"] in ("per_epoch", "per_iteration"),
           "filter.accumulation must be per_epoch|per_iteration")
    _check(0.0 <= float(tree["filter"]["alpha"]) <= 1.0, "filter.alpha must be in [0, 1]")
    _check(0.0 <= float(tree["teacher"]["decay"]) <= 1.0, "teacher.decay must be in [0, 1]")
    _check(float(tree["optimizer"]["lr"]) > 0 and float(tree["optimizer"]["baseline_lr"]) > 0,
           "optimizer learning rates must be positive")
    _check(int(tree["batch"]["labeled"]) >= 1 and int(tree["batch"]["unlabeled"]) >= 0,
           "batch.labeled must be >= 1 and batch.unlabeled >= 0")
    _check(float(tree["input_noise"]) >= 0, "input_noise must be >= 0")
    for k in ("data", "init", "noise"):
        _check(isinstance(tree["seeds"][k], int), f"seeds.{k} must be an explicit integer")
    es = tree["early_stop"]
    _check(0 < es["patience"] <= es["max_epochs_per_iteration"],
           "early_stop.patience must be in (0, max_epochs_per_iteration]")
    from selfens.experiment import VARIANTS  # circular at module load
    _check(tree["variant"] in VARIANTS,
           f"variant: unknown {tree['variant']!r}; choose from {sorted(VARIANTS)}")
    return ExperimentConfig(tree)


def load_config(path=None, overrides=()) -> ExperimentConfig:
    raw: dict = {}
    base_dir = None
    if path is not None:
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        base_dir = path.parent
    cfg = build_config(raw, base_dir)
    return cfg.with_overrides(overrides) if overrides else cfg
