"""Experiment orchestration: data building, variant projections, runs and ablations."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from selfens import _kernels
from selfens.config import ConfigError, ExperimentConfig
from selfens.datagen import (BatchPlan, Dataset, InvalidNoiseSpec, NoiseSpec, inject_noise, load_csv,
                             load_idx, make_blobs, split_indices)
from selfens.ensemble import FilterStrategy
from selfens.losses import LossConfig
from selfens.selfloop import (EarlyStopConfig, FilterMode, NumericalAbort, OptimizerConfig,
                              SelfConfig, accuracy, label_set_quality, self_run)

SCHEMA_VERSION = "1.0"

_MT = frozenset({"supervised", "consistency", "logit_distance"})
_SUP = frozenset({"supervised"})

# Each variant is a projection of the same engine settings. Keys:
#   terms    enabled loss terms
#   filter   run the filtering loop
#   accum    how z-bar is fed (per_epoch running EMA, per_iteration single snapshot)
#   source   network evaluated / filtered with / returned
#   stream   unsupervised stream: all samples or only Active ones
#   ssl      use the labeled+unlabeled batch plan (False: labeled-only batches)
#   lr       which learning rate key to use
VARIANTS: dict[str, dict] = {
    "baseline": dict(terms=_SUP, filter=False, accum="per_epoch", source="student",
                     stream="all", ssl=False, lr="baseline_lr"),
    "filter_only": dict(terms=_SUP, filter=True, accum="per_iteration", source="student",
                        stream="all", ssl=False, lr="baseline_lr"),
    "teacher_only": dict(terms=_MT, filter=False, accum="per_epoch", source="teacher",
                         stream="all", ssl=True, lr="lr"),
    "self_no_pred_ema": dict(terms=_MT, filter=True, accum="per_iteration", source="teacher",
                             stream="all", ssl=True, lr="lr"),
    "self_full": dict(terms=_MT, filter=True, accum="per_epoch", source="teacher",
                      stream="all", ssl=True, lr="lr"),
    "delete_removed": dict(terms=_MT, filter=True, accum="per_epoch", source="teacher",
                           stream="active", ssl=True, lr="lr"),
    "push_away": dict(terms=_SUP | {"push_away"}, filter=True, accum="per_epoch",
                      source="student", stream="all", ssl=True, lr="lr"),
    "entropy_all": dict(terms=_SUP | {"entropy_min", "mean_entropy_max"}, filter=True,
                        accum="per_epoch", source="student", stream="all", ssl=True, lr="lr",
                        scope="all"),
    "entropy_unlabeled": dict(terms=_SUP | {"entropy_min", "mean_entropy_max"}, filter=True,
                              accum="per_epoch", source="student", stream="all", ssl=True,
                              lr="lr", scope="unlabeled"),
}


def self_config(cfg: ExperimentConfig) -> SelfConfig:
    """Project an experiment config through its variant onto engine settings."""
    v = VARIANTS[cfg.variant]
    lo, es, fl, opt, b = cfg["loss"], cfg["early_stop"], cfg["filter"], cfg["optimizer"], cfg["batch"]
    try:
        loss = LossConfig(
            consistency_weight=float(lo["consistency_weight"]),
            consistency_kind=lo["consistency_kind"],
            logit_distance_weight=float(lo["logit_distance_weight"]),
            rampup_epochs=float(lo["rampup_epochs"]),
            entropy_min_weight=float(lo["entropy_min_weight"]),
            entropy_scope=v.get("scope", lo["entropy_scope"]),
            mean_entropy_max_weight=float(lo["mean_entropy_max_weight"]),
            push_away_weight=float(lo["push_away_weight"]),
            enabled=v["terms"])
        plan = (BatchPlan(int(b["labeled"]), int(b["unlabeled"])) if v["ssl"]
                else BatchPlan(int(b["labeled"]) + int(b["unlabeled"]), 0))
        return SelfConfig(
            early_stop=EarlyStopConfig(int(es["max_epochs_per_iteration"]), int(es["patience"]),
                                       int(es["total_epoch_budget"])),
            loss=loss,
            optimizer=OptimizerConfig(float(opt[v["lr"]]), float(opt["momentum"]),
                                      float(opt["weight_decay"])),
            filter_mode=FilterMode(v["accum"], FilterStrategy(int(fl["topk"])),
                                   bool(fl["reset_per_iteration"])),
            plan=plan,
            hidden=tuple(int(h) for h in cfg["model"]["hidden"]),
            teacher_decay=float(cfg["teacher"]["decay"]),
            ens_alpha=0.0 if v["accum"] == "per_iteration" else float(fl["alpha"]),
            model_source=v["source"],
            unsup_stream=v["stream"],
            filtering=v["filter"],
            max_filter_iterations=int(fl["max_iterations"]),
            stop_on_fixed_point=bool(fl["stop_on_fixed_point"]),
            warm_start=bool(fl["warm_start"]),
            input_noise=float(cfg["input_noise"]),
            seed=int(cfg["seeds"]["init"]))
    except ValueError as exc:  # LossConfigError and dataclass validation
        raise ConfigError(f"variant {cfg.variant}: {exc}") from exc


# --------------------------------------------------------------------------
# data

@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset
    clean_val: bool


def _noised(ds: Dataset, spec: NoiseSpec, seed) -> Dataset:
    return ds.with_labels(inject_noise(ds.labels.true, spec, ds.class_count, seed=seed))


def build_splits(cfg: ExperimentConfig) -> Splits:
    """Load or generate data, carve train/val/test, noise train and val.

    The test split is never noised. Validation is carved before noise and then
    noised with the same spec under an independent seed, unless the config asks
    for a clean subset.
    """
    ds_cfg, sp, seeds = cfg["dataset"], cfg["split"], cfg["seeds"]
    test = None
    if ds_cfg["kind"] == "blobs":
        pool = make_blobs(int(ds_cfg["classes"]), int(ds_cfg["per_class"]), int(ds_cfg["dim"]),
                          spread=float(ds_cfg["spread"]), seed=seeds["data"])
    elif ds_cfg["kind"] == "idx":
        pool = load_idx(ds_cfg["images"], ds_cfg["labels"])
        if ds_cfg["test_images"]:
            test = load_idx(ds_cfg["test_images"], ds_cfg["test_labels"], pool.class_count)
    else:
        pool = load_csv(ds_cfg["path"])
        if ds_cfg["test_path"]:
            test = load_csv(ds_cfg["test_path"], pool.class_count)

    sizes = [int(sp["train"]), int(sp["val"])] + ([] if test is not None else [int(sp["test"])])
    try:
        parts = split_indices(len(pool), sizes, seed=[seeds["data"], 1])
    except ValueError as exc:
        raise ConfigError(f"split: {exc}") from exc
    train, val = pool.subset(parts[0]), pool.subset(parts[1])
    if test is None:
        test = pool.subset(parts[2])
    test = test.clean()

    nz = cfg["noise"]
    clean_val = cfg["validation"]["mode"] == "clean_subset"
    try:
        spec = NoiseSpec(nz["kind"], float(nz["ratio"]), seed=seeds["noise"],
                         flip_map=dict(nz["flip_map"]), exact=bool(nz["exact"]))
        train = _noised(train, spec, [seeds["noise"], 0])
        if clean_val:
            keep = np.arange(min(len(val), int(cfg["validation"]["clean_size"])))
            val = val.subset(keep).clean()
        else:
            val = _noised(val, spec, [seeds["noise"], 1])
    except InvalidNoiseSpec as exc:
        raise ConfigError(f"noise: {exc}") from exc
    return Splits(train, val, test, clean_val)


# --------------------------------------------------------------------------
# reports

@dataclass
class RunReport:
    config: dict
    variant: str
    status: str  # ok | numerical_abort
    iterations: list[dict]
    curves: list[dict]
    final_test_acc: float | None
    best_iteration: int | None
    final_active_count: int | None
    final_precision: float | None
    final_recall: float | None
    noisy_fraction: float
    counters: dict
    filter_decisions: list[int] | None = None
    stop_reason: str | None = None
    error: str | None = None
    wall_time: float = 0.0
    schema_version: str = SCHEMA_VERSION
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def run_experiment(cfg: ExperimentConfig, checkpoint_dir=None) -> RunReport:
    """One full run of ``cfg``. A non-finite loss yields a report with
    ``status == "numerical_abort"`` and the curves up to the abort."""
    t0 = time.perf_counter()
    scfg = self_config(cfg)
    sp = build_splits(cfg)
    assert not np.any(sp.test.labels.noisy_mask), "test labels must stay clean"
    base = dict(config=cfg.to_dict(), variant=cfg.variant,
                noisy_fraction=float(sp.train.labels.noisy_mask.mean()))
    try:
        res = self_run(sp.train, sp.val, scfg, test=sp.test, clean_val=sp.clean_val,
                       checkpoint_dir=checkpoint_dir)
    except NumericalAbort as exc:
        return RunReport(status="numerical_abort", iterations=[],
                         curves=[asdict(c) for c in exc.curves], final_test_acc=None,
                         best_iteration=None, final_active_count=None, final_precision=None,
                         final_recall=None, counters={}, error=str(exc),
                         wall_time=time.perf_counter() - t0, **base)

    records = [it.record() for it in res.iterations]
    curves = [c for r in records for c in r.pop("curves")]
    precision, recall = label_set_quality(res.final_dataset)
    counters = {
        "clamps": int(sum(it.clamp_count for it in res.iterations)),
        "filter_ties": int(sum(it.filter_ties for it in res.iterations)),
        "backend": _kernels.BACKEND,
    }
    return RunReport(
        status="ok", iterations=records, curves=curves,
        final_test_acc=accuracy(res.best_model, sp.test.features, sp.test.labels.true),
        best_iteration=res.best_iteration,
        final_active_count=int(res.final_dataset.labels.active.sum()),
        final_precision=precision, final_recall=recall, counters=counters,
        filter_decisions=[int(a) for a in res.final_dataset.labels.active],
        stop_reason=res.stop_reason,
        wall_time=time.perf_counter() - t0, **base)


# --------------------------------------------------------------------------
# ablations

ABLATION_COLUMNS = ("variant", "seed_offset", "status", "test_acc", "final_precision",
                    "final_recall", "iterations", "epochs")


def _ablation_row(variant, offset, rep: RunReport) -> dict:
    return {"variant": variant, "seed_offset": offset, "status": rep.status,
            "test_acc": rep.final_test_acc, "final_precision": rep.final_precision,
            "final_recall": rep.final_recall, "iterations": len(rep.iterations),
            "epochs": len(rep.curves)}


def _one(args):
    cfg, variant, offset, out_dir = args
    from selfens.report import emit_report
    c = cfg.with_seeds(offset).with_overrides([f"variant={variant}"])
    rep = run_experiment(c)
    if out_dir is not None:
        emit_report(rep, Path(out_dir) / f"{variant}_s{offset}")
    return _ablation_row(variant, offset, rep)


def run_ablation_suite(base_cfg: ExperimentConfig, variants, seed_offsets=(0, 1, 2),
                       out_dir=None, jobs: int = 1) -> list[dict]:
    """Run every variant on the same seed triples (``base seeds + offset``).

    Returns per-run rows followed by one ``mean`` row per variant (seed_offset
    is ``"mean"``). With ``jobs > 1`` runs go to separate processes, each
    writing its own sub-directory.
    """
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variants {unknown}; choose from {sorted(VARIANTS)}")
    tasks = [(base_cfg, v, int(o), out_dir) for v in variants for o in seed_offsets]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as pool:
            rows = list(pool.map(_one, tasks))
    else:
        rows = [_one(t) for t in tasks]
    for v in variants:
        mine = [r for r in rows if r["variant"] == v and r["status"] == "ok"]
        mean = {"variant": v, "seed_offset": "mean",
                "status": "ok" if len(mine) == len(seed_offsets) else "partial"}
        for col in ("test_acc", "final_precision", "final_recall", "iterations", "epochs"):
            vals = [r[col] for r in mine if r[col] is not None]
            mean[col] = float(np.mean(vals)) if vals else None
        rows.append(mean)
    return rows


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r[k] is None else (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]))
                    for k in ABLATION_COLUMNS})
    return buf.getvalue()
