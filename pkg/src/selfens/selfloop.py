"""The filtering controller: Mean Teacher training with early stopping, label
filtering against the original label set, and the outer keep-improving loop.
"""
from __future__ import annotations

import json
import logging
import math
import os
import shutil
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from selfens import losses as L
from selfens.datagen import (BatchPlan, Dataset, DegenerateBatchError, compose_batch,
                             iter_minibatches)
from selfens.ensemble import (FilterStrategy, PredictionEnsemble, TeacherState,
                              agreement_mask, count_top_ties, load_ensemble,
                              prediction_ema_update_all, save_ensemble,
                              teacher_ema_update)
from selfens.ndnum import (MlpParams, OptimizerState, cosine_lr, forward_with_cache, init_mlp,
                           mlp_backward, mlp_forward, sgd_nesterov_step, softmax)

log = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss or parameter."""

    def __init__(self, msg, curves=None):
        super().__init__(msg)
        self.curves = curves or []


@dataclass(frozen=True)
class EarlyStopConfig:
    max_epochs_per_iteration: int = 300
    patience: int = 50
    total_epoch_budget: int = 600

    def __post_init__(self):
        if min(self.max_epochs_per_iteration, self.patience, self.total_epoch_budget) <= 0:
            raise ValueError("early-stop settings must be positive")
        if self.patience > self.max_epochs_per_iteration:
            raise ValueError("patience cannot exceed max_epochs_per_iteration")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 2e-4


@dataclass(frozen=True)
class FilterMode:
    accumulation: str = "per_epoch"  # per_epoch | per_iteration
    strategy: FilterStrategy = FilterStrategy()
    reset_per_iteration: bool = False

    def __post_init__(self):
        if self.accumulation not in ("per_epoch", "per_iteration"):
            raise ValueError(f"unknown accumulation {self.accumulation!r}")


@dataclass(frozen=True)
class SelfConfig:
    """Everything the controller needs beyond the data."""

    early_stop: EarlyStopConfig = EarlyStopConfig()
    loss: L.LossConfig = L.LossConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    filter_mode: FilterMode = FilterMode()
    plan: BatchPlan = BatchPlan(16, 48)
    hidden: tuple[int, ...] = (64, 64)
    teacher_decay: float = 0.99
    ens_alpha: float = 0.6
    model_source: str = "teacher"  # which network is evaluated, filtered with, returned
    unsup_stream: str = "all"  # all | active ("complete removal")
    filtering: bool = True
    max_filter_iterations: int = 10
    stop_on_fixed_point: bool = True  # stop when filtering reproduces the set just trained on
    warm_start: bool = True
    input_noise: float = 0.0
    eval_batch: int = 2048
    seed: int = 0

    def __post_init__(self):
        if self.model_source not in ("teacher", "student"):
            raise ValueError(f"model_source must be teacher|student, got {self.model_source!r}")
        if self.unsup_stream not in ("all", "active"):
            raise ValueError(f"unsup_stream must be all|active, got {self.unsup_stream!r}")
        if self.max_filter_iterations < 0:
            raise ValueError("max_filter_iterations must be >= 0")


@dataclass
class EpochRecord:
    iteration: int
    epoch: int  # global, counted across iterations
    train_loss: float
    losses: dict[str, float]
    student_val_acc: float
    teacher_val_acc: float
    test_acc: float | None = None
    lr: float = 0.0


@dataclass
class IterationResult:
    iteration: int
    best_model: MlpParams
    best_student: MlpParams
    best_val_acc: float
    best_epoch: int
    epochs_run: int
    active_count_before: int
    train_precision: float
    train_recall: float
    active_count_after: int | None = None
    filter_precision: float | None = None
    filter_recall: float | None = None
    filter_ties: int = 0
    curves: list[EpochRecord] = field(default_factory=list)
    clamp_count: int = 0

    @property
    def best_teacher(self) -> MlpParams:
        return self.best_model

    def record(self) -> dict:
        """JSON-ready summary (parameters omitted)."""
        d = {k: v for k, v in asdict(self).items()
             if k not in ("best_model", "best_student", "curves")}
        d["curves"] = [asdict(c) for c in self.curves]
        return d


# --------------------------------------------------------------------------

def early_stop_check(history, patience: int) -> tuple[bool, int]:
    """``(stop, best_index)``; best is the first index attaining the maximum."""
    if not len(history):
        raise ValueError("empty history")
    best = int(np.argmax(np.asarray(history, dtype=np.float64)))
    return (len(history) - 1 - best) >= patience, best


def label_set_quality(ds: Dataset, active=None) -> tuple[float, float]:
    """Precision and recall of the kept labels against the hidden true labels."""
    active = ds.labels.active if active is None else np.asarray(active, dtype=bool)
    correct = ~ds.labels.noisy_mask
    kept_correct = int((active & correct).sum())
    kept = int(active.sum())
    precision = kept_correct / kept if kept else 0.0
    recall = kept_correct / int(correct.sum()) if correct.any() else 0.0
    return precision, recall


def predict_probs(params: MlpParams, x: np.ndarray, chunk: int = 2048) -> np.ndarray:
    out = np.empty((len(x), params.out_dim))
    for sl in iter_minibatches(len(x), chunk):
        out[sl] = softmax(mlp_forward(params, x[sl]))
    return out


def accuracy(params: MlpParams, x: np.ndarray, y: np.ndarray, chunk: int = 2048) -> float:
    if len(x) == 0:
        return float("nan")
    hits = 0
    for sl in iter_minibatches(len(x), chunk):
        hits += int((mlp_forward(params, x[sl]).argmax(axis=1) == y[sl]).sum())
    return hits / len(x)


def val_targets(val: Dataset, clean: bool = False) -> np.ndarray:
    return val.labels.true if clean else val.labels.original


# --------------------------------------------------------------------------
# one training iteration

def objective(student: MlpParams, teacher: MlpParams | None, xs, xt, labels_l, removed_rows,
              removed_labels, n_lab: int, loss_cfg: L.LossConfig, epoch_f: float = math.inf,
              clamps: L.ClampCounter | None = None):
    """Loss breakdown of one batch plus ``dloss/dlogits`` and the forward cache.

    Rows ``[:n_lab]`` are labeled; every row enters the unsupervised terms.
    ``removed_rows`` index rows whose label is Removed (entropy scope
    ``unlabeled`` and push-away only look at those).
    """
    clamps = clamps or L.ClampCounter()
    on = loss_cfg.enabled
    weights = loss_cfg.weights(epoch_f)
    zs, cache = forward_with_cache(student, xs)
    ps = softmax(zs)
    g = np.zeros_like(zs)
    parts: dict[str, float] = {}

    if "supervised" in on:
        parts["supervised"] = L.supervised_nll(ps[:n_lab], labels_l, clamps)
        g[:n_lab] += weights["supervised"] * L.supervised_nll_grad(ps[:n_lab], labels_l)
    if loss_cfg.uses_teacher:
        zt = mlp_forward(teacher, xt)
        if "consistency" in on:
            pt = softmax(zt)
            parts["consistency"] = L.consistency_loss(ps, pt, loss_cfg.consistency_kind, clamps)
            if weights["consistency"]:
                g += weights["consistency"] * L.consistency_grad(ps, pt, loss_cfg.consistency_kind)
        if "logit_distance" in on:
            parts["logit_distance"] = L.logit_distance(zs, zt)
            g += weights["logit_distance"] * L.logit_distance_grad(zs, zt)
    if "entropy_min" in on:
        rows = slice(None) if loss_cfg.entropy_scope == "all" else removed_rows
        sub = ps[rows]
        parts["entropy_min"] = L.entropy_min_loss(sub)
        if len(sub):
            g[rows] += weights["entropy_min"] * L.entropy_min_grad(sub)
    if "mean_entropy_max" in on:
        parts["mean_entropy_max"] = L.mean_entropy_max_loss(ps)
        g += weights["mean_entropy_max"] * L.mean_entropy_max_grad(ps)
    if "push_away" in on:
        sub = ps[removed_rows]
        c = loss_cfg.push_away_weight
        parts["push_away"] = L.push_away_loss(sub, removed_labels, c, clamps=clamps) if len(sub) else 0.0
        if len(sub):
            g[removed_rows] += L.push_away_grad(sub, removed_labels, c)
    return L.total_loss(loss_cfg, parts, epoch_f), g, cache


def _train_step(student, teacher, opt, x, labels_l, removed_rows, removed_labels,
                n_lab, cfg: SelfConfig, epoch_f, rng, clamps):
    xs = xt = x
    if cfg.input_noise:
        # independent perturbations for the two networks
        xs = x + cfg.input_noise * rng.standard_normal(x.shape)
        if cfg.loss.uses_teacher:
            xt = x + cfg.input_noise * rng.standard_normal(x.shape)
    breakdown, g, cache = objective(student, teacher.params, xs, xt, labels_l, removed_rows,
                                    removed_labels, n_lab, cfg.loss, epoch_f, clamps)
    if not math.isfinite(breakdown.total):
        raise NumericalAbort(f"non-finite loss at epoch {epoch_f:.3f}: {breakdown.as_dict()}")
    grads = mlp_backward(student, xs, g, cache)
    sgd_nesterov_step(student, grads, opt, cfg.optimizer.momentum)
    teacher_ema_update(teacher, student)
    return breakdown


def train_iteration(dataset: Dataset, val: Dataset, ens: PredictionEnsemble, cfg: SelfConfig,
                    warm_start: MlpParams | None = None, iteration: int = 0,
                    epoch_offset: int = 0, test: Dataset | None = None,
                    clean_val: bool = False) -> IterationResult:
    """Train student + EMA teacher on the Active labels until early stopping.

    ``epoch_offset`` is the number of epochs already spent by earlier
    iterations; it drives the ramp-up, the batch RNG and the global budget.
    """
    active_idx = dataset.active_indices
    if len(active_idx) == 0:
        raise DegenerateBatchError("degenerate Active set: no labels left to train on")
    if len(val) == 0:
        raise ValueError("validation set is empty")
    es = cfg.early_stop
    stream_idx = np.arange(len(dataset)) if cfg.unsup_stream == "all" else active_idx
    plan = cfg.plan

    x_all = dataset.features
    original = dataset.labels.original
    removed = ~dataset.labels.active
    yv = val_targets(val, clean_val)

    dims = [dataset.dim, *cfg.hidden, dataset.class_count]
    if warm_start is not None:
        student = warm_start.copy()
    else:
        student = init_mlp(dims, np.random.default_rng([cfg.seed, iteration, 1]))
    teacher = TeacherState.from_student(student, cfg.teacher_decay)

    n_batches = len(compose_batch(active_idx, stream_idx, plan, cfg.seed, 0))
    opt = OptimizerState.for_params(student, cfg.optimizer.lr, cfg.optimizer.weight_decay,
                                    total_steps=max(1, es.max_epochs_per_iteration * n_batches))
    clamps = L.ClampCounter()
    p_train, r_train = label_set_quality(dataset)

    source = (lambda: teacher.params) if cfg.model_source == "teacher" else (lambda: student)
    history: list[float] = []
    curves: list[EpochRecord] = []
    best_model = source().copy()
    best_student = student.copy()

    budget_left = es.total_epoch_budget - epoch_offset
    max_epochs = min(es.max_epochs_per_iteration, budget_left)
    if max_epochs <= 0:
        raise ValueError("total epoch budget exhausted before training")

    for local_epoch in range(max_epochs):
        global_epoch = epoch_offset + local_epoch
        batches = compose_batch(active_idx, stream_idx, plan, cfg.seed, global_epoch)
        rng = np.random.default_rng([cfg.seed, global_epoch, 2])
        sums: dict[str, float] = {}
        total = 0.0
        lr = cosine_lr(opt)
        for b, batch in enumerate(batches):
            rows = np.concatenate([batch.labeled, batch.unlabeled])
            n_lab = len(batch.labeled)
            rem_mask = removed[batch.unlabeled]
            removed_rows = n_lab + np.flatnonzero(rem_mask)
            try:
                bd = _train_step(student, teacher, opt, x_all[rows], original[batch.labeled],
                                 removed_rows, original[batch.unlabeled][rem_mask], n_lab, cfg,
                                 global_epoch + b / len(batches), rng, clamps)
            except NumericalAbort as exc:
                raise NumericalAbort(f"iteration {iteration}: {exc}", curves) from None
            total += bd.total
            for k, v in bd.as_dict().items():
                sums[k] = sums.get(k, 0.0) + v
        if not student.is_finite():
            raise NumericalAbort(f"iteration {iteration}: non-finite student weights at epoch "
                                 f"{global_epoch}", curves)

        s_acc = accuracy(student, val.features, yv, cfg.eval_batch)
        t_acc = accuracy(teacher.params, val.features, yv, cfg.eval_batch)
        history.append(t_acc if cfg.model_source == "teacher" else s_acc)
        test_acc = None
        if test is not None:
            test_acc = accuracy(source(), test.features, test.labels.true, cfg.eval_batch)
        curves.append(EpochRecord(iteration, global_epoch, total / len(batches),
                                  {k: v / len(batches) for k, v in sums.items() if k != "total"},
                                  s_acc, t_acc, test_acc, lr))
        if len(history) == 1 or history[-1] > max(history[:-1]):
            best_model = source().copy()
            best_student = student.copy()
        if cfg.filtering and cfg.filter_mode.accumulation == "per_epoch":
            prediction_ema_update_all(ens, predict_probs(source(), x_all, cfg.eval_batch))
        stop, _ = early_stop_check(history, es.patience)
        if stop:
            break

    _, best_idx = early_stop_check(history, es.patience)
    return IterationResult(
        iteration=iteration, best_model=best_model, best_student=best_student,
        best_val_acc=history[best_idx], best_epoch=epoch_offset + best_idx,
        epochs_run=len(history), active_count_before=len(active_idx),
        train_precision=p_train, train_recall=r_train, curves=curves,
        clamp_count=clamps.count)


# --------------------------------------------------------------------------
# filtering and the outer loop

def filter_labels(dataset: Dataset, ens: PredictionEnsemble, best_model: MlpParams | None,
                  mode: FilterMode, eval_batch: int = 2048) -> Dataset:
    """Recompute Active/Removed from the original labels.

    Statuses always restart from the full original label set, so a label
    removed earlier comes back once the ensemble agrees with it again.
    """
    if ens.z_bar.shape != (len(dataset), dataset.class_count):
        raise ValueError(f"ensemble {ens.z_bar.shape} does not match dataset "
                         f"({len(dataset)}, {dataset.class_count})")
    if mode.accumulation == "per_iteration":
        if best_model is None:
            raise ValueError("per-iteration filtering needs the best model")
        prediction_ema_update_all(ens, predict_probs(best_model, dataset.features, eval_batch))
    keep = agreement_mask(ens.z_bar, dataset.labels.original, mode.strategy)
    return dataset.with_active(keep)


@dataclass
class SelfRunResult:
    best_model: MlpParams
    best_iteration: int
    iterations: list[IterationResult]
    final_dataset: Dataset
    ensemble: PredictionEnsemble
    stop_reason: str = ""

    @property
    def curves(self) -> list[EpochRecord]:
        return [c for it in self.iterations for c in it.curves]

    @property
    def final_active_precision(self) -> float:
        return label_set_quality(self.final_dataset)[0]


Trainer = Callable[..., IterationResult]


def self_run(train: Dataset, val: Dataset, cfg: SelfConfig, test: Dataset | None = None,
             clean_val: bool = False, trainer: Trainer = train_iteration,
             checkpoint_dir=None) -> SelfRunResult:
    """Train, filter against the original labels, retrain; stop at the first
    iteration whose validation accuracy falls below the best so far (or when
    filtering reproduces the label set just trained on, if enabled).

    ``final_dataset`` carries the label statuses chosen by the best model.
    With ``checkpoint_dir`` every finished iteration is persisted and a rerun
    resumes after the last complete one.
    """
    n, k = len(train), train.class_count
    base = train.with_active(np.ones(n, dtype=bool))
    ckpt = _Checkpoints(checkpoint_dir) if checkpoint_dir is not None else None

    state = ckpt.load(base) if ckpt else None
    if state is None:
        ens = PredictionEnsemble.zeros(n, k, cfg.ens_alpha)
        current = trainer(base, val, ens, cfg, warm_start=None, iteration=0, epoch_offset=0,
                          test=test, clean_val=clean_val)
        results = [current]
        filtered = base
        reason = ""
        if ckpt:
            ckpt.save(results, ens, filtered, "")
    else:
        results, ens, filtered, reason = state

    def spent():
        return sum(r.epochs_run for r in results)

    while not reason:
        current = results[-1]
        if len(results) > 1 and current.best_val_acc < results[_best_position(results[:-1])].best_val_acc:
            reason = "val_drop"
            break
        if not cfg.filtering:
            reason = "no_filtering"
            break
        trained_on = filtered
        filtered = filter_labels(base, ens, current.best_model, cfg.filter_mode, cfg.eval_batch)
        current.active_count_after = int(filtered.labels.active.sum())
        current.filter_precision, current.filter_recall = label_set_quality(filtered)
        current.filter_ties = count_top_ties(ens.z_bar)
        if cfg.stop_on_fixed_point and np.array_equal(filtered.labels.active,
                                                      trained_on.labels.active):
            reason = "fixed_point"
            break
        if current.iteration >= cfg.max_filter_iterations:
            reason = "max_iterations"
            break
        if spent() >= cfg.early_stop.total_epoch_budget:
            reason = "budget"
            break
        if cfg.filter_mode.reset_per_iteration:
            ens.reset()
        warm = current.best_student if cfg.warm_start else None
        try:
            nxt = trainer(filtered, val, ens, cfg, warm_start=warm,
                          iteration=current.iteration + 1, epoch_offset=spent(),
                          test=test, clean_val=clean_val)
        except DegenerateBatchError as exc:
            log.warning("stopping: %s", exc)
            reason = "degenerate"
            break
        results.append(nxt)
        if ckpt:
            ckpt.save(results, ens, filtered, "")

    best = results[_best_position(results)]
    final = filtered if cfg.filtering else base
    if ckpt:
        ckpt.save(results, ens, final, reason)
    return SelfRunResult(best.best_model, best.iteration, results, final, ens, reason)


def _best_position(results: list[IterationResult]) -> int:
    """Last iteration accepted by the loop condition; ties move the best forward."""
    best = 0
    for j in range(1, len(results)):
        if results[j].best_val_acc >= results[best].best_val_acc:
            best = j
        else:
            break
    return best


# --------------------------------------------------------------------------
# checkpoints

class _Checkpoints:
    """``<dir>/iter_NNN/{model.npz, ensemble.bin, active.npy, result.json}``."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _iter_dir(self, i: int) -> Path:
        return self.root / f"iter_{i:03d}"

    def save(self, results, ens, filtered: Dataset, stop_reason: str) -> None:
        last = results[-1]
        d = self._iter_dir(last.iteration)
        tmp = d.with_name(d.name + ".tmp")
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir()
        arrays = {}
        for tag, p in (("model", last.best_model), ("student", last.best_student)):
            for j, a in enumerate(p.arrays()):
                arrays[f"{tag}_{j}"] = a
        np.savez(tmp / "model.npz", **arrays)
        save_ensemble(ens, tmp / "ensemble.bin")
        np.save(tmp / "active.npy", np.asarray(filtered.labels.active))
        # earlier iterations get their filter stats only once the next one starts
        records = [r.record() for r in results]
        (tmp / "result.json").write_text(json.dumps(
            {"results": records, "stop_reason": stop_reason}, sort_keys=True))
        if d.exists():
            shutil.rmtree(d)
        os.replace(tmp, d)

    def load(self, base: Dataset):
        dirs = sorted(p for p in self.root.glob("iter_[0-9][0-9][0-9]") if p.is_dir())
        if not dirs:
            return None
        d = dirs[-1]
        meta = json.loads((d / "result.json").read_text())
        ens = load_ensemble(d / "ensemble.bin")
        active = np.load(d / "active.npy")
        params = {}
        with np.load(d / "model.npz") as z:
            for key in z.files:
                params[key] = z[key]
        results = []
        for rec in meta["results"]:
            curves = [EpochRecord(**c) for c in rec.pop("curves")]
            results.append(IterationResult(best_model=None, best_student=None,  # type: ignore[arg-type]
                                           curves=curves, **rec))
        results[-1].best_model = _params_from(params, "model")
        results[-1].best_student = _params_from(params, "student")
        # earlier models are only needed if they end up best; restore from their own dirs
        for r in results[:-1]:
            with np.load(self._iter_dir(r.iteration) / "model.npz") as z:
                p = {key: z[key] for key in z.files}
            r.best_model = _params_from(p, "model")
            r.best_student = _params_from(p, "student")
        return results, ens, base.with_active(active), meta["stop_reason"]


def _params_from(arrays: dict, tag: str) -> MlpParams:
    flat = [arrays[f"{tag}_{j}"] for j in range(len([k for k in arrays if k.startswith(tag + "_")]))]
    return MlpParams(flat[0::2], flat[1::2])
