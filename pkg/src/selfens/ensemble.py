"""Self-ensembles: weight-averaged teacher, running-average predictions, and the
label-agreement filter that reads them.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from selfens import _kernels
from selfens.ndnum import MlpParams

# little-endian: N (u64), K (u64), alpha (f64), updates_applied (u64)
_ENS_HEADER = struct.Struct("<QQdQ")


@dataclass
class TeacherState:
    params: MlpParams
    decay: float = 0.99
    updates_applied: int = 0

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"teacher decay must be in [0, 1], got {self.decay}")

    @classmethod
    def from_student(cls, student: MlpParams, decay: float = 0.99) -> TeacherState:
        return cls(student.copy(), decay, 0)


def teacher_ema_update(teacher: TeacherState, student: MlpParams) -> TeacherState:
    """``theta_t <- decay * theta_t + (1 - decay) * theta_s`` for every array, in place."""
    teacher.params.check_congruent(student)
    for t, s in zip(teacher.params.arrays(), student.arrays()):
        _kernels.ema_update(t, s, teacher.decay)
    teacher.updates_applied += 1
    return teacher


@dataclass
class PredictionEnsemble:
    z_bar: np.ndarray
    alpha: float = 0.6
    updates_applied: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.z_bar.ndim != 2:
            raise ValueError("z_bar must be (N, K)")

    @classmethod
    def zeros(cls, n: int, k: int, alpha: float = 0.6) -> PredictionEnsemble:
        return cls(np.zeros((n, k)), alpha, 0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.z_bar.shape

    def reset(self) -> None:
        self.z_bar[:] = 0.0
        self.updates_applied = 0


def prediction_ema_update(ens: PredictionEnsemble, sample_id: int, z_hat) -> PredictionEnsemble:
    n, k = ens.z_bar.shape
    if not 0 <= sample_id < n:
        raise IndexError(f"sample {sample_id} outside ensemble of {n} rows")
    z_hat = np.asarray(z_hat, dtype=np.float64)
    if z_hat.shape != (k,) or not np.isfinite(z_hat).all():
        raise ValueError(f"z_hat must be a finite vector of length {k}")
    row = ens.z_bar[sample_id]
    _kernels.ema_update(row, z_hat, ens.alpha)
    ens.updates_applied += 1
    return ens


def prediction_ema_update_all(ens: PredictionEnsemble, z_hat: np.ndarray,
                              rows: np.ndarray | None = None) -> PredictionEnsemble:
    """Fold a whole prediction pass (one row per sample, or per ``rows``) into ``ens``."""
    z_hat = np.asarray(z_hat, dtype=np.float64)
    if rows is None:
        if z_hat.shape != ens.z_bar.shape:
            raise ValueError(f"prediction pass {z_hat.shape} vs ensemble {ens.z_bar.shape}")
        _kernels.ema_update(ens.z_bar, z_hat, ens.alpha)
    else:
        rows = np.asarray(rows, dtype=np.int64)
        if len(rows) and (rows.min() < 0 or rows.max() >= len(ens.z_bar)):
            raise IndexError("row index outside ensemble")
        _kernels.ema_update_rows(ens.z_bar, rows, z_hat, ens.alpha)
    ens.updates_applied += 1
    return ens


@dataclass(frozen=True)
class FilterStrategy:
    """``k == 1`` is plain argmax agreement; ``k > 1`` keeps labels in the top-k."""

    k: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"top-k needs k >= 1, got {self.k}")

    @classmethod
    def argmax(cls) -> FilterStrategy:
        return cls(1)

    @classmethod
    def topk(cls, k: int) -> FilterStrategy:
        return cls(k)

    @property
    def mode(self) -> str:
        return "argmax" if self.k == 1 else f"top{self.k}"


def agreement_mask(scores: np.ndarray, labels, strategy: FilterStrategy) -> np.ndarray:
    """Boolean keep-vector: label ranks within the top ``strategy.k`` of its row.

    Equal scores rank by lowest class index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if strategy.k > scores.shape[1]:
        raise ValueError(f"k={strategy.k} exceeds class count {scores.shape[1]}")
    return _kernels.label_rank(scores, np.asarray(labels, dtype=np.int64)) < strategy.k


def agreement_keep(ens: PredictionEnsemble, sample_id: int, original_label: int,
                   strategy: FilterStrategy = FilterStrategy()) -> bool:
    row = ens.z_bar[sample_id][None, :]
    return bool(agreement_mask(row, [original_label], strategy)[0])


def count_top_ties(scores: np.ndarray) -> int:
    """Rows whose maximum is attained by more than one class."""
    top = scores.max(axis=1, keepdims=True)
    return int(((scores == top).sum(axis=1) > 1).sum())


def save_ensemble(ens: PredictionEnsemble, path) -> None:
    path = Path(path)
    n, k = ens.z_bar.shape
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(_ENS_HEADER.pack(n, k, ens.alpha, ens.updates_applied))
        fh.write(np.ascontiguousarray(ens.z_bar, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_ensemble(path) -> PredictionEnsemble:
    raw = Path(path).read_bytes()
    if len(raw) < _ENS_HEADER.size:
        raise ValueError(f"{path}: truncated ensemble header")
    n, k, alpha, updates = _ENS_HEADER.unpack_from(raw)
    body = raw[_ENS_HEADER.size:]
    if len(body) != 8 * n * k:
        raise ValueError(f"{path}: expected {n}x{k} doubles, got {len(body)} bytes")
    z = np.frombuffer(body, dtype="<f8").reshape(n, k).astype(np.float64)
    return PredictionEnsemble(z, alpha, updates)
