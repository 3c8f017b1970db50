"""Loss terms and their gradients with respect to the student logits.

Every ``*_grad`` function returns ``dloss/dlogits`` for the rows it was given,
ready to be scattered into the upstream gradient passed to ``mlp_backward``.
Teacher quantities are treated as constants.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Mapping

import numpy as np

CLAMP = 1e-12

TERMS = ("supervised", "consistency", "logit_distance", "entropy_min",
         "mean_entropy_max", "push_away")


class LossConfigError(ValueError):
    pass


class ClampCounter:
    """Counts probabilities clamped at ``CLAMP`` before taking logs."""

    def __init__(self):
        self.count = 0

    def log(self, p: np.ndarray) -> np.ndarray:
        low = p < CLAMP
        if low.any():
            self.count += int(low.sum())
            p = np.maximum(p, CLAMP)
        return np.log(p)


_default_clamps = ClampCounter()


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Pull ``dloss/dprobs`` back through a row-wise softmax."""
    return probs * (dprobs - (probs * dprobs).sum(axis=1, keepdims=True))


def _rows(labels, n):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"{len(labels)} labels for {n} rows")
    return labels


# -- supervised ------------------------------------------------------------

def supervised_nll(probs: np.ndarray, labels, clamps: ClampCounter | None = None) -> float:
    """Mean ``-log p[y]``; 0.0 for an empty batch."""
    n = len(probs)
    if n == 0:
        return 0.0
    labels = _rows(labels, n)
    py = probs[np.arange(n), labels]
    return float(-(clamps or _default_clamps).log(py).mean())


def supervised_nll_grad(probs: np.ndarray, labels) -> np.ndarray:
    n = len(probs)
    g = probs.copy()
    if n:
        g[np.arange(n), _rows(labels, n)] -= 1.0
        g /= n
    return g


# -- student/teacher -------------------------------------------------------

def _check_pair(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


def consistency_loss(student_probs, teacher_probs, kind: str = "mse",
                     clamps: ClampCounter | None = None) -> float:
    """MSE: mean over rows of ``sum_k (s - t)^2``; KL: mean of ``KL(t || s)``."""
    _check_pair(student_probs, teacher_probs)
    if len(student_probs) == 0:
        return 0.0
    if kind == "mse":
        return float(((student_probs - teacher_probs) ** 2).sum(axis=1).mean())
    if kind == "kl":
        t = teacher_probs
        log_s = (clamps or _default_clamps).log(student_probs)
        tlogt = np.where(t > 0, t * np.log(np.where(t > 0, t, 1.0)), 0.0)
        return float((tlogt - t * log_s).sum(axis=1).mean())
    raise LossConfigError(f"unknown consistency kind {kind!r}")


def consistency_grad(student_probs, teacher_probs, kind: str = "mse") -> np.ndarray:
    _check_pair(student_probs, teacher_probs)
    n = max(len(student_probs), 1)
    diff = student_probs - teacher_probs
    if kind == "mse":
        return softmax_backward(student_probs, 2.0 * diff / n)
    if kind == "kl":
        return diff / n
    raise LossConfigError(f"unknown consistency kind {kind!r}")


def logit_distance(student_logits, teacher_logits) -> float:
    """Mean over rows of the per-class mean squared logit gap."""
    _check_pair(student_logits, teacher_logits)
    if len(student_logits) == 0:
        return 0.0
    return float(((student_logits - teacher_logits) ** 2).mean())


def logit_distance_grad(student_logits, teacher_logits) -> np.ndarray:
    _check_pair(student_logits, teacher_logits)
    return 2.0 * (student_logits - teacher_logits) / max(student_logits.size, 1)


def rampup_weight(epoch: float, rampup_epochs: float, target: float) -> float:
    """``target * exp(-5 (1 - x)^2)`` with ``x = min(epoch / rampup_epochs, 1)``."""
    if rampup_epochs < 0:
        raise ValueError("rampup_epochs must be >= 0")
    if rampup_epochs == 0 or epoch >= rampup_epochs:
        return target
    x = max(epoch, 0.0) / rampup_epochs
    return target * math.exp(-5.0 * (1.0 - x) ** 2)


# -- entropy terms ---------------------------------------------------------

def _plogp(p):
    return np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)


def entropy_min_loss(probs) -> float:
    """Mean per-row entropy (``0 log 0 = 0``)."""
    if len(probs) == 0:
        return 0.0
    return float(-_plogp(probs).sum(axis=1).mean())


def entropy_min_grad(probs) -> np.ndarray:
    n = max(len(probs), 1)
    logp = np.log(np.maximum(probs, CLAMP))
    return softmax_backward(probs, -(logp + 1.0) / n)


def mean_entropy_max_loss(probs) -> float:
    """Negated entropy of the batch-mean prediction; in ``[-ln K, 0]``."""
    if len(probs) == 0:
        raise ValueError("mean_entropy_max_loss needs at least one row")
    m = probs.mean(axis=0)
    return float(_plogp(m).sum())


def mean_entropy_max_grad(probs) -> np.ndarray:
    n = len(probs)
    m = probs.mean(axis=0)
    dm = np.log(np.maximum(m, CLAMP)) + 1.0
    return softmax_backward(probs, np.broadcast_to(dm / n, probs.shape))


# -- push-away -------------------------------------------------------------

def push_away_loss(probs, labels, c: float = 1.0, K: int | None = None,
                   clamps: ClampCounter | None = None) -> float:
    """Mean over rows of ``c/(K-1) * sum_{y' != y} -log p[y']``."""
    if c <= 0:
        raise ValueError("push-away weight c must be positive")
    n = len(probs)
    if n == 0:
        return 0.0
    K = K or probs.shape[1]
    labels = _rows(labels, n)
    neg_log = -(clamps or _default_clamps).log(probs)
    total = neg_log.sum(axis=1) - neg_log[np.arange(n), labels]
    return float(c / (K - 1) * total.mean())


def push_away_grad(probs, labels, c: float = 1.0, K: int | None = None) -> np.ndarray:
    n = len(probs)
    K = K or probs.shape[1]
    if n == 0:
        return np.zeros_like(probs)
    others = np.ones_like(probs)
    others[np.arange(n), _rows(labels, n)] = 0.0
    return (c / (K - 1)) * ((K - 1) * probs - others) / n


# -- aggregation -----------------------------------------------------------

@dataclass(frozen=True)
class LossConfig:
    consistency_weight: float = 100.0
    consistency_kind: str = "mse"
    logit_distance_weight: float = 0.01
    rampup_epochs: float = 5.0
    entropy_min_weight: float = 0.0
    entropy_scope: str = "all"  # all | unlabeled
    mean_entropy_max_weight: float = 0.0
    push_away_weight: float = 0.0
    enabled: frozenset = field(default=frozenset({"supervised", "consistency", "logit_distance"}))

    def __post_init__(self):
        object.__setattr__(self, "enabled", frozenset(self.enabled))
        unknown = self.enabled - set(TERMS)
        if unknown:
            raise LossConfigError(f"unknown loss terms {sorted(unknown)}")
        for f in fields(self):
            if f.name.endswith("_weight") and getattr(self, f.name) < 0:
                raise LossConfigError(f"{f.name} must be >= 0")
        if self.consistency_kind not in ("mse", "kl"):
            raise LossConfigError(f"unknown consistency kind {self.consistency_kind!r}")
        if self.entropy_scope not in ("all", "unlabeled"):
            raise LossConfigError(f"entropy_scope must be all|unlabeled, got {self.entropy_scope!r}")
        if "push_away" in self.enabled and self.push_away_weight <= 0:
            raise LossConfigError("push_away enabled with non-positive weight")

    def weights(self, epoch: float) -> dict[str, float]:
        """Effective multiplier per enabled term at ``epoch``."""
        w = {
            "supervised": 1.0,
            "consistency": rampup_weight(epoch, self.rampup_epochs, self.consistency_weight),
            "logit_distance": self.logit_distance_weight,
            "entropy_min": self.entropy_min_weight,
            "mean_entropy_max": self.mean_entropy_max_weight,
            # c already scales the push-away value itself
            "push_away": 1.0,
        }
        return {k: v for k, v in w.items() if k in self.enabled}

    @property
    def uses_teacher(self) -> bool:
        return bool(self.enabled & {"consistency", "logit_distance"})


@dataclass(frozen=True)
class LossBreakdown:
    supervised: float = 0.0
    consistency: float = 0.0
    logit_distance: float = 0.0
    entropy_min: float = 0.0
    mean_entropy_max: float = 0.0
    push_away: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def total_loss(cfg: LossConfig, parts: Mapping[str, float], epoch: float = math.inf) -> LossBreakdown:
    """Weighted sum of the enabled terms; the breakdown keeps unweighted values."""
    missing = [t for t in cfg.enabled if t not in parts]
    if missing:
        raise LossConfigError(f"enabled loss terms missing: {sorted(missing)}")
    weights = cfg.weights(epoch)
    total = sum(weights[t] * float(parts[t]) for t in sorted(cfg.enabled))
    vals = {t: float(parts[t]) for t in cfg.enabled}
    return LossBreakdown(total=total, **vals)
