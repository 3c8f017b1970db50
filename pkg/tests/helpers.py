"""Shared test utilities: finite-difference gradient checks over the full objective."""
from __future__ import annotations

import itertools
import math

import numpy as np

from selfens.losses import LossConfig
from selfens.ensemble import PredictionEnsemble, TeacherState, prediction_ema_update, teacher_ema_update
from selfens import selfloop as S
from selfens.datagen import Dataset, LabelTable
from selfens.ndnum import MlpParams, init_mlp, mlp_backward, softmax
from selfens.selfloop import objective

NETS = ([6, 5], [6, 8, 5], [6, 7, 6, 5])

# one entry per loss term (plus KL consistency and a full weighted mixture)
TERM_CONFIGS = {
    "supervised": LossConfig(enabled={"supervised"}),
    "consistency_mse": LossConfig(enabled={"consistency"}, consistency_weight=3.0),
    "consistency_kl": LossConfig(enabled={"consistency"}, consistency_kind="kl",
                                 consistency_weight=2.0),
    "logit_distance": LossConfig(enabled={"logit_distance"}, logit_distance_weight=0.7),
    "entropy_min_all": LossConfig(enabled={"entropy_min"}, entropy_min_weight=1.3),
    "entropy_min_unlabeled": LossConfig(enabled={"entropy_min"}, entropy_min_weight=1.3,
                                        entropy_scope="unlabeled"),
    "mean_entropy_max": LossConfig(enabled={"mean_entropy_max"}, mean_entropy_max_weight=0.9),
    "push_away": LossConfig(enabled={"push_away"}, push_away_weight=0.5),
    "mixture": LossConfig(enabled={"supervised", "consistency", "logit_distance",
                                   "entropy_min", "mean_entropy_max", "push_away"},
                          consistency_weight=5.0, logit_distance_weight=0.1,
                          entropy_min_weight=0.3, mean_entropy_max_weight=0.2,
                          push_away_weight=0.4),
}


def combos():
    return list(itertools.product(range(len(NETS)), sorted(TERM_CONFIGS)))


def _rand_net(rng, dims):
    return MlpParams([rng.normal(scale=0.8, size=(a, b)) for a, b in zip(dims[:-1], dims[1:])],
                     [rng.normal(scale=0.3, size=b) for b in dims[1:]])


def gradcheck(net_idx: int, term: str, seed: int = 0, eps: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    The loss is the full batch objective (ramp-up at its mid point), so the
    check covers the term, its weight and the backward pass through the net.
    """
    dims = NETS[net_idx]
    rng = np.random.default_rng([seed, net_idx, sorted(TERM_CONFIGS).index(term)])
    student, teacher = _rand_net(rng, dims), _rand_net(rng, dims)
    n, n_lab, k = 9, 4, dims[-1]
    xs = rng.normal(size=(n, dims[0]))
    xt = xs + 0.1 * rng.normal(size=xs.shape)
    labels = rng.integers(0, k, size=n)
    removed_rows = np.array([4, 6, 7])
    cfg = TERM_CONFIGS[term]
    epoch = cfg.rampup_epochs / 2

    def loss():
        return objective(student, teacher, xs, xt, labels[:n_lab], removed_rows,
                         labels[removed_rows], n_lab, cfg, epoch)[0].total

    _, g, cache = objective(student, teacher, xs, xt, labels[:n_lab], removed_rows,
                            labels[removed_rows], n_lab, cfg, epoch)
    analytic = mlp_backward(student, xs, g, cache)
    worst = 0.0
    for a, an in zip(student.arrays(), analytic.arrays()):
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            up = loss()
            a[i] = old - eps
            down = loss()
            a[i] = old
            fd = (up - down) / (2 * eps)
            denom = max(abs(fd), abs(an[i]))
            # entries whose true gradient is ~0 are compared absolutely
            err = abs(fd - an[i]) / denom if denom > 1e-7 else abs(fd - an[i])
            if math.isfinite(err):
                worst = max(worst, err)
            else:
                return math.inf
    return worst


# -- EMA closed forms ---------------------------------------------------------

def teacher_closed_form_error(t: int = 50, decay: float = 0.99, seed: int = 0) -> float:
    """Max abs gap between ``t`` in-place teacher updates and
    ``beta^t theta_0 + (1 - beta) sum_i beta^(t-i) s_i``."""
    rng = np.random.default_rng(seed)
    dims = [4, 6, 3]
    theta0 = _rand_net(rng, dims)
    students = [_rand_net(rng, dims) for _ in range(t)]
    teacher = TeacherState.from_student(theta0, decay)
    for s in students:
        teacher_ema_update(teacher, s)
    worst = 0.0
    for j, got in enumerate(teacher.params.arrays()):
        expected = decay ** t * theta0.arrays()[j]
        for i, s in enumerate(students, start=1):
            expected = expected + (1 - decay) * decay ** (t - i) * s.arrays()[j]
        worst = max(worst, float(np.abs(got - expected).max()))
    assert teacher.updates_applied == t
    return worst


def prediction_closed_form_error(t: int = 50, alpha: float = 0.6, seed: int = 0) -> float:
    """Max abs gap between ``t`` constant-input prediction updates and ``(1 - alpha^t) z``."""
    rng = np.random.default_rng(seed)
    z = softmax(rng.normal(size=(3, 5)))
    ens = PredictionEnsemble.zeros(3, 5, alpha)
    worst = 0.0
    for step in range(1, t + 1):
        for row in range(3):
            prediction_ema_update(ens, row, z[row])
        worst = max(worst, float(np.abs(ens.z_bar - (1 - alpha ** step) * z).max()))
    return worst


# -- scripted SELF traces -------------------------------------------------------

TRACE_K = 3
K = TRACE_K


def trace_dataset(original, true=None):
    original = np.asarray(original)
    true = original if true is None else np.asarray(true)
    x = np.random.default_rng(0).normal(size=(len(original), 4))
    return Dataset(x, LabelTable(original, true), K)


class ScriptedTrainer:
    """Stands in for train_iteration: fixed val accuracies and z-bar rows per
    iteration; records the dataset it was handed each time.

    Without explicit z-bar rows, iteration ``i`` disagrees only with sample
    ``i mod N`` so consecutive filtered sets always differ.
    """

    def __init__(self, accs, zbars=None):
        self.accs = list(accs)
        self.zbars = zbars
        self.seen: list[Dataset] = []
        self.model = init_mlp([4, K], np.random.default_rng(0))

    def __call__(self, dataset, val, ens, cfg, warm_start=None, iteration=0, epoch_offset=0,
                 test=None, clean_val=False):
        self.seen.append(dataset)
        if self.zbars is not None:
            ens.z_bar[:] = self.zbars[iteration]
        else:
            orig = dataset.labels.original
            pred = orig.copy()
            j = iteration % len(orig)
            pred[j] = (pred[j] + 1) % K
            ens.z_bar[:] = onehots(pred)
        return S.IterationResult(
            iteration=iteration, best_model=self.model, best_student=self.model,
            best_val_acc=self.accs[iteration], best_epoch=epoch_offset, epochs_run=1,
            active_count_before=int(dataset.labels.active.sum()),
            train_precision=0.0, train_recall=0.0)


def onehots(rows):
    return np.eye(K)[np.asarray(rows)]


# -- acceptance summary ------------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok
