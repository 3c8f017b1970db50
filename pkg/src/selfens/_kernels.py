"""Small in-place numpy kernels shared by the optimizer, the ensembles and the filter.

Kept in one module so the hot loops have a single place to optimise.
"""
from __future__ import annotations

import numpy as np

BACKEND = "numpy"


def softmax_rows(z):
    e = z - z.max(axis=1, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=1, keepdims=True)
    return e


def nesterov_update(p, g, v, lr, mu, wd):
    if wd:
        g = g + wd * p
    v *= mu
    v -= lr * g
    p += mu * v - lr * g


def ema_update(target, source, decay):
    target *= decay
    target += (1.0 - decay) * source


def ema_update_rows(table, rows, values, decay):
    table[rows] = decay * table[rows] + (1.0 - decay) * values


def label_rank(scores, labels):
    """Rank (0 = top) of each row's label; ties resolved by lowest class index.

    A class ``j`` outranks the label ``y`` iff ``s[j] > s[y]`` or
    ``s[j] == s[y] and j < y``.
    """
    n, k = scores.shape
    labels = np.asarray(labels, dtype=np.int64)
    own = scores[np.arange(n), labels][:, None]
    cols = np.arange(k)[None, :]
    above = (scores > own) | ((scores == own) & (cols < labels[:, None]))
    return above.sum(axis=1).astype(np.int64)
