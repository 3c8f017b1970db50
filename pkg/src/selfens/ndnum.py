"""Dense math for the student network: MLP forward/backward, softmax, SGD.

Tensors are plain float64 ``numpy`` arrays; a batch is ``(rows, features)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from selfens import _kernels


class ShapeError(ValueError):
    pass


@dataclass
class MlpParams:
    """Ordered ``(weight, bias)`` pairs; weight is ``(fan_in, fan_out)``.

    ReLU is applied after every layer except the last.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {i} input {w.shape[0]} != previous output "
                                 f"{self.weights[i - 1].shape[1]}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [w.shape[1] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        """Flat view ``[w0, b0, w1, b1, ...]`` sharing memory with the params."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> MlpParams:
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> MlpParams:
        return MlpParams([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases])

    def check_congruent(self, other: MlpParams) -> None:
        if len(self.weights) != len(other.weights) or any(
                a.shape != b.shape for a, b in zip(self.arrays(), other.arrays())):
            raise ShapeError(f"incongruent parameter sets {self.dims} vs {other.dims}")

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


# Gradients carry exactly the same structure as the parameters.
Gradients = MlpParams


def init_mlp(dims: list[int], rng: np.random.Generator) -> MlpParams:
    """He-uniform init: ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``, zero biases."""
    if len(dims) < 2:
        raise ShapeError("need at least input and output dims")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def _check_batch(params: MlpParams, batch: np.ndarray) -> None:
    if batch.ndim != 2 or batch.shape[1] != params.in_dim:
        raise ShapeError(f"batch shape {batch.shape} does not match input dim {params.in_dim}")


def mlp_forward(params: MlpParams, batch: np.ndarray) -> np.ndarray:
    _check_batch(params, batch)
    h = batch
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            np.maximum(h, 0.0, out=h)
    return h


def forward_with_cache(params: MlpParams, batch: np.ndarray):
    """Forward pass that also returns every layer input for ``mlp_backward``."""
    _check_batch(params, batch)
    inputs = [batch]
    h = batch
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            np.maximum(h, 0.0, out=h)
            inputs.append(h)
    return h, inputs


def mlp_backward(params: MlpParams, batch: np.ndarray, upstream: np.ndarray,
                 cache: list[np.ndarray] | None = None) -> Gradients:
    """Gradients of a scalar loss given ``dloss/dlogits`` for the batch.

    ``cache`` is the layer-input list from ``forward_with_cache``; when absent
    the forward pass is recomputed.
    """
    if cache is None:
        _, cache = forward_with_cache(params, batch)
    else:
        _check_batch(params, batch)
    if upstream.shape != (batch.shape[0], params.out_dim):
        raise ShapeError(f"upstream grads {upstream.shape} vs logits "
                         f"({batch.shape[0]}, {params.out_dim})")
    n_layers = len(params.weights)
    gw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    delta = upstream
    for i in range(n_layers - 1, -1, -1):
        gw[i] = cache[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i:
            delta = delta @ params.weights[i].T
            # cache[i] is the post-ReLU activation feeding layer i
            delta *= cache[i] > 0
    return MlpParams(gw, gb)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, overflow-safe via max subtraction. Accepts 1-D or 2-D."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 1:
        return _kernels.softmax_rows(z[None, :])[0]
    return _kernels.softmax_rows(z)


@dataclass
class OptimizerState:
    velocity: Gradients
    base_lr: float
    weight_decay: float = 2e-4
    step: int = 0
    total_steps: int = 1

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.total_steps <= 0 or not 0 <= self.step <= self.total_steps:
            raise ValueError(f"need 0 <= step ({self.step}) <= total_steps ({self.total_steps})")

    @classmethod
    def for_params(cls, params: MlpParams, base_lr: float, weight_decay: float = 2e-4,
                   total_steps: int = 1) -> OptimizerState:
        return cls(params.zeros_like(), base_lr, weight_decay, 0, total_steps)


def cosine_lr(state: OptimizerState) -> float:
    """Single cosine cycle from ``base_lr`` at step 0 down to 0 at ``total_steps``."""
    if state.step >= state.total_steps:
        return 0.0
    if state.step == 0:
        return state.base_lr
    return state.base_lr * 0.5 * (1.0 + math.cos(math.pi * state.step / state.total_steps))


def sgd_nesterov_step(params: MlpParams, grads: Gradients, state: OptimizerState,
                      momentum: float = 0.9) -> tuple[MlpParams, OptimizerState]:
    """One Nesterov step, in place; returns ``(params, state)`` for chaining.

    Weight decay is folded into the weight gradients only (biases undecayed)::

        g <- g + wd * w
        v <- mu * v - lr * g
        p <- p + mu * v - lr * g
    """
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    params.check_congruent(grads)
    params.check_congruent(state.velocity)
    lr = cosine_lr(state)
    for w, g, v in zip(params.weights, grads.weights, state.velocity.weights):
        _kernels.nesterov_update(w, g, v, lr, momentum, state.weight_decay)
    for b, g, v in zip(params.biases, grads.biases, state.velocity.biases):
        _kernels.nesterov_update(b, g, v, lr, momentum, 0.0)
    state.step = min(state.step + 1, state.total_steps)
    return params, state
