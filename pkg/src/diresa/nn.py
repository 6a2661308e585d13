"""Minimal dense network engine: layers, reverse-mode gradients, Adam.

Everything runs in float64. Layers keep their parameters as NumPy arrays
which may be views into a larger flat buffer (see ``diresa.models``), so
every update in this module is done in place.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .errors import DegenerateError, DimensionError, StructureError, TrainingDivergence

ACTIVATIONS = ("relu", "linear")


def glorot_uniform(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_out, n_in))


@dataclass(eq=False)
class DenseLayer:
    """Fully connected layer computing ``activation(x @ W.T + b)``.

    ``weights`` has shape (out, in).
    """

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "linear"
    name: str = ""

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"layer {self.name or '?'}: weights {self.weights.shape} and bias "
                f"{self.bias.shape} disagree"
            )

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    def params(self):
        return (self.weights, self.bias)


@dataclass(eq=False)
class BatchNormLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-3
    momentum: float = 0.99
    name: str = ""

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("batch-norm epsilon must be positive")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("batch-norm momentum must lie in (0, 1)")
        if np.any(self.running_var < 0):
            raise ValueError("running variance must be non-negative")

    @classmethod
    def fresh(cls, width: int, **kw) -> "BatchNormLayer":
        return cls(np.ones(width), np.zeros(width), np.zeros(width), np.ones(width), **kw)

    @property
    def n_in(self) -> int:
        return self.gamma.shape[0]

    n_out = n_in

    def params(self):
        return (self.gamma, self.beta)


Layer = Union[DenseLayer, BatchNormLayer]


@dataclass
class Tape:
    """Forward activations of one stack pass, consumed by :func:`backward`."""

    layers: list
    caches: list = field(default_factory=list)
    batch_size: int = 0


def _check_width(layer, batch):
    if batch.ndim != 2 or batch.shape[1] != layer.n_in:
        got = batch.shape[1] if batch.ndim == 2 else batch.shape
        raise DimensionError(
            f"layer {layer.name or type(layer).__name__}: expected input width "
            f"{layer.n_in}, got {got}"
        )


def _dense(layer: DenseLayer, x):
    _check_width(layer, x)
    pre = x @ layer.weights.T
    pre += layer.bias
    if layer.activation == "relu":
        mask = pre > 0
        return pre * mask, (x, mask)
    return pre, (x, None)


def _dense_back(layer: DenseLayer, cache, dy):
    x, mask = cache
    if mask is not None:
        dy = dy * mask
    dw = dy.T @ x
    db = dy.sum(axis=0)
    return (dw, db), dy @ layer.weights


def _batchnorm(layer: BatchNormLayer, x, mode, update_stats=True):
    _check_width(layer, x)
    if mode == "train":
        if x.shape[0] < 2:
            raise DegenerateError("batch normalization in train mode needs at least 2 rows")
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        if update_stats:
            m = layer.momentum
            layer.running_mean[...] = m * layer.running_mean + (1.0 - m) * mu
            layer.running_var[...] = m * layer.running_var + (1.0 - m) * var
    elif mode == "infer":
        mu, var = layer.running_mean, layer.running_var
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + layer.epsilon)
    xhat = (x - mu) * inv_std
    return layer.gamma * xhat + layer.beta, (xhat, inv_std, mode)


def _batchnorm_back(layer: BatchNormLayer, cache, dy):
    xhat, inv_std, mode = cache
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * layer.gamma
    if mode == "infer":
        return (dgamma, dbeta), dxhat * inv_std
    n = dy.shape[0]
    dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return (dgamma, dbeta), dx


def dense_forward(layer: DenseLayer, batch: np.ndarray) -> np.ndarray:
    return _dense(layer, np.asarray(batch, dtype=np.float64))[0]


def batchnorm_forward(layer: BatchNormLayer, batch: np.ndarray, mode: str = "train") -> np.ndarray:
    """Normalize ``batch`` column-wise.

    Train mode uses the batch statistics and folds them into the running
    averages; infer mode uses the running averages only.
    """
    return _batchnorm(layer, np.asarray(batch, dtype=np.float64), mode)[0]


def forward_stack(layers: Sequence[Layer], batch: np.ndarray, mode: str = "train",
                  update_stats: bool = True):
    """Run ``batch`` through ``layers`` and return ``(output, tape)``."""
    x = np.asarray(batch, dtype=np.float64)
    tape = Tape(list(layers), [], x.shape[0])
    for layer in layers:
        if isinstance(layer, DenseLayer):
            x, cache = _dense(layer, x)
        else:
            x, cache = _batchnorm(layer, x, mode, update_stats)
        tape.caches.append(cache)
    return x, tape


def backward(layers: Sequence[Layer], tape: Tape, output_grad: np.ndarray):
    """Reverse pass through a stack.

    Returns ``(param_grads, input_grad)`` where ``param_grads[i]`` is the
    tuple of gradients for ``layers[i].params()``.
    """
    if len(tape.layers) != len(layers) or any(a is not b for a, b in zip(tape.layers, layers)):
        raise StructureError("tape was recorded on a different layer stack")
    if output_grad.shape[0] != tape.batch_size:
        raise StructureError(
            f"output gradient has {output_grad.shape[0]} rows, tape batch is {tape.batch_size}"
        )
    grads = [None] * len(layers)
    dy = output_grad
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        if isinstance(layer, DenseLayer):
            grads[i], dy = _dense_back(layer, tape.caches[i], dy)
        else:
            grads[i], dy = _batchnorm_back(layer, tape.caches[i], dy)
    return grads, dy


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    lr: float = 1e-3

    @classmethod
    def zeros(cls, n: int, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if params.shape != grads.shape:
        raise DimensionError(f"params {params.shape} and grads {grads.shape} differ")
    finite = np.isfinite(grads)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise TrainingDivergence(f"non-finite gradient at parameter index {bad}", index=bad)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1 ** state.t)
    v_hat = state.v / (1.0 - b2 ** state.t)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar ``f()`` w.r.t. ``x``.

    ``x`` is perturbed in place (so views into model storage work) and
    restored afterwards.
    """
    grad = np.empty(x.size)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(x.shape)


def relative_error(analytic, numeric, floor: float = 1e-5) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps round-off on exactly-zero gradients (about eps*|f|/h for
    central differences) from reading as a large relative error.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
