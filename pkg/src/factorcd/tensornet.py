"""Small numpy neural-network engine.

Fixed layer types only (dense, tanh, dropout, embedding) with hand-written
backward passes, softmax + focal cross-entropy, Adam/Nesterov-Adam with L2
and optional gradient noise, Newbob learning-rate control, finite-difference
gradient checking and an ``.npz`` checkpoint container.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np


class Parameter:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def _uniform(rng, shape, fan_in, dtype):
    # LeCun-uniform: unit output variance for unit input variance
    limit = math.sqrt(3.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    def params(self) -> list[Parameter]:
        return []

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng, name: str, dtype=np.float32):
        self.W = Parameter(f"{name}.W", _uniform(rng, (n_in, n_out), n_in, dtype))
        self.b = Parameter(f"{name}.b", np.zeros(n_out, dtype=dtype))
        self._x = None

    @property
    def n_in(self) -> int:
        return self.W.value.shape[0]

    @property
    def n_out(self) -> int:
        return self.W.value.shape[1]

    def params(self):
        return [self.W, self.b]

    def forward(self, x, train=False):
        if x.shape[-1] != self.n_in:
            raise ValueError(f"{self.W.name}: expected input dim {self.n_in}, got {x.shape[-1]}")
        self._x = x
        return x @ self.W.value + self.b.value

    def backward(self, grad):
        x = self._x.reshape(-1, self.n_in)
        g = grad.reshape(-1, self.n_out)
        self.W.grad += x.T @ g
        self.b.grad += g.sum(axis=0)
        return grad @ self.W.value.T


class Tanh(Layer):
    def forward(self, x, train=False):
        self._y = np.tanh(x)
        return self._y

    def backward(self, grad):
        return grad * (1.0 - self._y * self._y)


class Dropout(Layer):
    """Inverted dropout; identity outside train mode."""

    def __init__(self, p: float, rng):
        if not 0.0 <= p < 1.0:
            raise ValueError("dropout probability must lie in [0, 1)")
        self.p = p
        self.rng = rng
        self._mask = None

    def forward(self, x, train=False):
        if not train or self.p == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.p
        self._mask = (self.rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask


class Embedding(Layer):
    def __init__(self, n: int, dim: int, rng, name: str, dtype=np.float32):
        self.table = Parameter(f"{name}.E", _uniform(rng, (n, dim), 1, dtype))
        self._idx = None

    def params(self):
        return [self.table]

    def forward(self, idx, train=False):
        idx = np.asarray(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= len(self.table.value)):
            raise IndexError(f"{self.table.name}: index out of range")
        self._idx = idx
        return self.table.value[idx]

    def backward(self, grad):
        np.add.at(self.table.grad, self._idx.ravel(), grad.reshape(-1, grad.shape[-1]))
        return None


class Sequential(Layer):
    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


def forward(stack: Sequential, x, train: bool = False) -> list[np.ndarray]:
    """Run ``stack`` and return every intermediate activation (input first)."""
    acts = [x]
    for layer in stack.layers:
        acts.append(layer.forward(acts[-1], train))
    return acts


def mlp(sizes: Sequence[int], rng, name: str, dropout: float = 0.0, dtype=np.float32) -> Sequential:
    """Dense/tanh(/dropout) stack; the last Dense is left linear."""
    layers: list[Layer] = []
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense(a, b, rng, f"{name}.{k}", dtype))
        if k < len(sizes) - 2:
            layers.append(Tanh())
            if dropout:
                layers.append(Dropout(dropout, rng))
    return Sequential(layers)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def focal_cross_entropy(posteriors: np.ndarray, targets: np.ndarray, gamma: float = 0.0):
    """Mean focal loss ``-(1-p)^gamma log p`` and its gradient w.r.t. the logits.

    ``posteriors`` are softmax outputs ``(B, K)``; the returned gradient is
    for the pre-softmax logits and already divided by the batch size.
    """
    if gamma < 0:
        raise ValueError("focal gamma must be >= 0")
    targets = np.asarray(targets)
    B, K = posteriors.shape
    if targets.size and (targets.min() < 0 or targets.max() >= K):
        raise IndexError("target index out of range")
    rows = np.arange(B)
    p = posteriors[rows, targets].astype(np.float64)
    p_safe = np.maximum(p, 1e-30)
    logp = np.log(p_safe)
    q = 1.0 - p
    weight = q ** gamma
    loss = float(np.mean(-weight * logp)) if B else 0.0
    # dL/dp, then chain through dp/dz_k = p (delta_ky - s_k)
    if gamma == 0.0:
        dl_dp_times_p = -np.ones_like(p)
    else:
        dl_dp_times_p = gamma * q ** (gamma - 1.0) * logp * p - weight
    coef = (dl_dp_times_p / max(B, 1)).astype(posteriors.dtype)
    grad = -coef[:, None] * posteriors
    grad[rows, targets] += coef
    return loss, grad


@dataclass
class OptimizerState:
    """Adam moments plus the shared hyper-parameters."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2: float = 0.01
    noise_variance: float = 0.0
    nesterov: bool = True
    seed: int = 0
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        self._rng = np.random.default_rng([self.seed, 7])


def adam_step(params: Iterable[Parameter], state: OptimizerState) -> None:
    """One (Nesterov-)Adam update in place; gradients are left untouched."""
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for p in params:
        g = p.grad.astype(np.float64)
        if state.l2:
            g = g + state.l2 * p.value
        if state.noise_variance > 0:
            g = g + state._rng.normal(0.0, math.sqrt(state.noise_variance), size=g.shape)
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros(p.value.shape)
            state.v[p.name] = np.zeros(p.value.shape)
        v = state.v[p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        v_hat = v / (1 - b2 ** t)
        if state.nesterov:
            # Nadam lookahead: bias-corrected next-step momentum plus current gradient
            m_hat = b1 * m / (1 - b1 ** (t + 1)) + (1 - b1) * g / (1 - b1 ** t)
        else:
            m_hat = m / (1 - b1 ** t)
        p.value -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.value.dtype)


@dataclass
class NewbobState:
    lr: float = 5e-4
    decay: float = math.sqrt(0.8)
    floor: float = 5e-6
    best: float = math.inf
    initial: float | None = None

    def __post_init__(self):
        if self.initial is None:
            self.initial = self.lr
        if not self.floor <= self.lr <= self.initial:
            raise ValueError("Newbob requires floor <= lr <= initial lr")


def newbob_update(state: NewbobState, dev_frame_error_rate: float) -> NewbobState:
    if not 0.0 <= dev_frame_error_rate <= 1.0:
        raise ValueError("frame error rate must lie in [0, 1]")
    if dev_frame_error_rate < state.best:
        state.best = dev_frame_error_rate
    else:
        state.lr = max(state.floor, state.lr * state.decay)
    return state


def gradient_check(params: Sequence[Parameter], loss_fn: Callable[[], float],
                   eps: float = 1e-5, n_coords: int = 20, seed: int = 0) -> float:
    """Max relative error of analytic vs central-difference gradients.

    ``loss_fn`` must recompute the loss from the current parameter values and
    leave analytic gradients in ``p.grad`` (it is called once up front for
    that). Checks ``n_coords`` random coordinates per parameter.
    """
    for p in params:
        p.zero_grad()
    loss_fn()
    analytic = {p.name: p.grad.copy() for p in params}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn()
            flat[i] = orig - eps
            down = loss_fn()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic[p.name].reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-7)
            worst = max(worst, abs(a - numeric) / denom)
    for p in params:
        p.grad[...] = analytic[p.name]
    return worst


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write named tensors (sorted by name) plus JSON metadata to ``.npz``."""
    payload = {k: np.asarray(arrays[k]) for k in sorted(arrays)}
    payload["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
        meta = json.loads(bytes(data["__meta__"]).decode()) if "__meta__" in data.files else {}
    return arrays, meta
