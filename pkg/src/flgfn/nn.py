"""Multilayer perceptron and Adam on top of :mod:`flgfn.autodiff`."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import ShapeError, Tensor

LEAKY_SLOPE = 0.01


class Mlp:
    """Fully connected network with leaky-ReLU between layers (none after the last).

    Weights follow the uniform fan-in initialisation ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator | None = None,
                 slope: float = LEAKY_SLOPE):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output size")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.sizes = tuple(int(s) for s in sizes)
        self.slope = slope
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)),
                                       requires_grad=True, name=f"W{i}"))
            self.biases.append(Tensor(rng.uniform(-bound, bound, fan_out),
                                      requires_grad=True, name=f"b{i}"))

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def _check(self, x_shape) -> None:
        if not x_shape or x_shape[-1] != self.sizes[0]:
            raise ShapeError(f"MLP expects input dimension {self.sizes[0]}, got shape {x_shape}")

    def __call__(self, x: Tensor) -> Tensor:
        self._check(x.shape)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w + b
            if i < last:
                x = x.leaky_relu(self.slope)
        return x

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Forward pass on raw arrays without recording a graph."""
        x = np.asarray(x, dtype=np.float64)
        self._check(x.shape)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w.data + b.data
            if i < last:
                x = np.where(x > 0, x, self.slope * x)
        return x

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            value = np.asarray(arrays[p.name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"{p.name}: expected {p.shape}, got {value.shape}")
            p.data = value.copy()


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new parameter arrays; ``state`` is updated in place."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise ShapeError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(p)}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient; Adam step rejected")
    if not state.m:
        state.m = [np.zeros_like(p, dtype=np.float64) for p in params]
        state.v = [np.zeros_like(p, dtype=np.float64) for p in params]
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out, state


class Adam:
    """Adam over parameter groups, each with its own learning rate."""

    def __init__(self, groups: Sequence[tuple[Sequence[Tensor], float]],
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.groups = [(list(params), float(lr)) for params, lr in groups]
        self.states = [AdamState(betas[0], betas[1], eps) for _ in self.groups]

    def parameters(self) -> list[Tensor]:
        return [p for params, _ in self.groups for p in params]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def step(self) -> None:
        staged = []
        for (params, lr), state in zip(self.groups, self.states):
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            for g in grads:
                if not np.all(np.isfinite(g)):
                    raise NonFiniteGradientError("non-finite gradient; Adam step rejected")
            staged.append((params, grads, lr, state))
        for params, grads, lr, state in staged:
            new, _ = adam_step([p.data for p in params], grads, state, lr)
            for p, value in zip(params, new):
                p.data = value
