"""First-order optimizers.

The step functions are plain functions over (params, grads, state) so they
can be tested in isolation; :class:`SGD` and :class:`Adam` bundle them with
their state for training loops.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class OptimizerState:
    lr: float
    step: int = 0
    buffers: dict[str, list[np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


def _check(params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> None:
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimizerState,
             momentum: float = 0.0) -> None:
    _check(params, grads)
    if momentum:
        bufs = state.buffers.setdefault("momentum", [np.zeros_like(p.data) for p in params])
    for i, (p, g) in enumerate(zip(params, grads)):
        if momentum:
            bufs[i] = momentum * bufs[i] + g
            g = bufs[i]
        p.data = (p.data - state.lr * g).astype(p.dtype, copy=False)
    state.step += 1


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimizerState,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    _check(params, grads)
    m = state.buffers.setdefault("m", [np.zeros_like(p.data) for p in params])
    v = state.buffers.setdefault("v", [np.zeros_like(p.data) for p in params])
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * (g * g)
        mhat = m[i] / c1
        vhat = v[i] / c2
        p.data = (p.data - state.lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype, copy=False)


class _Optimizer:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.state = OptimizerState(lr=lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _grads(self) -> list[np.ndarray]:
        return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]


class SGD(_Optimizer):
    def __init__(self, params, lr: float = 0.01, momentum: float = 0.0):
        super().__init__(params, lr)
        self.momentum = momentum

    def step(self) -> None:
        sgd_step(self.params, self._grads(), self.state, momentum=self.momentum)


class Adam(_Optimizer):
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.betas = betas
        self.eps = eps

    def step(self) -> None:
        adam_step(self.params, self._grads(), self.state,
                  beta1=self.betas[0], beta2=self.betas[1], eps=self.eps)
