"""First-order optimizers over lists of :class:`Tensor` parameters.

The ``*_step`` functions are the pure update rules; the classes keep the
per-parameter state and update ``Tensor.data`` in place.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def sgd_step(param, grad, lr: float, l2: float = 0.0):
    grad = np.asarray(grad)
    if l2:
        grad = grad + l2 * np.asarray(param)
    return np.asarray(param) - lr * grad


def adamw_step(param, grad, state: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0):
    """One AdamW update; ``state`` holds ``t``, ``m`` and ``v`` and is mutated."""
    param = np.asarray(param)
    grad = np.asarray(grad)
    b1, b2 = betas
    t = state.get("t", 0) + 1
    m = b1 * state.get("m", np.zeros_like(param)) + (1 - b1) * grad
    v = b2 * state.get("v", np.zeros_like(param)) + (1 - b2) * grad * grad
    state.update(t=t, m=m, v=v)
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    decayed = param * (1 - lr * weight_decay)
    return decayed - lr * m_hat / (np.sqrt(v_hat) + eps)


def adam_step(param, grad, state: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
              l2: float = 0.0):
    """Adam with coupled L2 (the penalty gradient goes through the moments)."""
    grad = np.asarray(grad)
    if l2:
        grad = grad + l2 * np.asarray(param)
    return adamw_step(param, grad, state, lr, betas, eps, weight_decay=0.0)


def rmsprop_step(param, grad, state: dict, lr: float, alpha: float = 0.99, eps: float = 1e-8,
                 l2: float = 0.0):
    param = np.asarray(param)
    grad = np.asarray(grad)
    if l2:
        grad = grad + l2 * param
    sq = alpha * state.get("sq", np.zeros_like(param)) + (1 - alpha) * grad * grad
    state["sq"] = sq
    return param - lr * grad / (np.sqrt(sq) + eps)


class Optimizer:
    def __init__(self, params, lr: float):
        self.params: list[Tensor] = list(params)
        self.lr = lr
        self.state = [dict() for _ in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p, st in zip(self.params, self.state):
            if p.grad is None:
                continue
            p.data = self._update(p.data, p.grad, st).astype(p.dtype, copy=False)

    def _update(self, param, grad, state):
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, params, lr: float, l2: float = 0.0):
        super().__init__(params, lr)
        self.l2 = l2

    def _update(self, param, grad, state):
        return sgd_step(param, grad, self.lr, self.l2)


class AdamW(Optimizer):
    def __init__(self, params, lr: float = 5e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-2):
        super().__init__(params, lr)
        self.betas, self.eps, self.weight_decay = betas, eps, weight_decay

    def _update(self, param, grad, state):
        return adamw_step(param, grad, state, self.lr, self.betas, self.eps, self.weight_decay)


class Adam(Optimizer):
    def __init__(self, params, lr: float, l2: float = 0.0):
        super().__init__(params, lr)
        self.l2 = l2

    def _update(self, param, grad, state):
        return adam_step(param, grad, state, self.lr, l2=self.l2)


class RMSprop(Optimizer):
    def __init__(self, params, lr: float, l2: float = 0.0):
        super().__init__(params, lr)
        self.l2 = l2

    def _update(self, param, grad, state):
        return rmsprop_step(param, grad, state, self.lr, l2=self.l2)


def make_optimizer(kind: str, params, lr: float, l2: float = 0.0) -> Optimizer:
    kinds = {"sgd": SGD, "adam": Adam, "rmsprop": RMSprop}
    if kind not in kinds:
        raise ValueError(f"unknown optimizer {kind!r}")
    return kinds[kind](params, lr, l2=l2)
