"""AdamW and SGD-with-momentum, plus the two-phase training schedule
(AdamW for the initial epochs, momentum SGD for a final tail)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Parameter


class AdamW:
    """Decoupled weight decay: the decay term multiplies the parameter
    directly and never enters the moment estimates."""

    def __init__(self, params: list[Parameter], lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01,
                 decay_bn_and_bias: bool = True):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.decay_bn_and_bias = decay_bn_and_bias
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def _decays(self, p: Parameter) -> bool:
        if self.decay_bn_and_bias:
            return True
        return p.data.ndim > 1    # skip biases and BN gamma/beta

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                raise ValueError(f"parameter {p.name!r} has no gradient")
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if self._decays(p):
                update = update + self.lr * self.weight_decay * p.data
            p.data -= update.astype(p.data.dtype, copy=False)


class SGD:
    """Momentum SGD: buf = momentum*buf + g; theta -= lr*buf."""

    def __init__(self, params: list[Parameter], lr: float = 0.001, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.buf = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, buf in zip(self.params, self.buf):
            if p.grad is None:
                raise ValueError(f"parameter {p.name!r} has no gradient")
            buf *= self.momentum
            buf += p.grad
            p.data -= (self.lr * buf).astype(p.data.dtype, copy=False)


@dataclass(frozen=True)
class Schedule:
    """AdamW for epochs [0, total-tail); SGD for the final tail epochs."""

    total_epochs: int
    sgd_tail: int = 20

    @property
    def tail(self) -> int:
        return min(self.sgd_tail, self.total_epochs // 2)

    def phase(self, epoch: int) -> str:
        if not 0 <= epoch < self.total_epochs:
            raise ValueError(f"epoch {epoch} outside [0, {self.total_epochs})")
        return "adamw" if epoch < self.total_epochs - self.tail else "sgd"


def select_optimizer(epoch: int, sched: Schedule) -> str:
    return sched.phase(epoch)
