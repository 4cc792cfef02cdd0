"""Parameter update rules: plain/momentum SGD and Adam with bias correction."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def sgd_step(param, grad, lr):
    """theta <- theta - lr * grad, in place."""
    if param.shape != grad.shape:
        raise ShapeError(f"sgd: param {param.shape} vs grad {grad.shape}")
    param -= lr * grad
    return param


def adam_step(param, grad, m, v, t, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update; m, v are updated in place, t is the new step count."""
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise ShapeError("adam: param/grad/moment shapes disagree")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)
    return param


class SGD:
    """SGD with optional classical momentum: v <- mu*v + g; theta <- theta - lr*v."""

    kind = "sgd"

    def __init__(self, lr=0.01, momentum=0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict):
        for key, p in params.items():
            g = grads[key]
            if p.shape != g.shape:
                raise ShapeError(f"sgd: {key} param {p.shape} vs grad {g.shape}")
            if self.momentum:
                v = self.velocity.get(key)
                if v is None:
                    v = np.zeros_like(p)
                    self.velocity[key] = v
                v *= self.momentum
                v += g
                p -= self.lr * v
            else:
                p -= self.lr * g


class Adam:
    kind = "adam"

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        for key, p in params.items():
            g = grads[key]
            if key not in self.m:
                self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
            adam_step(p, g, self.m[key], self.v[key], self.t,
                      lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)
