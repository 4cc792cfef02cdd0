"""Losses with explicit gradients: cross-entropy, MSE, L1 activity penalty."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass
class LossValue:
    """Scalar loss with its data / regularization decomposition."""
    data_term: float
    reg_term: float = 0.0

    @property
    def total(self) -> float:
        return self.data_term + self.reg_term


def cross_entropy_loss(probs, label):
    """-ln probs[label] for a single probability vector."""
    p = np.asarray(probs)
    k = p.shape[-1]
    if not (0 <= int(label) < k):
        raise IndexError(f"label {label} out of range for {k} classes")
    return LossValue(data_term=float(-np.log(p[..., int(label)])))


def cross_entropy_batch(probs, labels):
    """Mean -ln p[label] over a batch; probs (N,K), labels (N,)."""
    p = np.asarray(probs)
    y = np.asarray(labels)
    k = p.shape[-1]
    if y.min() < 0 or y.max() >= k:
        raise IndexError(f"labels outside [0,{k})")
    picked = p[np.arange(p.shape[0]), y]
    return LossValue(data_term=float(-np.log(picked).mean()))


def cross_entropy_grad_logits(probs, labels, weight=1.0):
    """Fused softmax+CE gradient w.r.t. pre-softmax logits: (probs - onehot) / N."""
    p = np.asarray(probs)
    y = np.asarray(labels).reshape(-1)
    if p.ndim == 1:
        p = p[None]
    g = p.copy()
    g[np.arange(g.shape[0]), y] -= 1.0
    g *= weight / g.shape[0]
    return g


def mse_loss(output, target):
    """Mean squared error over all elements, with gradient (2/M)(o - t)."""
    o = np.asarray(output)
    t = np.asarray(target)
    if o.shape != t.shape:
        raise ShapeError(f"mse: shapes differ {o.shape} vs {t.shape}")
    diff = o - t
    m = diff.size
    loss = LossValue(data_term=float(np.mean(diff * diff)))
    grad = (2.0 / m) * diff
    return loss, grad


def l1_activity_penalty(activations, lam):
    """lam * sum(|a|), with subgradient lam * sign(a) (0 at a == 0)."""
    if lam < 0:
        raise ShapeError("l1 coefficient must be >= 0")
    a = np.asarray(activations)
    loss = LossValue(data_term=0.0, reg_term=float(lam * np.abs(a).sum()))
    grad = lam * np.sign(a)
    return loss, grad
