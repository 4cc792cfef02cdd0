"""Central finite-difference verification of analytic gradients.

Run in float64: float32 round-off alone exceeds the 1e-4 gate this check
enforces. Parameters are perturbed in place and restored, so the closures
must read the live arrays on every call.
"""

from __future__ import annotations

import numpy as np


def finite_difference_check(loss_fn, grad_fn, params: dict, probes=50, eps=1e-5, seed=0):
    """Max relative error between analytic gradients and central differences.

    loss_fn() -> float evaluates the loss at the current parameter values.
    grad_fn() -> dict mapping the keys of `params` to gradient arrays.
    Probes are drawn uniformly over all scalar parameters with a seeded RNG.

    Relative error per probe: |a - n| / max(|a|, |n|, 1e-8).
    """
    analytic = grad_fn()
    rng = np.random.default_rng(seed)
    keys = sorted(params.keys())
    sizes = np.array([params[k].size for k in keys])
    total = int(sizes.sum())
    offsets = np.cumsum(sizes) - sizes
    worst = 0.0
    for flat in rng.choice(total, size=min(probes, total), replace=False):
        slot = int(np.searchsorted(offsets, flat, side="right") - 1)
        key = keys[slot]
        idx = np.unravel_index(int(flat - offsets[slot]), params[key].shape)
        theta = params[key]
        saved = theta[idx]
        theta[idx] = saved + eps
        plus = loss_fn()
        theta[idx] = saved - eps
        minus = loss_fn()
        theta[idx] = saved
        numeric = (plus - minus) / (2.0 * eps)
        a = float(analytic[key][idx])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst
