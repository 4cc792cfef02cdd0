"""Multi-exit network container.

A network is an ordered list of stages. Each stage has a trunk (layers every
deeper computation shares) and a head (the classifier producing that exit's
output). The last stage's head is the network tail / final exit. A stage list
whose single stage has no head is a plain function network (the autoencoder).
"""

from __future__ import annotations

import numpy as np

from .errors import ArchitectureError, NumericalError, StateError
from .layers import Layer, Softmax


class Stage:
    def __init__(self, trunk: list[Layer], head: list[Layer] | None = None):
        self.trunk = trunk
        self.head = head or []


def _run(layers, x, train):
    for layer in layers:
        x = layer.forward(x, train=train)
    return x


def _run_back(layers, grad):
    for layer in reversed(layers):
        grad = layer.backward(grad)
    return grad


class Network:
    def __init__(self, stages: list[Stage], meta: dict | None = None):
        if not stages:
            raise ArchitectureError("network needs at least one stage")
        for stage in stages[:-1]:
            if not stage.head:
                raise ArchitectureError("every non-final stage must expose an exit head")
        self.stages = stages
        self.meta = dict(meta or {})

    # -- structure ---------------------------------------------------------

    @property
    def exit_count(self) -> int:
        return len(self.stages)

    @property
    def has_early_exit(self) -> bool:
        return len(self.stages) > 1

    def layers(self):
        for stage in self.stages:
            yield from stage.trunk
            yield from stage.head

    def params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for layer in self.layers():
            for key, val in layer.params().items():
                if key in out:
                    raise ArchitectureError(f"duplicate parameter name {key}")
                out[key] = val
        return out

    def grads(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for layer in self.layers():
            out.update(layer.grads())
        return out

    def load_params(self, mapping: dict[str, np.ndarray]):
        mine = self.params()
        missing = set(mine) - set(mapping)
        if missing:
            raise ArchitectureError(f"checkpoint lacks tensors: {sorted(missing)}")
        for layer in self.layers():
            if layer.params():
                layer.set_params({k: np.ascontiguousarray(mapping[k]) for k in layer.params()})

    # -- forward / backward -------------------------------------------------

    def forward_all(self, x, train=False) -> list[np.ndarray]:
        """Outputs of every exit, shallow to deep."""
        outs = []
        h = x
        for stage in self.stages:
            h = _run(stage.trunk, h, train)
            outs.append(_run(stage.head, h, train) if stage.head else h)
        return outs

    def forward_final(self, x, train=False) -> np.ndarray:
        """Tail output only; early-exit heads are not evaluated."""
        h = x
        for stage in self.stages[:-1]:
            h = _run(stage.trunk, h, train)
        last = self.stages[-1]
        h = _run(last.trunk, h, train)
        return _run(last.head, h, train) if last.head else h

    def backward_from_logits(self, logit_grads: list[np.ndarray]):
        """Backpropagate per-exit gradients expressed w.r.t. pre-softmax logits.

        Each head must end in Softmax (skipped here: the caller already fused
        softmax into the loss gradient). Shared trunks receive the sum of the
        gradients arriving from their own head and from all deeper stages.
        """
        if len(logit_grads) != len(self.stages):
            raise StateError("one gradient per exit required")
        flow = None
        for stage, g_exit in zip(reversed(self.stages), reversed(logit_grads)):
            if not stage.head or not isinstance(stage.head[-1], Softmax):
                raise ArchitectureError("exit head must end in softmax for logits backprop")
            g = _run_back(stage.head[:-1], g_exit)
            if flow is not None:
                g = g + flow
            flow = _run_back(stage.trunk, g)
        return flow

    def check_finite(self, arr, context=""):
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite values {context}".strip())
        return arr
