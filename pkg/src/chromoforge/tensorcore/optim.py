from __future__ import annotations

import math

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update; returns new parameter arrays.

    ``params`` and ``grads`` are sequences of arrays; ``state`` is updated
    in place (moments are lazily created on the first call).
    """
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params) or len(grads) != len(params):
        raise ValueError("parameter / gradient / state lengths differ")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            out.append(p)
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        out.append(p - state.learning_rate * mhat / (np.sqrt(vhat) + state.epsilon))
    return out


class Adam:
    """Adam over a list of :class:`Parameter` objects."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr, betas[0], betas[1], eps)

    @property
    def lr(self):
        return self.state.learning_rate

    @lr.setter
    def lr(self, value):
        self.state.learning_rate = value

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def clip_grad_norm(self, max_norm):
        grads = [p.grad for p in self.params if p.grad is not None]
        total = float(np.sqrt(sum(np.sum(g * g) for g in grads)))
        if max_norm and total > max_norm:
            for p in self.params:
                if p.grad is not None:
                    p.grad = p.grad * (max_norm / total)
        return total

    def step(self):
        new = adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state)
        for p, d in zip(self.params, new):
            p.data = d


def scheduled_lr(base, step, total, schedule="constant", warmup=0):
    """Learning rate at optimizer step ``step`` (0-based) of ``total``."""
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    if schedule == "constant":
        return base
    if schedule == "cosine":
        frac = (step - warmup) / max(1, total - warmup)
        return 0.5 * base * (1.0 + math.cos(math.pi * min(1.0, frac)))
    raise ValueError(f"unknown learning-rate schedule {schedule!r}")
