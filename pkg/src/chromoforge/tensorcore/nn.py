"""Parameter containers and standard layers built on the engine ops."""

from __future__ import annotations

import math

import numpy as np

from . import engine as E
from .engine import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Module:
    """Minimal module: parameters are discovered by walking attributes."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for n, p in params.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {n}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()

    def n_parameters(self):
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, zero=False):
        if zero:
            self.weight = Parameter(np.zeros((n_in, n_out)))
        else:
            # xavier-uniform, as is customary for transformer projections
            self.weight = Parameter(_uniform(rng, (n_in, n_out), math.sqrt(6.0 / (n_in + n_out))))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def forward(self, x):
        y = E.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim, affine=True, eps=1e-6):
        self.eps = eps
        self.weight = Parameter(np.ones(dim)) if affine else None
        self.bias = Parameter(np.zeros(dim)) if affine else None

    def forward(self, x):
        return E.layer_normalize(x, self.weight, self.bias, self.eps)


class Conv1d(Module):
    def __init__(self, c_in, c_out, rng, kernel_size=3, padding="circular", zero=False):
        self.padding = padding
        fan_in = c_in * kernel_size
        w = np.zeros((kernel_size, c_in, c_out)) if zero else \
            _uniform(rng, (kernel_size, c_in, c_out), math.sqrt(3.0 / fan_in))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(c_out))

    def forward(self, x):
        return E.conv1d(x, self.weight, self.bias, self.padding)


class Mlp(Module):
    def __init__(self, dim, hidden, rng, out=None, act="gelu"):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, out or dim, rng)
        self.act = act

    def forward(self, x):
        h = self.fc1(x)
        h = E.gelu(h) if self.act == "gelu" else E.silu(h)
        return self.fc2(h)


class MultiHeadAttention(Module):
    """Scaled dot-product attention composed from matmul and softmax.

    Queries come from ``x``; keys and values from ``context`` (``x`` itself
    for self-attention).
    """

    def __init__(self, dim, heads, rng, context_dim=None):
        if dim % heads:
            raise ValueError(f"hidden size {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.kv = Linear(context_dim or dim, 2 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def _split(self, t, n, L):
        return E.swapaxes(E.reshape(t, (n, L, self.heads, -1)), 1, 2)

    def forward(self, x, context=None):
        context = x if context is None else context
        n, L, d = x.shape
        Lc = context.shape[1]
        dh = d // self.heads
        q = self._split(self.q(x), n, L)
        kv = self.kv(context)
        k = self._split(kv[..., :d], n, Lc)
        v = self._split(kv[..., d:], n, Lc)
        att = E.softmax(E.scale(q @ E.swapaxes(k, -1, -2), 1.0 / math.sqrt(dh)))
        out = E.reshape(E.swapaxes(att @ v, 1, 2), (n, L, d))
        return self.proj(out)
