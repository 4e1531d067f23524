"""Reverse-mode automatic differentiation over numpy arrays.

Every op builds a new :class:`Tensor` holding its parents and a closure that
maps the output cotangent to one cotangent per parent.  Inputs are never
mutated.  All arithmetic is float64.
"""

from __future__ import annotations

import math

import numpy as np

from ..exceptions import InvalidInputError, NumericalFault

_state = {"grad_enabled": True, "check_finite": False}


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        self._prev = _state["grad_enabled"]
        _state["grad_enabled"] = False

    def __exit__(self, *exc):
        _state["grad_enabled"] = self._prev


def set_finite_checks(flag: bool) -> None:
    """Check every op output for NaN/inf (slow; for debugging)."""
    _state["check_finite"] = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return scale(self, -1.0)
    def __pow__(self, p): return power(self, p)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, idx): return take_slice(self, idx)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)
    def transpose(self, *axes): return transpose(self, axes or None)
    def swapaxes(self, a, b): return swapaxes(self, a, b)

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    out = Tensor(data)
    out.op = op
    if _state["check_finite"] and not np.all(np.isfinite(out.data)):
        raise NumericalFault(f"non-finite values produced by op '{op}'")
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise InvalidInputError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --------------------------------------------------------------------------
# elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)), "div")


def scale(a, c: float):
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def power(a, p: float):
    a = as_tensor(a)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def tanh(a):
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1 - t * t),), "tanh")


def silu(a):
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _make(a.data * s, (a,), lambda g: (g * s * (1 + a.data * (1 - s)),), "silu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1 + t)

    def bw(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return _make(out, (a,), bw, "gelu")


# --------------------------------------------------------------------------
# shape ops

def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise InvalidInputError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, i, j):
    axes = list(range(as_tensor(a).ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def take_slice(a, idx):
    a = as_tensor(a)

    parts = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(i, (list, np.ndarray)) for i in parts)

    def bw(g):
        out = np.zeros_like(a.data)
        if fancy:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return _make(a.data[idx], (a,), bw, "slice")


def concat(tensors, axis=-1):
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(t.shape[i] != ts[0].shape[i]
                                       for i in range(t.ndim) if i != ax):
            raise InvalidInputError(
                f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=ax), tuple(ts),
                 lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def stack(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                   for t in ts], axis=axis)


def expand(a, shape):
    a = as_tensor(a)
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, a.shape),), "expand")


# --------------------------------------------------------------------------
# reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=ax, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in ax])) if ax else 1
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def var(a, axis=None, keepdims=False):
    """Population variance (``ddof=0``)."""
    a = as_tensor(a)
    mu = mean(a, axis, keepdims=True)
    d = a - mu
    return mean(d * d, axis, keepdims)


# --------------------------------------------------------------------------
# linear algebra and NN primitives

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise InvalidInputError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


def softmax(a):
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _make(y, (a,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),), "softmax")


def layer_normalize(a, weight=None, bias=None, eps=1e-6):
    """Normalise the last axis to zero mean / unit variance, then optional affine."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    parents = [a]
    out = xhat
    w = b = None
    if weight is not None:
        w = as_tensor(weight)
        parents.append(w)
        out = out * w.data
    if bias is not None:
        b = as_tensor(bias)
        parents.append(b)
        out = out + b.data

    def bw(g):
        gx = g * w.data if w is not None else g
        n = x.shape[-1]
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n)
        grads = [dx]
        if w is not None:
            grads.append(_unbroadcast(g * xhat, w.shape))
        if b is not None:
            grads.append(_unbroadcast(g, b.shape))
        return tuple(grads)

    return _make(out, tuple(parents), bw, "layer_normalize")


def embedding_lookup(table, indices):
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise InvalidInputError(f"embedding index out of range for table of {table.shape[0]} rows")

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(table.data[idx], (table,), bw, "embedding_lookup")


def _shift(x, off, circular):
    """``y[:, l] = x[:, l + off]`` along axis 1 with circular or zero fill."""
    if circular:
        return np.roll(x, -off, axis=1)
    y = np.zeros_like(x)
    L = x.shape[1]
    if off >= 0:
        y[:, :L - off] = x[:, off:]
    else:
        y[:, -off:] = x[:, :L + off]
    return y


def conv1d(x, weight, bias=None, padding="zeros"):
    """Stride-1, length-preserving 1-D convolution over axis 1.

    ``x`` is ``(N, L, C_in)`` (channels last), ``weight`` is ``(k, C_in, C_out)``
    with odd ``k``.  ``padding`` is ``"zeros"`` or ``"circular"``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    k, cin, cout = weight.shape
    if x.ndim != 3 or x.shape[2] != cin:
        raise InvalidInputError(f"conv1d: input {x.shape} does not match weight {weight.shape}")
    if k % 2 == 0:
        raise InvalidInputError("conv1d: kernel size must be odd for same padding")
    if padding not in ("zeros", "circular"):
        raise InvalidInputError(f"conv1d: unknown padding {padding!r}")
    circ = padding == "circular"
    p = k // 2
    # all taps in one matmul: (N, L, k*C_in) @ (k*C_in, C_out)
    cols = np.concatenate([_shift(x.data, j - p, circ) for j in range(k)], axis=2)
    w2 = weight.data.reshape(k * cin, cout)
    out = cols @ w2
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.reshape(-1, k * cin).T @ g2).reshape(k, cin, cout)
        gcols = g @ w2.T
        gx = np.zeros_like(x.data)
        for j in range(k):
            gx += _shift(gcols[..., j * cin:(j + 1) * cin], -(j - p), circ)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(out, tuple(parents), bw, "conv1d")


def sinusoidal_position_features(t, dim, max_period=10000.0):
    """``[cos(t f_k), sin(t f_k)]`` features; differentiable in ``t``.

    ``t`` has shape ``(...)``; output is ``(..., dim)``.
    """
    t = as_tensor(t)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t.data[..., None] * freqs
    out = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        out = np.concatenate([out, np.zeros(out.shape[:-1] + (1,))], axis=-1)

    def bw(g):
        gc, gs = g[..., :half], g[..., half:2 * half]
        return (((-np.sin(args) * gc + np.cos(args) * gs) * freqs).sum(axis=-1),)

    return _make(out, (t,), bw, "sinusoidal_position_features")


def bce_with_logits(logits, targets):
    """Mean binary cross entropy of ``sigmoid(logits)`` against 0/1 targets."""
    logits = as_tensor(logits)
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    x = logits.data
    loss = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    return _make(np.asarray(loss.mean()), (logits,),
                 lambda g: (g * (_sigmoid(x) - y) / n,), "bce_with_logits")


# --------------------------------------------------------------------------
# backward pass

def _topo(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor):
    """Accumulate ``d loss / d leaf`` into ``.grad`` of every leaf requiring grad."""
    if loss.size != 1:
        raise InvalidInputError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericalFault("loss is not finite")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if not np.all(np.isfinite(g)):
                raise NumericalFault(f"non-finite gradient for {node.name or 'leaf'}")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if not p.requires_grad or pg is None:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
