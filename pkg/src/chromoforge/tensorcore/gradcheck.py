"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np

from .engine import backward


def numerical_grad(fn, tensors, wrt, eps=1e-5, indices=None):
    """Central differences of scalar ``fn()`` w.r.t. ``tensors[wrt]``.

    ``indices`` restricts the probe to a subset of flat positions.
    """
    t = tensors[wrt]
    t.data = np.array(t.data, dtype=np.float64, order="C")
    flat = t.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(fn().data)
        flat[i] = orig - eps
        fm = float(fn().data)
        flat[i] = orig
        out[i] = (fp - fm) / (2 * eps)
    return out.reshape(t.shape)


def relative_error(analytic, numeric, floor=1e-10):
    """``max |a - n| / max(max |n|, max |a|, floor)`` over the probed entries."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale_ = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale_)


def gradcheck(fn, tensors, eps=1e-5, max_probes=None, rng=None):
    """Compare backprop against finite differences for every tensor in ``tensors``.

    ``fn`` takes no arguments and rebuilds the graph from the current values
    of ``tensors`` (which must have ``requires_grad=True``).  Returns the worst
    relative error.  With ``max_probes`` only that many randomly chosen
    entries per tensor are differenced.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for t in tensors:
        t.grad = None
    loss = fn()
    backward(loss)
    worst = 0.0
    for k, t in enumerate(tensors):
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        n = t.size
        if max_probes is not None and n > max_probes:
            idx = np.sort(rng.choice(n, size=max_probes, replace=False))
        else:
            idx = np.arange(n)
        num = numerical_grad(fn, tensors, k, eps, idx)
        worst = max(worst, relative_error(analytic.reshape(-1)[idx], num.reshape(-1)[idx]))
    return worst


def gradcheck_module(loss_fn, module, eps=1e-5, max_probes=16, rng=None):
    """:func:`gradcheck` over every parameter of ``module``."""
    return gradcheck(loss_fn, module.parameters(), eps, max_probes, rng)

