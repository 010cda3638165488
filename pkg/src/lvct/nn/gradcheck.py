from __future__ import annotations

import numpy as np

__all__ = ["relative_error", "numeric_grad", "grad_check", "grad_check_input"]


def relative_error(analytic, numeric, floor=1e-10):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f, x, index, h=1e-5):
    """Central difference of scalar ``f()`` w.r.t. ``x[index]`` (x modified in place, then restored)."""
    old = x[index]
    x[index] = old + h
    fp = f()
    x[index] = old - h
    fm = f()
    x[index] = old
    return (fp - fm) / (2 * h)


def _sample_indices(rng, shape, n):
    size = int(np.prod(shape))
    flat = np.arange(size) if size <= n else rng.choice(size, n, replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def grad_check(network, x, loss, samples_per_param=6, h=1e-5, seed=0, floor_frac=1e-6):
    """Max relative error between analytic and central-difference parameter gradients.

    ``network`` exposes ``forward``, ``backward`` and ``params()``; ``loss``
    maps the network output to ``(value, grad)``. Entries are sampled per
    parameter; gradients smaller than ``floor_frac`` times the largest
    analytic gradient are compared on an absolute basis.
    """
    rng = np.random.default_rng(seed)
    params = network.params()
    for p in params:
        p.zero_grad()
    _, g = loss(network.forward(x))
    network.backward(g)
    analytic = [p.grad.copy() for p in params]
    scale = max(float(np.max(np.abs(a))) for a in analytic)
    floor = max(scale * floor_frac, 1e-12)

    def f():
        return loss(network.forward(x))[0]

    worst = 0.0
    for p, a in zip(params, analytic):
        for idx in _sample_indices(rng, p.value.shape, samples_per_param):
            n = numeric_grad(f, p.value, idx, h)
            worst = max(worst, float(relative_error(a[idx], n, floor)))
    for p in params:
        p.zero_grad()
    return worst


def grad_check_input(forward, backward, x, loss, n_samples=20, h=1e-5, seed=0, floor_frac=1e-6):
    """As :func:`grad_check` but for the gradient w.r.t. the input ``x``."""
    rng = np.random.default_rng(seed)
    _, g = loss(forward(x))
    a = np.asarray(backward(g), dtype=np.float64)
    floor = max(float(np.max(np.abs(a))) * floor_frac, 1e-12)
    x = x.copy()

    def f():
        return loss(forward(x))[0]

    worst = 0.0
    for idx in _sample_indices(rng, x.shape, n_samples):
        n = numeric_grad(f, x, idx, h)
        worst = max(worst, float(relative_error(a[idx], n, floor)))
    return worst
