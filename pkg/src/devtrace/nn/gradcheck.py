"""Central finite-difference checks of layer gradients (float64 only)."""

from __future__ import annotations

import numpy as np


def rel_error(analytic, numeric):
    """Largest absolute deviation scaled by the larger gradient magnitude."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def _fd(fn, arr, idx, eps):
    old = arr[idx]
    arr[idx] = old + eps
    up = fn()
    arr[idx] = old - eps
    down = fn()
    arr[idx] = old
    return (up - down) / (2 * eps)


def _indices(shape, max_checks, rng):
    total = int(np.prod(shape))
    flat = np.arange(total) if max_checks is None or total <= max_checks else rng.choice(total, max_checks, replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def grad_check(layer, input_shape, seed=0, train=True, eps=1e-5, max_checks=60, before_forward=None,
               inputs=None):
    """Compare analytic and numeric gradients of ``sum(layer(x) * R)``.

    ``input_shape`` may be a list of shapes for multi-input layers; their
    ``forward`` takes the inputs positionally and ``backward`` returns a
    tuple. ``before_forward`` runs before every forward pass (use it to
    freeze randomness such as dropout masks). Returns the worst relative
    error over the input(s) and every parameter, plus a per-tensor dict.
    """
    rng = np.random.default_rng(seed)
    multi = isinstance(input_shape, list)
    shapes = input_shape if multi else [input_shape]
    xs = inputs if inputs is not None else [rng.standard_normal(s) for s in shapes]
    for p in layer.params().values():
        if p.data.dtype != np.float64:
            raise TypeError("grad_check requires a float64 layer")

    def run():
        if before_forward is not None:
            before_forward()
        return layer.forward(*xs, train=train)

    out = run()
    R = rng.standard_normal(out.shape)

    def loss():
        return float(np.sum(run() * R))

    layer.zero_grad()
    run()
    dxs = layer.backward(R)
    if not multi:
        dxs = (dxs,)

    errors = {}
    for k, (x, dx) in enumerate(zip(xs, dxs)):
        idx = _indices(x.shape, max_checks, rng)
        num = np.array([_fd(loss, x, i, eps) for i in idx])
        ana = np.array([dx[i] for i in idx])
        errors[f"input{k}"] = rel_error(ana, num)
    for name, p in layer.params().items():
        grad = p.grad.copy()
        idx = _indices(p.shape, max_checks, rng)
        num = np.array([_fd(loss, p.data, i, eps) for i in idx])
        ana = np.array([grad[i] for i in idx])
        errors[name] = rel_error(ana, num)
    return max(errors.values()), errors
