"""Two-input fusion layers: attention weighting and plain concatenation."""

from __future__ import annotations

import numpy as np

from .layers import Layer, Param


def _shift_sum(x, kernel):
    """Correlate ``kernel`` (odd width) along the last axis, zero 'same' padding."""
    k = kernel.shape[0]
    half = k // 2
    n = x.shape[-1]
    xp = np.zeros(x.shape[:-1] + (n + 2 * half,), dtype=x.dtype)
    xp[..., half:half + n] = x
    out = np.zeros_like(x)
    for j in range(k):
        out += kernel[j] * xp[..., j:j + n]
    return out


def _shift_sum_T(dy, kernel):
    """Adjoint of ``_shift_sum`` with respect to its input."""
    return _shift_sum(dy, kernel[::-1])


class AttentionFuse(Layer):
    """Per-position soft weighting of a spatial and a temporal feature vector.

    The two vectors are stacked into a (2, N) map. A width-``kernel``
    convolution shared by both rows, followed by width-``pool`` average
    pooling (stride 1, zero padding, fixed divisor), gives one score per row
    and position; a per-row bias is added and a softmax over the two rows
    yields column-stochastic weights ``A``. The output is
    ``A[0] * s + A[1] * t``.
    """

    kind = "attention_fuse"

    def __init__(self, rng=None, kernel=5, pool=5, dtype=np.float32):
        if kernel % 2 == 0 or pool % 2 == 0:
            raise ValueError("kernel and pool widths must be odd")
        w = np.zeros(kernel) if rng is None else rng.normal(0.0, 0.1, size=kernel)
        self.w = Param(w.astype(dtype))
        self.b = Param(np.zeros(2, dtype=dtype))
        self._box = np.full(pool, 1.0 / pool, dtype=dtype)

    def _own_params(self):
        return {"w": self.w, "b": self.b}

    @property
    def out_dim_factor(self):
        return 1

    def weights(self, s, t):
        """Column-stochastic (B, 2, N) attention weights for the inputs."""
        M = np.stack([s, t], axis=1)
        z = _shift_sum(M, self.w.data)
        p = _shift_sum(z, self._box) + self.b.data[None, :, None]
        p = p - p.max(axis=1, keepdims=True)
        e = np.exp(p)
        return M, e / e.sum(axis=1, keepdims=True)

    def forward(self, s, t, train=False):
        if s.shape != t.shape:
            raise ValueError(f"fusion inputs differ in shape: {s.shape} vs {t.shape}")
        M, A = self.weights(s, t)
        self._M, self._A = M, A
        return A[:, 0] * s + A[:, 1] * t

    def backward(self, dy):
        M, A = self._M, self._A
        dA = dy[:, None, :] * M
        dp = A * (dA - (A * dA).sum(axis=1, keepdims=True))
        self.b.grad += dp.sum(axis=(0, 2))
        dz = _shift_sum_T(dp, self._box)
        k = self.w.shape[0]
        half = k // 2
        n = M.shape[-1]
        Mp = np.zeros(M.shape[:-1] + (n + 2 * half,), dtype=M.dtype)
        Mp[..., half:half + n] = M
        for j in range(k):
            self.w.grad[j] += (dz * Mp[..., j:j + n]).sum()
        dM = _shift_sum_T(dz, self.w.data) + A * dy[:, None, :]
        return dM[:, 0], dM[:, 1]


class Splice(Layer):
    """Concatenate the two feature vectors."""

    kind = "splice"

    @property
    def out_dim_factor(self):
        return 2

    def forward(self, s, t, train=False):
        self._n = s.shape[-1]
        return np.concatenate([s, t], axis=-1)

    def backward(self, dy):
        return np.ascontiguousarray(dy[:, :self._n]), np.ascontiguousarray(dy[:, self._n:])
