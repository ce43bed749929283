"""Layers with explicit forward/backward passes.

Conventions: ``forward(x, train)`` caches what ``backward`` needs;
``backward(dy)`` returns the input gradient and *adds* into each
``Param.grad``. ``backward`` may be called several times after one forward
(the caches are read-only), which the multi-head loss relies on.
Images are NHWC.
"""

from __future__ import annotations

import numpy as np

from .. import kernels


class NumericError(FloatingPointError):
    """A non-finite value appeared in activations, losses or gradients."""


def check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


class Param:
    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.ascontiguousarray(data)
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad.fill(0)


def _uniform(rng, shape, fan_in, dtype):
    lim = np.sqrt(6.0 / fan_in)
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


class Layer:
    kind = "layer"

    def params(self, prefix=""):
        """Flat ``{name: Param}`` including children, in a stable order."""
        out = {}
        for name, p in self._own_params().items():
            out[prefix + name] = p
        for cname, child in self._children():
            out.update(child.params(f"{prefix}{cname}."))
        return out

    def buffers(self, prefix=""):
        out = {prefix + k: v for k, v in self._own_buffers().items()}
        for cname, child in self._children():
            out.update(child.buffers(f"{prefix}{cname}."))
        return out

    def set_buffer(self, name, value):
        head, _, rest = name.partition(".")
        if rest:
            dict(self._children())[head].set_buffer(rest, value)
        else:
            getattr(self, name)[...] = value

    def _own_params(self):
        return {}

    def _own_buffers(self):
        return {}

    def _children(self):
        return []

    def zero_grad(self):
        for p in self.params().values():
            p.zero_grad()

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def __call__(self, x, train=False):
        return self.forward(x, train)


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, *layers):
        self.layers = list(layers)

    def _children(self):
        return [(str(i), layer) for i, layer in enumerate(self.layers)]

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in, n_out, rng, dtype=np.float32):
        self.W = Param(_uniform(rng, (n_in, n_out), n_in, dtype))
        self.b = Param(np.zeros(n_out, dtype=dtype))

    def _own_params(self):
        return {"W": self.W, "b": self.b}

    def forward(self, x, train=False):
        if x.shape[-1] != self.W.shape[0]:
            raise ValueError(f"dense expects {self.W.shape[0]} inputs, got {x.shape[-1]}")
        self._x = x
        return x @ self.W.data + self.b.data

    def backward(self, dy):
        self.W.grad += self._x.T @ dy
        self.b.grad += dy.sum(axis=0)
        return dy @ self.W.data.T


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class Dropout(Layer):
    """Inverted dropout: active only when ``train`` is true."""

    kind = "dropout"

    def __init__(self, p, rng):
        if not 0 <= p < 1:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.p = p
        self.rng = rng

    def forward(self, x, train=False):
        if not train or self.p == 0:
            self._mask = None
            return x
        keep = self.rng.random(x.shape) >= self.p
        self._mask = keep.astype(x.dtype) / x.dtype.type(1 - self.p)
        return x * self._mask

    def backward(self, dy):
        return dy if self._mask is None else dy * self._mask


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, *shape):
        self.shape = shape

    def forward(self, x, train=False):
        self._in_shape = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, dy):
        return dy.reshape(self._in_shape)


class Flatten(Reshape):
    kind = "flatten"

    def __init__(self):
        super().__init__(-1)


class Conv2D(Layer):
    """Stride-1 convolution with zero 'same' padding (odd kernels)."""

    kind = "conv2d"

    def __init__(self, c_in, c_out, kernel, rng, dtype=np.float32):
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("'same' padding needs odd kernel sizes")
        self.kh, self.kw, self.c_in, self.c_out = kh, kw, c_in, c_out
        self.W = Param(_uniform(rng, (kh, kw, c_in, c_out), kh * kw * c_in, dtype))
        self.b = Param(np.zeros(c_out, dtype=dtype))

    def _own_params(self):
        return {"W": self.W, "b": self.b}

    def forward(self, x, train=False):
        B, H, W, C = x.shape
        if C != self.c_in:
            raise ValueError(f"conv2d expects {self.c_in} channels, got {C}")
        x = np.ascontiguousarray(x)
        self._shape = x.shape
        if self.kh == self.kw == 1:
            self._cols = x.reshape(B * H * W, C)
        else:
            self._cols = kernels.im2col_same(x, self.kh, self.kw)
        y = self._cols @ self.W.data.reshape(-1, self.c_out) + self.b.data
        return y.reshape(B, H, W, self.c_out)

    def backward(self, dy):
        B, H, W, C = self._shape
        d2 = dy.reshape(-1, self.c_out)
        self.W.grad += (self._cols.T @ d2).reshape(self.W.shape)
        self.b.grad += d2.sum(axis=0)
        dcols = np.ascontiguousarray(d2 @ self.W.data.reshape(-1, self.c_out).T)
        if self.kh == self.kw == 1:
            return dcols.reshape(B, H, W, C)
        return kernels.col2im_same(dcols, B, H, W, C, self.kh, self.kw)


class MaxPool2D(Layer):
    """2x2 window, stride 2, ceil mode on odd sizes."""

    kind = "maxpool2d"

    def forward(self, x, train=False):
        x = np.ascontiguousarray(x)
        self._hw = x.shape[1:3]
        y, self._idx = kernels.maxpool2_forward(x)
        return y

    def backward(self, dy):
        return kernels.maxpool2_backward(np.ascontiguousarray(dy), self._idx, *self._hw)


class GlobalAvgPool(Layer):
    kind = "avgpool"

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, dy):
        B, H, W, C = self._shape
        return np.broadcast_to(dy[:, None, None, :] / (H * W), self._shape).copy()


class BatchNorm(Layer):
    """Normalizes over every axis but the last; running stats use momentum 0.9."""

    kind = "batchnorm"

    def __init__(self, n, dtype=np.float32, momentum=0.9, eps=1e-5):
        self.gamma = Param(np.ones(n, dtype=dtype))
        self.beta = Param(np.zeros(n, dtype=dtype))
        self.running_mean = np.zeros(n, dtype=dtype)
        self.running_var = np.ones(n, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def _own_params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def _own_buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, train=False):
        axes = tuple(range(x.ndim - 1))
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.running_mean[...] = m * self.running_mean + (1 - m) * mean
            self.running_var[...] = m * self.running_var + (1 - m) * var
        else:
            mean, var = self.running_mean, self.running_var
        self._train = train
        self._inv = 1.0 / np.sqrt(var + self.eps)
        self._xhat = (x - mean) * self._inv
        return self._xhat * self.gamma.data + self.beta.data

    def backward(self, dy):
        axes = tuple(range(dy.ndim - 1))
        self.gamma.grad += (dy * self._xhat).sum(axis=axes)
        self.beta.grad += dy.sum(axis=axes)
        dxhat = dy * self.gamma.data
        if not self._train:
            return dxhat * self._inv
        m = dy.size // dy.shape[-1]
        return (self._inv / m) * (m * dxhat - dxhat.sum(axis=axes)
                                  - self._xhat * (dxhat * self._xhat).sum(axis=axes))


class Residual(Layer):
    """``body(x) + x`` followed by an optional post layer."""

    kind = "residual"

    def __init__(self, body, post=None):
        self.body = body
        self.post = post

    def _children(self):
        out = [("body", self.body)]
        if self.post is not None:
            out.append(("post", self.post))
        return out

    def forward(self, x, train=False):
        y = self.body.forward(x, train) + x
        return y if self.post is None else self.post.forward(y, train)

    def backward(self, dy):
        if self.post is not None:
            dy = self.post.backward(dy)
        return self.body.backward(dy) + dy


# -- recurrent -----------------------------------------------------------------

class LSTM(Layer):
    """Single-direction LSTM, gate order (input, forget, cell, output), zero
    initial state. ``reverse`` runs t = T-1 .. 0; outputs stay time-aligned."""

    kind = "lstm"

    def __init__(self, n_in, hidden, rng, dtype=np.float32, return_sequences=False, reverse=False):
        H = hidden
        self.n_in, self.hidden = n_in, H
        self.return_sequences = return_sequences
        self.reverse = reverse
        self.Wx = Param(_uniform(rng, (n_in, 4 * H), n_in, dtype))
        self.Wh = Param(_uniform(rng, (H, 4 * H), H, dtype))
        b = np.zeros(4 * H, dtype=dtype)
        b[H:2 * H] = 1.0
        self.b = Param(b)

    def _own_params(self):
        return {"Wx": self.Wx, "Wh": self.Wh, "b": self.b}

    def _steps(self, T):
        return range(T - 1, -1, -1) if self.reverse else range(T)

    def forward(self, x, train=False):
        B, T, D = x.shape
        if D != self.n_in:
            raise ValueError(f"lstm expects {self.n_in} features, got {D}")
        H = self.hidden
        dt = self.Wx.data.dtype
        self._x = x
        xz = (x.reshape(B * T, D) @ self.Wx.data + self.b.data).reshape(B, T, 4 * H)
        h = np.zeros((B, H), dtype=dt)
        c = np.zeros((B, H), dtype=dt)
        hs = np.empty((B, T, H), dtype=dt)
        cache = []
        for t in self._steps(T):
            z = np.ascontiguousarray(xz[:, t]) + h @ self.Wh.data
            acts, c_new, h_new, tanh_c = kernels.lstm_gates_forward(z, c)
            cache.append((t, h, c, acts, tanh_c))
            h, c = h_new, c_new
            hs[:, t] = h
        self._cache = cache
        self._hs = hs
        if self.return_sequences:
            return hs
        return h

    def last_index(self, T):
        return 0 if self.reverse else T - 1

    def backward(self, dy):
        B, T, D = self._x.shape
        H = self.hidden
        dt = self.Wx.data.dtype
        if self.return_sequences:
            dhs = dy
        else:
            dhs = np.zeros((B, T, H), dtype=dt)
            dhs[:, self.last_index(T)] = dy
        dZ = np.empty((B, T, 4 * H), dtype=dt)
        dh_next = np.zeros((B, H), dtype=dt)
        dc_next = np.zeros((B, H), dtype=dt)
        Wh_T = self.Wh.data.T
        dWh = np.zeros_like(self.Wh.data)
        for t, h_prev, c_prev, acts, tanh_c in reversed(self._cache):
            dh = np.ascontiguousarray(dhs[:, t] + dh_next)
            dz, dc_next = kernels.lstm_gates_backward(acts, c_prev, tanh_c, dh, dc_next)
            dZ[:, t] = dz
            dWh += h_prev.T @ dz
            dh_next = dz @ Wh_T
        dZ2 = dZ.reshape(B * T, 4 * H)
        self.Wx.grad += self._x.reshape(B * T, D).T @ dZ2
        self.Wh.grad += dWh
        self.b.grad += dZ2.sum(axis=0)
        return (dZ2 @ self.Wx.data.T).reshape(B, T, D)


class BiLSTM(Layer):
    """Forward and backward LSTMs over the same input.

    With ``return_sequences`` the output is (B, T, 2H), each step holding
    [forward h_t, backward h_t]. Otherwise it is (B, 2H): the forward pass's
    final output (after t = T-1) followed by the backward pass's final
    output (after t = 0).
    """

    kind = "bilstm"

    def __init__(self, n_in, hidden, rng, dtype=np.float32, return_sequences=False):
        self.hidden = hidden
        self.return_sequences = return_sequences
        self.fwd = LSTM(n_in, hidden, rng, dtype, return_sequences, reverse=False)
        self.bwd = LSTM(n_in, hidden, rng, dtype, return_sequences, reverse=True)

    def _children(self):
        return [("fwd", self.fwd), ("bwd", self.bwd)]

    def forward(self, x, train=False):
        return np.concatenate([self.fwd.forward(x, train), self.bwd.forward(x, train)], axis=-1)

    def backward(self, dy):
        H = self.hidden
        return self.fwd.backward(np.ascontiguousarray(dy[..., :H])) + \
            self.bwd.backward(np.ascontiguousarray(dy[..., H:]))


# -- losses --------------------------------------------------------------------

def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_xent(logits, labels):
    """Mean cross-entropy of integer labels; returns ``(loss, dlogits)``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ValueError("labels must be a length-B vector")
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError(f"labels must lie in [0, {K})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    loss = float(np.mean(lse - z[rows, labels]))
    d = np.exp(z - lse[:, None])
    d[rows, labels] -= 1
    return loss, d / B
