"""Pure-numpy implementations of the hot kernels.

Signatures and semantics mirror the compiled ``_kernels`` module exactly so
either can be selected at import time.
"""

import numpy as np
from scipy.special import expit

_ROW_CHUNK = 2048


def gmm_log_joint(X, means, precisions, log_consts):
    N = X.shape[0]
    out = np.empty((N, means.shape[0]), dtype=np.float64)
    for start in range(0, N, _ROW_CHUNK):
        xs = X[start:start + _ROW_CHUNK]
        d = xs[:, None, :] - means[None, :, :]
        out[start:start + _ROW_CHUNK] = log_consts - 0.5 * np.einsum("ncf,cf->nc", d * d, precisions)
    return out


def logsumexp_normalize(L):
    mx = L.max(axis=1, keepdims=True)
    np.subtract(L, mx, out=L)
    np.exp(L, out=L)
    s = L.sum(axis=1, keepdims=True)
    L /= s
    return (mx + np.log(s))[:, 0]


def lstm_gates_forward(z, c_prev):
    H = c_prev.shape[1]
    acts = np.empty_like(z)
    acts[:, :2 * H] = expit(z[:, :2 * H])
    acts[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
    acts[:, 3 * H:] = expit(z[:, 3 * H:])
    i, f, g, o = acts[:, :H], acts[:, H:2 * H], acts[:, 2 * H:3 * H], acts[:, 3 * H:]
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    return acts, c, o * tanh_c, tanh_c


def lstm_gates_backward(acts, c_prev, tanh_c, dh, dc_next):
    H = c_prev.shape[1]
    i, f, g, o = acts[:, :H], acts[:, H:2 * H], acts[:, 2 * H:3 * H], acts[:, 3 * H:]
    dc = dc_next + dh * o * (1 - tanh_c * tanh_c)
    dz = np.empty_like(acts)
    dz[:, :H] = dc * g * i * (1 - i)
    dz[:, H:2 * H] = dc * c_prev * f * (1 - f)
    dz[:, 2 * H:3 * H] = dc * i * (1 - g * g)
    dz[:, 3 * H:] = dh * tanh_c * o * (1 - o)
    return dz, dc * f


def im2col_same(x, kh, kw):
    B, H, W, C = x.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.zeros((B, H + kh - 1, W + kw - 1, C), dtype=x.dtype)
    xp[:, ph:ph + H, pw:pw + W] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # win: (B, H, W, C, kh, kw) -> (B, H, W, kh, kw, C)
    return np.array(win.transpose(0, 1, 2, 4, 5, 3), order="C").reshape(B * H * W, kh * kw * C)


def col2im_same(cols, B, H, W, Cin, kh, kw):
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.zeros((B, H + kh - 1, W + kw - 1, Cin), dtype=cols.dtype)
    c6 = cols.reshape(B, H, W, kh, kw, Cin)
    for di in range(kh):
        for dj in range(kw):
            xp[:, di:di + H, dj:dj + W] += c6[:, :, :, di, dj]
    return np.ascontiguousarray(xp[:, ph:ph + H, pw:pw + W])


def maxpool2_forward(x):
    B, H, W, C = x.shape
    Ho, Wo = (H + 1) // 2, (W + 1) // 2
    xp = np.full((B, 2 * Ho, 2 * Wo, C), -np.inf, dtype=x.dtype)
    xp[:, :H, :W] = x
    win = xp.reshape(B, Ho, 2, Wo, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, Ho, Wo, C, 4)
    k = win.argmax(axis=-1)
    y = np.take_along_axis(win, k[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(Ho)[None, :, None, None] + k // 2
    cols = 2 * np.arange(Wo)[None, None, :, None] + k % 2
    return np.ascontiguousarray(y), (rows * W + cols).astype(np.intp)


def maxpool2_backward(dy, idx, H, W):
    B, Ho, Wo, C = dy.shape
    dx = np.zeros((B, H * W, C), dtype=dy.dtype)
    b = np.arange(B)[:, None, None, None]
    ch = np.arange(C)[None, None, None, :]
    np.add.at(dx, (np.broadcast_to(b, idx.shape), idx, np.broadcast_to(ch, idx.shape)), dy)
    return dx.reshape(B, H, W, C)
