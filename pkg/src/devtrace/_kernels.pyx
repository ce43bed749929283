# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Every function here has a numpy twin in
``_kernels_py`` with the same signature and semantics."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, expf, log, INFINITY

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline real _exp(real x) noexcept nogil:
    if real is float:
        return expf(x)
    else:
        return exp(x)


cdef inline real _clamp(real x) noexcept nogil:
    # keeps exp() finite; sigmoid/tanh are saturated to working precision here
    return 40 if x > 40 else (-40 if x < -40 else x)


def gmm_log_joint(const double[:, ::1] X, const double[:, ::1] means,
                  const double[:, ::1] precisions, const double[::1] log_consts):
    cdef Py_ssize_t N = X.shape[0], F = X.shape[1], C = means.shape[0]
    cdef Py_ssize_t n, c, f
    cdef double acc, d
    out = np.empty((N, C), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for n in range(N):
            for c in range(C):
                acc = 0.0
                for f in range(F):
                    d = X[n, f] - means[c, f]
                    acc = acc + d * d * precisions[c, f]
                o[n, c] = log_consts[c] - 0.5 * acc
    return out


def logsumexp_normalize(double[:, ::1] L):
    cdef Py_ssize_t N = L.shape[0], C = L.shape[1]
    cdef Py_ssize_t n, c
    cdef double mx, s, lse
    out = np.empty(N, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for n in range(N):
            mx = -INFINITY
            for c in range(C):
                if L[n, c] > mx:
                    mx = L[n, c]
            s = 0.0
            for c in range(C):
                s = s + exp(L[n, c] - mx)
            lse = mx + log(s)
            o[n] = lse
            for c in range(C):
                L[n, c] = exp(L[n, c] - lse)
    return out


def lstm_gates_forward(const real[:, ::1] z, const real[:, ::1] c_prev):
    cdef Py_ssize_t B = z.shape[0], H = c_prev.shape[1]
    cdef Py_ssize_t b, j
    cdef real cc
    dtype = np.float32 if real is float else np.float64
    acts_a = np.empty((B, 4 * H), dtype=dtype)
    c_a = np.empty((B, H), dtype=dtype)
    h_a = np.empty((B, H), dtype=dtype)
    tc_a = np.empty((B, H), dtype=dtype)
    cdef real[:, ::1] acts = acts_a
    cdef real[:, ::1] c = c_a
    cdef real[:, ::1] h = h_a
    cdef real[:, ::1] tcv = tc_a
    with nogil:
        for b in range(B):
            # flat loops over one row so the compiler can vectorize _exp()
            for j in range(2 * H):
                acts[b, j] = 1 / (1 + _exp(-_clamp(z[b, j])))
            for j in range(2 * H, 3 * H):
                acts[b, j] = 2 / (1 + _exp(-2 * _clamp(z[b, j]))) - 1
            for j in range(3 * H, 4 * H):
                acts[b, j] = 1 / (1 + _exp(-_clamp(z[b, j])))
            for j in range(H):
                cc = acts[b, H + j] * c_prev[b, j] + acts[b, j] * acts[b, 2 * H + j]
                c[b, j] = cc
                tcv[b, j] = 2 / (1 + _exp(-2 * _clamp(cc))) - 1
            for j in range(H):
                h[b, j] = acts[b, 3 * H + j] * tcv[b, j]
    return acts_a, c_a, h_a, tc_a


def lstm_gates_backward(const real[:, ::1] acts, const real[:, ::1] c_prev, const real[:, ::1] tanh_c,
                        const real[:, ::1] dh, const real[:, ::1] dc_next):
    cdef Py_ssize_t B = acts.shape[0], H = c_prev.shape[1]
    cdef Py_ssize_t b, j
    cdef real ig, fg, gg, og, tc, dc
    dtype = np.float32 if real is float else np.float64
    dz_a = np.empty((B, 4 * H), dtype=dtype)
    dcp_a = np.empty((B, H), dtype=dtype)
    cdef real[:, ::1] dz = dz_a
    cdef real[:, ::1] dcp = dcp_a
    with nogil:
        for b in range(B):
            for j in range(H):
                ig = acts[b, j]
                fg = acts[b, H + j]
                gg = acts[b, 2 * H + j]
                og = acts[b, 3 * H + j]
                tc = tanh_c[b, j]
                dc = dc_next[b, j] + dh[b, j] * og * (1 - tc * tc)
                dz[b, j] = dc * gg * ig * (1 - ig)
                dz[b, H + j] = dc * c_prev[b, j] * fg * (1 - fg)
                dz[b, 2 * H + j] = dc * ig * (1 - gg * gg)
                dz[b, 3 * H + j] = dh[b, j] * tc * og * (1 - og)
                dcp[b, j] = dc * fg
    return dz_a, dcp_a


def im2col_same(const real[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw):
    """NHWC input, stride 1, zero 'same' padding -> (B*H*W, kh*kw*Cin)."""
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], Cin = x.shape[3]
    cdef Py_ssize_t ph = (kh - 1) // 2, pw = (kw - 1) // 2
    cdef Py_ssize_t b, i, j, di, dj, ch, si, sj, row, col
    dtype = np.float32 if real is float else np.float64
    cols_a = np.zeros((B * H * W, kh * kw * Cin), dtype=dtype)
    cdef real[:, ::1] cols = cols_a
    with nogil:
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    row = (b * H + i) * W + j
                    for di in range(kh):
                        si = i + di - ph
                        if si < 0 or si >= H:
                            continue
                        for dj in range(kw):
                            sj = j + dj - pw
                            if sj < 0 or sj >= W:
                                continue
                            col = (di * kw + dj) * Cin
                            for ch in range(Cin):
                                cols[row, col + ch] = x[b, si, sj, ch]
    return cols_a


def col2im_same(const real[:, ::1] cols, Py_ssize_t B, Py_ssize_t H, Py_ssize_t W,
                Py_ssize_t Cin, Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t ph = (kh - 1) // 2, pw = (kw - 1) // 2
    cdef Py_ssize_t b, i, j, di, dj, ch, si, sj, row, col
    dtype = np.float32 if real is float else np.float64
    x_a = np.zeros((B, H, W, Cin), dtype=dtype)
    cdef real[:, :, :, ::1] x = x_a
    with nogil:
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    row = (b * H + i) * W + j
                    for di in range(kh):
                        si = i + di - ph
                        if si < 0 or si >= H:
                            continue
                        for dj in range(kw):
                            sj = j + dj - pw
                            if sj < 0 or sj >= W:
                                continue
                            col = (di * kw + dj) * Cin
                            for ch in range(Cin):
                                x[b, si, sj, ch] += cols[row, col + ch]
    return x_a


def maxpool2_forward(const real[:, :, :, ::1] x):
    """2x2 stride-2 max pooling with ceil semantics on odd sizes."""
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t Ho = (H + 1) // 2, Wo = (W + 1) // 2
    cdef Py_ssize_t b, i, j, ch, di, dj, si, sj, best
    cdef real v, bv
    dtype = np.float32 if real is float else np.float64
    y_a = np.empty((B, Ho, Wo, C), dtype=dtype)
    idx_a = np.empty((B, Ho, Wo, C), dtype=np.intp)
    cdef real[:, :, :, ::1] y = y_a
    cdef Py_ssize_t[:, :, :, ::1] idx = idx_a
    with nogil:
        for b in range(B):
            for i in range(Ho):
                for j in range(Wo):
                    for ch in range(C):
                        best = -1
                        bv = 0
                        for di in range(2):
                            si = 2 * i + di
                            if si >= H:
                                continue
                            for dj in range(2):
                                sj = 2 * j + dj
                                if sj >= W:
                                    continue
                                v = x[b, si, sj, ch]
                                if best < 0 or v > bv:
                                    bv = v
                                    best = si * W + sj
                        y[b, i, j, ch] = bv
                        idx[b, i, j, ch] = best
    return y_a, idx_a


def maxpool2_backward(const real[:, :, :, ::1] dy, const Py_ssize_t[:, :, :, ::1] idx,
                      Py_ssize_t H, Py_ssize_t W):
    cdef Py_ssize_t B = dy.shape[0], Ho = dy.shape[1], Wo = dy.shape[2], C = dy.shape[3]
    cdef Py_ssize_t b, i, j, ch, k
    dtype = np.float32 if real is float else np.float64
    dx_a = np.zeros((B, H, W, C), dtype=dtype)
    cdef real[:, :, :, ::1] dx = dx_a
    with nogil:
        for b in range(B):
            for i in range(Ho):
                for j in range(Wo):
                    for ch in range(C):
                        k = idx[b, i, j, ch]
                        dx[b, k // W, k % W, ch] += dy[b, i, j, ch]
    return dx_a
