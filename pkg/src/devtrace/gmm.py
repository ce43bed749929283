"""Diagonal-covariance Gaussian mixtures: EM training, scoring, MAP mean
adaptation and Gaussian supervector (GSV) extraction.

All likelihood arithmetic is float64 and in the log domain.

Model file layout (little-endian)::

    magic     4 bytes  b"DTGM"
    version   uint16   1
    C, F      uint32, uint32
    floor     float64  variance floor as a fraction of the global variance
    seed      int64
    weights   C float64
    means     C*F float64, component-major
    variances C*F float64, component-major

GSV cache layout (little-endian)::

    magic     4 bytes  b"DTGV"
    version   uint16   1
    n, C, F   uint32 x 3
    relevance float64
    then n records of: id_len uint16, id bytes (UTF-8), C*F float64
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2 * np.pi))
DEFAULT_RELEVANCE = 16.0

_MODEL_HEAD = struct.Struct("<4sHIIdq")
_GSV_HEAD = struct.Struct("<4sHIIId")


class InitializationError(ValueError):
    """Too few distinct rows to seed the requested number of components."""


@dataclass
class EmConfig:
    max_iters: int = 100
    rel_tol: float = 1e-6
    variance_floor_frac: float = 1e-3
    seed: int = 0
    kmeans_iters: int = 5
    chunk_size: int = 8192

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")


@dataclass
class Gmm:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    floor_frac: float = 0.0
    seed: int = 0
    ll_history: list = field(default_factory=list, compare=False, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        C, F = self.means.shape
        if self.weights.shape != (C,) or self.variances.shape != (C, F):
            raise ValueError("weights/means/variances shapes disagree")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must sum to 1")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be positive")

    @property
    def n_components(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def copy(self):
        return Gmm(self.weights.copy(), self.means.copy(), self.variances.copy(), self.floor_frac, self.seed)

    def _log_consts(self):
        with np.errstate(divide="ignore"):
            lw = np.log(self.weights)
        return lw - 0.5 * (self.dim * LOG_2PI + np.log(self.variances).sum(axis=1))

    def log_joint(self, X):
        """(T, C) matrix of log w_c + log N(x_t; m_c, var_c)."""
        X = _check_frames(X, self.dim)
        return kernels.gmm_log_joint(X, np.ascontiguousarray(self.means), np.ascontiguousarray(1.0 / self.variances),
                                     self._log_consts())

    def responsibilities(self, X):
        L = self.log_joint(X)
        lse = kernels.logsumexp_normalize(L)
        return L, lse

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(_MODEL_HEAD.pack(b"DTGM", 1, self.n_components, self.dim, float(self.floor_frac), int(self.seed)))
            for arr in (self.weights, self.means, self.variances):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        data = Path(path).read_bytes()
        magic, version, C, F, floor, seed = _MODEL_HEAD.unpack_from(data)
        if magic != b"DTGM" or version != 1:
            raise ValueError(f"{path}: not a version-1 GMM file")
        off = _MODEL_HEAD.size
        w = np.frombuffer(data, "<f8", C, off)
        off += 8 * C
        m = np.frombuffer(data, "<f8", C * F, off).reshape(C, F)
        off += 8 * C * F
        v = np.frombuffer(data, "<f8", C * F, off).reshape(C, F)
        return cls(w.copy(), m.copy(), v.copy(), floor, seed)


@dataclass
class Gsv:
    values: np.ndarray
    n_components: int
    dim: int
    relevance: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.n_components * self.dim,):
            raise ValueError(f"GSV length {self.values.size} != C*F = {self.n_components * self.dim}")


def _check_frames(X, dim):
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != dim:
        raise ValueError(f"expected frames of shape (T, {dim}), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no frames")
    return X


# -- EM ------------------------------------------------------------------------

def kmeans_pp(X, C, rng):
    """k-means++ seeding; returns (C, F) centers."""
    uniq = np.unique(X, axis=0)
    if uniq.shape[0] < C:
        raise InitializationError(f"{uniq.shape[0]} distinct rows cannot seed {C} components")
    N = X.shape[0]
    centers = np.empty((C, X.shape[1]))
    centers[0] = X[rng.integers(N)]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for k in range(1, C):
        total = d2.sum()
        idx = rng.choice(N, p=d2 / total) if total > 0 else rng.integers(N)
        centers[k] = X[idx]
        d2 = np.minimum(d2, ((X - centers[k]) ** 2).sum(axis=1))
    return centers


def _sq_dists(X, centers):
    return (X ** 2).sum(1)[:, None] - 2 * X @ centers.T + (centers ** 2).sum(1)[None, :]


def _init_gmm(X, C, cfg, floor):
    rng = np.random.default_rng(cfg.seed)
    centers = kmeans_pp(X, C, rng)
    for _ in range(cfg.kmeans_iters):
        assign = _sq_dists(X, centers).argmin(axis=1)
        for k in range(C):
            pts = X[assign == k]
            if len(pts):
                centers[k] = pts.mean(axis=0)
    assign = _sq_dists(X, centers).argmin(axis=1)
    counts = np.bincount(assign, minlength=C).astype(np.float64)
    global_var = X.var(axis=0)
    variances = np.empty_like(centers)
    for k in range(C):
        pts = X[assign == k]
        variances[k] = pts.var(axis=0) if len(pts) > 1 else global_var
    counts = np.maximum(counts, 1.0)
    return Gmm(counts / counts.sum(), centers, np.maximum(variances, floor), cfg.variance_floor_frac, cfg.seed)


def accumulate_stats(gmm, X, chunk_size=8192, order=None):
    """Zeroth/first/second-order sufficient statistics, reduced over row chunks.

    ``order`` permutes the chunk reduction order; the result is the same up
    to floating-point reassociation.
    """
    N = X.shape[0]
    starts = list(range(0, N, chunk_size))
    if order is not None:
        starts = [starts[i] for i in order]
    C, F = gmm.means.shape
    n = np.zeros(C)
    s1 = np.zeros((C, F))
    s2 = np.zeros((C, F))
    total_ll = 0.0
    for st in starts:
        xs = X[st:st + chunk_size]
        R, lse = gmm.responsibilities(xs)
        n += R.sum(axis=0)
        s1 += R.T @ xs
        s2 += R.T @ (xs * xs)
        total_ll += lse.sum()
    return n, s1, s2, total_ll / N


def _m_step(gmm, n, s1, s2, floor, N):
    live = n > 1e-10 * N
    means = gmm.means.copy()
    variances = gmm.variances.copy()
    means[live] = s1[live] / n[live, None]
    variances[live] = s2[live] / n[live, None] - means[live] ** 2
    variances = np.maximum(variances, floor)
    weights = np.where(live, n, 0.0)
    weights = np.maximum(weights / weights.sum(), 1e-300)
    weights /= weights.sum()
    return Gmm(weights, means, variances, gmm.floor_frac, gmm.seed)


def train_gmm_em(frames, n_components: int, cfg: EmConfig = EmConfig()) -> Gmm:
    """Fit a diagonal GMM by EM from a k-means++ start.

    Stops when the relative gain in average log-likelihood drops below
    ``cfg.rel_tol`` or after ``cfg.max_iters`` iterations. The per-iteration
    average log-likelihoods are kept in ``ll_history``.
    """
    X = _check_frames(frames, np.asarray(frames).shape[1])
    N = X.shape[0]
    if N < 10 * n_components:
        raise ValueError(f"need at least {10 * n_components} frames for {n_components} components, got {N}")
    # work in coordinates centred on the data mean to limit cancellation in E[x^2] - E[x]^2
    shift = X.mean(axis=0)
    Xc = X - shift
    floor = cfg.variance_floor_frac * Xc.var(axis=0)
    floor = np.maximum(floor, 1e-300)
    gmm = _init_gmm(Xc, n_components, cfg, floor)

    history = []
    for it in range(cfg.max_iters):
        n, s1, s2, ll = accumulate_stats(gmm, Xc, cfg.chunk_size)
        history.append(ll)
        gmm = _m_step(gmm, n, s1, s2, floor, N)
        if it > 0 and history[-1] - history[-2] < cfg.rel_tol * abs(history[-2]):
            break
    _, _, _, ll = accumulate_stats(gmm, Xc, cfg.chunk_size)
    history.append(ll)
    log.info("EM: C=%d, %d iterations, avg ll %.4f", n_components, len(history) - 1, ll)
    gmm.means = gmm.means + shift
    gmm.ll_history = history
    return gmm


def log_likelihood(gmm: Gmm, frames) -> float:
    """Average per-frame log-likelihood."""
    _, lse = gmm.responsibilities(frames)
    return float(lse.mean())


# -- MAP / GSV -----------------------------------------------------------------

def map_adapt_means(ubm: Gmm, frames, r: float = DEFAULT_RELEVANCE) -> Gmm:
    """Mean-only MAP adaptation; weights and variances are copied."""
    if r < 0:
        raise ValueError("relevance factor must be >= 0")
    X = _check_frames(frames, ubm.dim)
    R, _ = ubm.responsibilities(X)
    n = R.sum(axis=0)
    s1 = R.T @ X
    pos = n > 0
    E = ubm.means.copy()
    E[pos] = s1[pos] / n[pos, None]
    denom = n + r
    alpha = np.divide(n, denom, out=np.zeros_like(n), where=denom > 0)
    means = alpha[:, None] * E + (1.0 - alpha[:, None]) * ubm.means
    return Gmm(ubm.weights.copy(), means, ubm.variances.copy(), ubm.floor_frac, ubm.seed)


def extract_gsv(ubm: Gmm, frames, r: float = DEFAULT_RELEVANCE) -> Gsv:
    adapted = map_adapt_means(ubm, frames, r)
    return Gsv(adapted.means.reshape(-1).copy(), ubm.n_components, ubm.dim, float(r))


def gmm_ubm_scores(class_models, ubm: Gmm, frames) -> np.ndarray:
    base = log_likelihood(ubm, frames)
    return np.array([log_likelihood(m, frames) - base for m in class_models])


def gmm_ubm_classify(class_models, ubm: Gmm, frames) -> int:
    """Index of the best log-likelihood ratio; ties go to the lowest index."""
    if not class_models:
        raise ValueError("need at least one class model")
    for m in class_models:
        if m.dim != ubm.dim:
            raise ValueError("class model and UBM dimensions differ")
    return int(np.argmax(gmm_ubm_scores(class_models, ubm, frames)))


# -- GSV cache -----------------------------------------------------------------

def write_gsv_cache(path, ids, vectors, n_components, dim, relevance):
    vectors = np.asarray(vectors, dtype="<f8")
    if vectors.shape != (len(ids), n_components * dim):
        raise ValueError("GSV matrix shape does not match ids / C*F")
    with open(path, "wb") as fh:
        fh.write(_GSV_HEAD.pack(b"DTGV", 1, len(ids), n_components, dim, float(relevance)))
        for ident, vec in zip(ids, vectors):
            raw = ident.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(np.ascontiguousarray(vec).tobytes())


def read_gsv_cache(path):
    """Return ``(ids, vectors, C, F, relevance)``."""
    data = Path(path).read_bytes()
    magic, version, n, C, F, relevance = _GSV_HEAD.unpack_from(data)
    if magic != b"DTGV" or version != 1:
        raise ValueError(f"{path}: not a version-1 GSV cache")
    off = _GSV_HEAD.size
    ids = []
    vecs = np.empty((n, C * F))
    for i in range(n):
        (k,) = struct.unpack_from("<H", data, off)
        off += 2
        ids.append(data[off:off + k].decode("utf-8"))
        off += k
        vecs[i] = np.frombuffer(data, "<f8", C * F, off)
        off += 8 * C * F
    return ids, vecs, C, F, relevance
