"""Parallel spatial-temporal network.

A spatial branch reads the standardized supervector (GSV), a temporal
branch reads a 64-frame MFCC window. Their 1024-d features are fused
(attention or concatenation) and classified by a narrowing MLP. Each branch
also has its own linear head, so a forward pass yields three sets of logits:
temporal, spatial and fused.

For the single-branch baselines, set ``sfenn_kind`` or ``tfenn_kind`` to
``None``. The surviving branch then feeds the back-end directly and only
the fused-head loss is used.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .nn import (
    LSTM,
    AttentionFuse,
    BatchNorm,
    BiLSTM,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    GlobalAvgPool,
    MaxPool2D,
    ReLU,
    Reshape,
    Residual,
    Sequential,
    Splice,
    check_finite,
    softmax,
    softmax_xent,
)

FEATURE_DIM = 1024
WINDOW = 64
MFCC_DIM = 39
GSV_GRID = (64, 39)

SFENN_KINDS = ("dnn", "cnn", "resnet")
TFENN_KINDS = ("lstm", "bilstm")
FUSION_KINDS = ("attention", "splicing")


@dataclass
class LossWeights:
    """Weights of the temporal and spatial shallow losses; the fused loss gets
    the remainder ``1 - lambda_t - lambda_s``."""

    lambda_t: float = 0.25
    lambda_s: float = 0.5

    def __post_init__(self):
        if self.lambda_t < 0 or self.lambda_s < 0 or self.lambda_t + self.lambda_s > 1 + 1e-12:
            raise ValueError(f"loss weights must be >= 0 with sum <= 1, got ({self.lambda_t}, {self.lambda_s})")

    @property
    def lambda_a(self):
        return 1.0 - self.lambda_t - self.lambda_s


@dataclass
class PstnnConfig:
    sfenn_kind: str | None = "dnn"
    tfenn_kind: str | None = "bilstm"
    fusion: str = "attention"
    n_classes: int = 8
    lambda_t: float = 0.25
    lambda_s: float = 0.5
    dropout: float = 0.2
    seed: int = 0
    gsv_dim: int = GSV_GRID[0] * GSV_GRID[1]

    def __post_init__(self):
        errs = self.violations()
        if errs:
            raise ValueError("; ".join(errs))

    def violations(self):
        errs = []
        if self.sfenn_kind is None and self.tfenn_kind is None:
            errs.append("at least one branch is required")
        if self.sfenn_kind not in SFENN_KINDS + (None,):
            errs.append(f"sfenn_kind must be one of {SFENN_KINDS}, got {self.sfenn_kind!r}")
        if self.tfenn_kind not in TFENN_KINDS + (None,):
            errs.append(f"tfenn_kind must be one of {TFENN_KINDS}, got {self.tfenn_kind!r}")
        if self.fusion not in FUSION_KINDS:
            errs.append(f"fusion must be one of {FUSION_KINDS}, got {self.fusion!r}")
        if self.n_classes < 2:
            errs.append("n_classes must be >= 2")
        try:
            LossWeights(self.lambda_t, self.lambda_s)
        except ValueError as exc:
            errs.append(str(exc))
        if not 0 <= self.dropout < 1:
            errs.append("dropout must lie in [0, 1)")
        if self.sfenn_kind in ("cnn", "resnet") and self.gsv_dim != GSV_GRID[0] * GSV_GRID[1]:
            errs.append(f"{self.sfenn_kind} needs a {GSV_GRID[0]}x{GSV_GRID[1]} supervector (C=64, F=39)")
        return errs

    @property
    def fused(self):
        return self.sfenn_kind is not None and self.tfenn_kind is not None

    @property
    def loss_weights(self):
        if not self.fused:
            return LossWeights(0.0, 0.0)
        return LossWeights(self.lambda_t, self.lambda_s)

    def to_dict(self):
        return asdict(self)


def build_sfenn(kind, rng, dtype=np.float32, gsv_dim=GSV_GRID[0] * GSV_GRID[1]):
    """Spatial branch: supervector -> 1024-d feature."""
    F = FEATURE_DIM
    if kind == "dnn":
        return Sequential(Dense(gsv_dim, F, rng, dtype), ReLU(),
                          Dense(F, F, rng, dtype), ReLU(),
                          Dense(F, F, rng, dtype), ReLU())
    if kind == "cnn":
        h, w = GSV_GRID
        for _ in range(3):
            h, w = (h + 1) // 2, (w + 1) // 2
        return Sequential(Reshape(*GSV_GRID, 1),
                          Conv2D(1, 6, 5, rng, dtype), ReLU(), MaxPool2D(),
                          Conv2D(6, 16, 5, rng, dtype), ReLU(), MaxPool2D(),
                          Conv2D(16, 40, 5, rng, dtype), ReLU(), MaxPool2D(),
                          Flatten(), Dense(h * w * 40, F, rng, dtype))
    if kind == "resnet":
        blocks = []
        for _ in range(4):
            body = []
            for _ in range(4):
                body += [BatchNorm(16, dtype), ReLU(), Conv2D(16, 16, 3, rng, dtype)]
            blocks.append(Residual(Sequential(*body), post=MaxPool2D()))
        return Sequential(Reshape(*GSV_GRID, 1), Conv2D(1, 16, 1, rng, dtype), *blocks,
                          GlobalAvgPool(), Dense(16, F, rng, dtype))
    raise ValueError(f"unknown spatial network {kind!r}; choose from {SFENN_KINDS}")


def build_tfenn(kind, rng, dtype=np.float32):
    """Temporal branch: (B, 64, 39) MFCC window -> 1024-d feature."""
    if kind == "lstm":
        return Sequential(LSTM(MFCC_DIM, 39, rng, dtype, return_sequences=True),
                          LSTM(39, 78, rng, dtype),
                          Dense(78, FEATURE_DIM, rng, dtype), ReLU())
    if kind == "bilstm":
        return Sequential(BiLSTM(MFCC_DIM, 39, rng, dtype, return_sequences=True),
                          BiLSTM(78, 78, rng, dtype),
                          Dense(156, FEATURE_DIM, rng, dtype), ReLU())
    raise ValueError(f"unknown temporal network {kind!r}; choose from {TFENN_KINDS}")


def build_backend(n_in, n_classes, dropout, rng, dtype=np.float32):
    return Sequential(Dense(n_in, 512, rng, dtype), ReLU(), Dropout(dropout, rng),
                      Dense(512, 128, rng, dtype), ReLU(), Dropout(dropout, rng),
                      Dense(128, n_classes, rng, dtype))


@dataclass
class LossBreakdown:
    total: float
    l_t: float
    l_s: float
    l_a: float
    d_t: np.ndarray | None
    d_s: np.ndarray | None
    d_a: np.ndarray


def deep_shallow_loss(logits_t, logits_s, logits_a, labels, w: LossWeights) -> LossBreakdown:
    """Weighted sum of the three heads' cross-entropies.

    Returned logit gradients are already scaled by their weights, so
    backpropagating all three gives the gradient of the total.
    """
    l_a, d_a = softmax_xent(logits_a, labels)
    l_t = l_s = 0.0
    d_t = d_s = None
    if logits_t is not None:
        l_t, d_t = softmax_xent(logits_t, labels)
        d_t = d_t * w.lambda_t
    if logits_s is not None:
        l_s, d_s = softmax_xent(logits_s, labels)
        d_s = d_s * w.lambda_s
    total = w.lambda_t * l_t + w.lambda_s * l_s + w.lambda_a * l_a
    check_finite(np.array([total]), "loss")
    return LossBreakdown(total, l_t, l_s, l_a, d_t, d_s, d_a * w.lambda_a)


class PstnnModel:
    """Container for the two branches, fusion block, back-end and aux heads.

    Parameter groups: ``spatial``, ``temporal``, ``attention``,
    ``classifier``, ``head_spatial``, ``head_temporal``.
    """

    def __init__(self, cfg: PstnnConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(cfg.seed)
        self.sfenn = build_sfenn(cfg.sfenn_kind, rng, dtype, cfg.gsv_dim) if cfg.sfenn_kind else None
        self.tfenn = build_tfenn(cfg.tfenn_kind, rng, dtype) if cfg.tfenn_kind else None
        if cfg.fused:
            self.fusion = AttentionFuse(rng, dtype=dtype) if cfg.fusion == "attention" else Splice()
            n_in = FEATURE_DIM * self.fusion.out_dim_factor
            self.head_s = Dense(FEATURE_DIM, cfg.n_classes, rng, dtype)
            self.head_t = Dense(FEATURE_DIM, cfg.n_classes, rng, dtype)
        else:
            self.fusion = self.head_s = self.head_t = None
            n_in = FEATURE_DIM
        self.backend = build_backend(n_in, cfg.n_classes, cfg.dropout, rng, dtype)

    # -- parameters ----------------------------------------------------------

    def groups(self):
        g = {"spatial": self.sfenn, "temporal": self.tfenn, "attention": self.fusion,
             "classifier": self.backend, "head_spatial": self.head_s, "head_temporal": self.head_t}
        return {k: v for k, v in g.items() if v is not None}

    def params(self):
        out = {}
        for gname, layer in self.groups().items():
            out.update(layer.params(gname + "."))
        return out

    def buffers(self):
        out = {}
        for gname, layer in self.groups().items():
            out.update(layer.buffers(gname + "."))
        return out

    def load_state(self, params, buffers=None):
        mine = self.params()
        if set(mine) != set(params):
            missing = sorted(set(mine) ^ set(params))
            raise ValueError(f"checkpoint does not match model layout: {missing[:5]}")
        for k, p in mine.items():
            if p.data.shape != params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {p.data.shape} vs {params[k].shape}")
            p.data[...] = params[k]
        groups = self.groups()
        for k, v in (buffers or {}).items():
            gname, _, rest = k.partition(".")
            groups[gname].set_buffer(rest, v)

    def zero_grad(self):
        for p in self.params().values():
            p.zero_grad()

    def n_parameters(self):
        return sum(p.data.size for p in self.params().values())

    # -- passes --------------------------------------------------------------

    def forward(self, gsv_batch, mfcc_batch, mode="infer"):
        """Return ``(logits_t, logits_s, logits_a)``; absent branches give None."""
        if mode not in ("train", "infer"):
            raise ValueError("mode must be 'train' or 'infer'")
        train = mode == "train"
        feat_s = feat_t = None
        B = None
        if self.sfenn is not None:
            gsv_batch = np.asarray(gsv_batch, dtype=self.dtype)
            B = gsv_batch.shape[0]
            feat_s = self.sfenn.forward(gsv_batch, train)
        if self.tfenn is not None:
            mfcc_batch = np.asarray(mfcc_batch, dtype=self.dtype)
            if mfcc_batch.shape[1:] != (WINDOW, MFCC_DIM):
                raise ValueError(f"MFCC windows must be ({WINDOW}, {MFCC_DIM}), got {mfcc_batch.shape[1:]}")
            if B is not None and mfcc_batch.shape[0] != B:
                raise ValueError("GSV and MFCC batch sizes differ")
            feat_t = self.tfenn.forward(mfcc_batch, train)
        if self.cfg.fused:
            fused = self.fusion.forward(feat_s, feat_t, train)
            logits_s = self.head_s.forward(feat_s, train)
            logits_t = self.head_t.forward(feat_t, train)
        else:
            fused = feat_s if feat_s is not None else feat_t
            logits_s = logits_t = None
        logits_a = check_finite(self.backend.forward(fused, train), "fused logits")
        return logits_t, logits_s, logits_a

    def backward(self, d_t, d_s, d_a):
        """Accumulate parameter gradients from the three logit gradients."""
        d_fused = self.backend.backward(d_a)
        if not self.cfg.fused:
            (self.sfenn or self.tfenn).backward(d_fused)
            return
        ds, dt = self.fusion.backward(d_fused)
        if d_s is not None:
            ds = ds + self.head_s.backward(d_s)
        if d_t is not None:
            dt = dt + self.head_t.backward(d_t)
        self.sfenn.backward(ds)
        self.tfenn.backward(dt)

    def predict_proba(self, gsv_batch, mfcc_batch):
        _, _, logits = self.forward(gsv_batch, mfcc_batch, "infer")
        return softmax(logits.astype(np.float64))


def forward(model: PstnnModel, gsv_batch, mfcc_batch, mode="infer"):
    return model.forward(gsv_batch, mfcc_batch, mode)


def attention_fuse(s, t, layer: AttentionFuse):
    return layer.forward(s, t)


def splice_fuse(s, t):
    return Splice().forward(s, t)
