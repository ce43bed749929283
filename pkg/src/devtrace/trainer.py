"""End-to-end training, evaluation, single-clip prediction and the GMM-UBM
baseline.

Training pairs each clip's supervector with a random 64-frame MFCC crop per
epoch. Evaluation averages the fused-head softmax over every non-overlapping
64-frame chunk of a clip. Both feature streams are z-scored with statistics
from the train split only; those statistics travel inside the checkpoint.
"""

from __future__ import annotations

import contextlib
import csv
import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import gmm as gmm_mod
from .dsp import MfccConfig, mfcc, read_feature_cache
from .nn import Adam, NumericError, load_checkpoint, save_checkpoint
from .pstnn import WINDOW, PstnnConfig, PstnnModel, deep_shallow_loss

log = logging.getLogger(__name__)

PRECISIONS = {"float32": np.float32, "float64": np.float64}
STD_PREFIX = "standardize."


@dataclass
class Hyper:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-3
    decay_every: int = 20
    decay_factor: float = 0.1
    seed: int = 0
    precision: str = "float32"
    deterministic: bool = False

    def __post_init__(self):
        errs = self.violations()
        if errs:
            raise ValueError("; ".join(errs))

    def violations(self):
        errs = []
        if self.epochs < 1:
            errs.append("epochs must be >= 1")
        if self.batch_size < 1:
            errs.append("batch_size must be >= 1")
        if not self.lr > 0:
            errs.append("lr must be > 0")
        if self.decay_every < 1:
            errs.append("decay_every must be >= 1")
        if not 0 < self.decay_factor <= 1:
            errs.append("decay_factor must lie in (0, 1]")
        if self.precision not in PRECISIONS:
            errs.append(f"precision must be one of {sorted(PRECISIONS)}")
        return errs

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


def lr_at(epoch: int, hyper: Hyper) -> float:
    """Step schedule with 0-based epochs: ``lr * factor ** (epoch // every)``."""
    return hyper.lr * hyper.decay_factor ** (epoch // hyper.decay_every)


def single_thread(enabled=True):
    """Pin BLAS to one thread so reductions happen in a fixed order."""
    return threadpool_limits(limits=1) if enabled else contextlib.nullcontext()


# -- data ----------------------------------------------------------------------

@dataclass
class FeatureSet:
    """Per-clip features for one split, in manifest order."""

    ids: list[str]
    labels: np.ndarray
    mfcc: list[np.ndarray]
    gsv: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.gsv = np.asarray(self.gsv, dtype=np.float64)
        if not (len(self.ids) == len(self.labels) == len(self.mfcc) == len(self.gsv)):
            raise ValueError("feature set fields must have equal length")

    def __len__(self):
        return len(self.ids)

    def subset(self, idx):
        idx = list(idx)
        return FeatureSet([self.ids[i] for i in idx], self.labels[idx],
                          [self.mfcc[i] for i in idx], self.gsv[idx])


def mfcc_cache_path(cache_dir, clip_id):
    return Path(cache_dir) / f"{clip_id}.mfcc"


def load_features(manifest, split, mfcc_dir, gsv_path) -> FeatureSet:
    """Gather one split from the MFCC cache directory and a GSV cache file."""
    entries = manifest.split(split)
    if not entries:
        raise ValueError(f"manifest has no {split!r} entries")
    labels = manifest.label_index()
    ids, vecs, _, _, _ = gmm_mod.read_gsv_cache(gsv_path)
    by_id = dict(zip(ids, vecs))
    feats, gsvs = [], []
    for e in entries:
        path = mfcc_cache_path(mfcc_dir, e.clip_id)
        if not path.exists():
            raise FileNotFoundError(f"missing MFCC cache {path}")
        if e.clip_id not in by_id:
            raise KeyError(f"GSV cache {gsv_path} has no entry for {e.clip_id}")
        feats.append(read_feature_cache(path)[0])
        gsvs.append(by_id[e.clip_id])
    return FeatureSet([e.clip_id for e in entries], [labels[e.device_id] for e in entries], feats, np.stack(gsvs))


@dataclass
class Standardizer:
    """Per-dimension z-scores for supervectors and MFCC frames."""

    gsv_mean: np.ndarray
    gsv_std: np.ndarray
    mfcc_mean: np.ndarray
    mfcc_std: np.ndarray

    @classmethod
    def fit(cls, train: FeatureSet, eps=1e-8):
        frames = np.concatenate(train.mfcc, axis=0)
        return cls(train.gsv.mean(0), np.maximum(train.gsv.std(0), eps),
                   frames.mean(0), np.maximum(frames.std(0), eps))

    def gsv(self, g):
        return (np.asarray(g, dtype=np.float64) - self.gsv_mean) / self.gsv_std

    def mfcc(self, m):
        return (np.asarray(m, dtype=np.float64) - self.mfcc_mean) / self.mfcc_std

    def to_buffers(self):
        return {STD_PREFIX + k: v for k, v in asdict(self).items()}

    @classmethod
    def from_buffers(cls, buffers):
        return cls(**{k[len(STD_PREFIX):]: np.asarray(v, dtype=np.float64)
                      for k, v in buffers.items() if k.startswith(STD_PREFIX)})


def pad_frames(m, window=WINDOW):
    """Zero-pad on the right up to ``window`` frames."""
    if len(m) >= window:
        return m
    return np.vstack([m, np.zeros((window - len(m), m.shape[1]), dtype=m.dtype)])


def random_crop(m, rng, window=WINDOW):
    m = pad_frames(m, window)
    start = int(rng.integers(0, len(m) - window + 1))
    return m[start:start + window]


def chunk_windows(m, window=WINDOW):
    """All non-overlapping ``window``-frame chunks; a trailing remainder is dropped."""
    m = pad_frames(m, window)
    n = len(m) // window
    return m[:n * window].reshape(n, window, m.shape[1])


# -- metrics -------------------------------------------------------------------

@dataclass
class Metrics:
    acc: float
    confusion: np.ndarray
    per_sample_test_time: float
    history: list = field(default_factory=list)
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self.confusion = np.asarray(self.confusion, dtype=np.int64)

    @classmethod
    def from_predictions(cls, labels, preds, n_classes, per_sample_time, history=(), class_names=()):
        labels = np.asarray(labels)
        if labels.size == 0:
            raise ValueError("cannot evaluate an empty test split")
        conf = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(conf, (labels, np.asarray(preds)), 1)
        return cls(float(np.trace(conf) / labels.size), conf, float(per_sample_time),
                   list(history), list(class_names))

    def to_dict(self, include_timing=True):
        out = {"acc": round(self.acc, 6), "n_test": int(self.confusion.sum()),
               "confusion": self.confusion.tolist(), "class_names": self.class_names,
               "history": self.history}
        if include_timing:
            out["per_sample_test_time"] = round(self.per_sample_test_time, 4)
        return out

    def write_json(self, path, include_timing=True):
        Path(path).write_text(json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True) + "\n")

    def table(self, title="model"):
        names = self.class_names or [str(i) for i in range(len(self.confusion))]
        width = max(6, *(len(n) for n in names))
        lines = [f"{title}: ACC {self.acc:.4f}  per-sample test time {self.per_sample_test_time:.4f} s",
                 " " * width + " " + " ".join(f"{n:>{width}}" for n in names)]
        for name, row in zip(names, self.confusion):
            lines.append(f"{name:>{width}} " + " ".join(f"{v:>{width}d}" for v in row))
        return "\n".join(lines)


# -- training ------------------------------------------------------------------

def _batch(model, std_mfcc, std_gsv, idx, rng):
    gsv = std_gsv[idx] if model.sfenn is not None else None
    win = None
    if model.tfenn is not None:
        win = np.stack([random_crop(std_mfcc[i], rng) for i in idx])
    return gsv, win


def train(model: PstnnModel, train_set: FeatureSet, hyper: Hyper, std: Standardizer | None = None,
          on_epoch_end=None):
    """Run ``hyper.epochs`` epochs of minibatch Adam on the deep-and-shallow loss.

    Returns ``(model, history, standardizer, optimizer)``. ``history`` has one
    dict per epoch with the sample-weighted mean of each head loss and the
    total. ``on_epoch_end(epoch, model)`` is called after every epoch.
    """
    if len(train_set) == 0:
        raise ValueError("empty training split")
    std = std or Standardizer.fit(train_set)
    std_mfcc = [std.mfcc(m) for m in train_set.mfcc]
    std_gsv = std.gsv(train_set.gsv)
    w = model.cfg.loss_weights
    opt = Adam(model.params(), lr=hyper.lr)
    rng = np.random.default_rng(hyper.seed)
    history = []
    with single_thread(hyper.deterministic):
        for epoch in range(hyper.epochs):
            opt.lr = lr_at(epoch, hyper)
            order = rng.permutation(len(train_set))
            sums = np.zeros(4)
            for start in range(0, len(order), hyper.batch_size):
                idx = order[start:start + hyper.batch_size]
                gsv, win = _batch(model, std_mfcc, std_gsv, idx, rng)
                lt, ls, la = model.forward(gsv, win, "train")
                loss = deep_shallow_loss(lt, ls, la, train_set.labels[idx], w)
                if not np.isfinite(loss.total):
                    raise NumericError(f"non-finite loss at epoch {epoch}, batch starting {start}")
                model.zero_grad()
                model.backward(loss.d_t, loss.d_s, loss.d_a)
                opt.step()
                sums += len(idx) * np.array([loss.l_t, loss.l_s, loss.l_a, loss.total])
            mean = sums / len(order)
            history.append({"epoch": epoch, "lr": opt.lr, "l_t": float(mean[0]), "l_s": float(mean[1]),
                            "l_a": float(mean[2]), "total": float(mean[3])})
            log.info("epoch %d lr %.1e total %.4f", epoch, opt.lr, mean[3])
            if on_epoch_end is not None:
                on_epoch_end(epoch, model)
    return model, history, std, opt


def clip_posteriors(model: PstnnModel, std: Standardizer, mfcc_frames, gsv_vec):
    """Chunk-averaged fused-head posteriors for one clip."""
    wins = chunk_windows(std.mfcc(mfcc_frames))
    g = np.repeat(std.gsv(gsv_vec)[None, :], len(wins), axis=0)
    return model.predict_proba(g, wins).mean(axis=0)


def _posteriors_all(model, std, data: FeatureSet):
    # one batched pass over every chunk; equal to clip_posteriors clip by clip
    wins, owners = [], []
    for i, m in enumerate(data.mfcc):
        w = chunk_windows(std.mfcc(m))
        wins.append(w)
        owners += [i] * len(w)
    wins = np.concatenate(wins)
    owners = np.asarray(owners)
    g = std.gsv(data.gsv)[owners]
    probs = np.concatenate([model.predict_proba(g[s:s + 256], wins[s:s + 256])
                            for s in range(0, len(wins), 256)])
    out = np.zeros((len(data), probs.shape[1]))
    np.add.at(out, owners, probs)
    return out / np.bincount(owners, minlength=len(data))[:, None]


def time_per_sample(fn, items, repeats=1, warmup=1):
    """Median wall-clock seconds of ``fn(item)`` over warm single-item calls."""
    items = list(items)
    for it in items[:warmup]:
        fn(it)
    times = []
    for _ in range(repeats):
        for it in items:
            t0 = time.perf_counter()
            fn(it)
            times.append(time.perf_counter() - t0)
    return float(np.median(times))


def evaluate(model: PstnnModel, test_set: FeatureSet, std: Standardizer, history=(), class_names=(),
             n_timing=16, deterministic=False) -> Metrics:
    if len(test_set) == 0:
        raise ValueError("cannot evaluate an empty test split")
    with single_thread(deterministic):
        post = _posteriors_all(model, std, test_set)
        k = min(n_timing, len(test_set))
        t = time_per_sample(lambda i: clip_posteriors(model, std, test_set.mfcc[i], test_set.gsv[i]), range(k))
    return Metrics.from_predictions(test_set.labels, post.argmax(1), model.cfg.n_classes, t, history, class_names)


def predict(model: PstnnModel, clip, ubm: gmm_mod.Gmm, std: Standardizer, mfcc_cfg: MfccConfig = MfccConfig(),
            relevance: float = gmm_mod.DEFAULT_RELEVANCE):
    """Full single-clip path: waveform -> (label index, class posteriors)."""
    frames = mfcc(clip, mfcc_cfg)
    gsv = gmm_mod.extract_gsv(ubm, frames, relevance).values
    post = clip_posteriors(model, std, frames, gsv)
    return int(np.argmax(post)), post


# -- persistence ---------------------------------------------------------------

def save_trained(path, model: PstnnModel, std: Standardizer, extra_meta=None, optimizer=None):
    meta = {"model_kind": "pstnn", "config": model.cfg.to_dict(), "dtype": model.dtype.name}
    meta.update(extra_meta or {})
    buffers = dict(model.buffers())
    buffers.update(std.to_buffers())
    save_checkpoint(path, model.params(), buffers, meta, optimizer.state if optimizer is not None else None)


def load_trained(path):
    """Return ``(model, standardizer, meta)``."""
    params, buffers, meta, _ = load_checkpoint(path)
    if meta.get("model_kind") != "pstnn":
        raise ValueError(f"{path}: not a PSTNN checkpoint")
    model = PstnnModel(PstnnConfig(**meta["config"]), dtype=np.dtype(meta.get("dtype", "float32")))
    model.load_state(params, {k: v for k, v in buffers.items() if not k.startswith(STD_PREFIX)})
    return model, Standardizer.from_buffers(buffers), meta


# -- baseline ------------------------------------------------------------------

def run_baseline_gmm_ubm(train_set: FeatureSet, test_set: FeatureSet, ubm: gmm_mod.Gmm,
                         relevance: float = gmm_mod.DEFAULT_RELEVANCE, n_classes=None, class_names=(),
                         n_timing=16) -> Metrics:
    """MAP-adapt one model per class from its pooled training frames and
    label each test clip by the best UBM log-likelihood ratio."""
    if len(test_set) == 0:
        raise ValueError("cannot evaluate an empty test split")
    n_classes = n_classes or int(max(train_set.labels.max(), test_set.labels.max()) + 1)
    models = []
    for c in range(n_classes):
        frames = [m for m, y in zip(train_set.mfcc, train_set.labels) if y == c]
        if not frames:
            raise ValueError(f"class {c} has no training clips")
        models.append(gmm_mod.map_adapt_means(ubm, np.concatenate(frames), relevance))
    preds = [gmm_mod.gmm_ubm_classify(models, ubm, m) for m in test_set.mfcc]
    k = min(n_timing, len(test_set))
    t = time_per_sample(lambda i: gmm_mod.gmm_ubm_classify(models, ubm, test_set.mfcc[i]), range(k))
    return Metrics.from_predictions(test_set.labels, preds, n_classes, t, class_names=class_names)


# -- ablations -----------------------------------------------------------------

@dataclass
class AblationGrid:
    """Grid axes. ``None`` in a branch list means "branch absent"."""

    sfenn: list = field(default_factory=lambda: ["dnn"])
    tfenn: list = field(default_factory=lambda: ["bilstm"])
    fusion: list = field(default_factory=lambda: ["attention"])
    losses: list = field(default_factory=lambda: [(0.25, 0.5)])
    seeds: list = field(default_factory=lambda: [0])
    checkpoints: tuple = (10, 20)

    def points(self):
        """Distinct model configs; single-branch points ignore fusion and loss axes."""
        seen, out = set(), []
        for s, t, f, (lt, ls), seed in itertools.product(self.sfenn, self.tfenn, self.fusion, self.losses, self.seeds):
            if s is None and t is None:
                continue
            if s is None or t is None:
                f, lt, ls = "attention", 0.0, 0.0
            key = (s, t, f, float(lt), float(ls), seed)
            if key not in seen:
                seen.add(key)
                out.append(key)
        return out


ABLATION_COLUMNS = ("sfenn", "tfenn", "fusion", "lambda_t", "lambda_s", "seed", "epoch_a", "acc_a", "epoch_b", "acc_b")


def ablation_grid(train_set: FeatureSet, test_set: FeatureSet, grid: AblationGrid, hyper: Hyper,
                  n_classes: int, base: PstnnConfig | None = None):
    """Train and score every grid point; accuracy is read at both checkpoint epochs."""
    base = base or PstnnConfig(n_classes=n_classes)
    e_a, e_b = sorted(grid.checkpoints)
    if e_b > hyper.epochs:
        raise ValueError(f"checkpoint epoch {e_b} exceeds epochs={hyper.epochs}")
    std = Standardizer.fit(train_set)
    rows = []
    for s, t, f, lt, ls, seed in grid.points():
        cfg = PstnnConfig(**{**base.to_dict(), "sfenn_kind": s, "tfenn_kind": t, "fusion": f,
                             "lambda_t": lt, "lambda_s": ls, "seed": seed, "n_classes": n_classes})
        h = Hyper(**{**asdict(hyper), "epochs": e_b, "seed": seed})
        model = PstnnModel(cfg, dtype=h.dtype)
        accs = {}

        def score(epoch, m, accs=accs):
            if epoch + 1 in (e_a, e_b):
                post = _posteriors_all(m, std, test_set)
                accs[epoch + 1] = float(np.mean(post.argmax(1) == test_set.labels))

        train(model, train_set, h, std, on_epoch_end=score)
        rows.append({"sfenn": s or "-", "tfenn": t or "-", "fusion": f if s and t else "-",
                     "lambda_t": lt, "lambda_s": ls, "seed": seed,
                     "epoch_a": e_a, "acc_a": accs[e_a], "epoch_b": e_b, "acc_b": accs[e_b]})
        log.info("ablation %s", rows[-1])
    return rows


def write_ablation_report(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS, delimiter="\t", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.4f}" if k.startswith("acc") else v) for k, v in r.items()})


def read_ablation_report(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


__all__ = [
    "Hyper", "lr_at", "FeatureSet", "load_features", "Standardizer", "Metrics", "train", "evaluate",
    "predict", "run_baseline_gmm_ubm", "AblationGrid", "ablation_grid", "write_ablation_report",
    "read_ablation_report", "save_trained", "load_trained", "chunk_windows", "random_crop", "pad_frames",
    "clip_posteriors", "mfcc_cache_path",
]
