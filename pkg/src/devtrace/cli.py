"""``devtrace`` command line.

Every subcommand reads one YAML run config (``--config``) plus optional
``--set section.key=value`` overrides, writes its artifacts under
``paths.work_dir`` and drops a run manifest (config hash, seed, library
versions) in ``<work_dir>/manifests/<command>.json``.

Exit codes: 0 success, 1 other failure, 2 config error, 3 missing
prerequisite artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__, kernels
from .corpus import CorpusManifest, build_corpus, read_wav
from .dsp import MfccConfig, mfcc, read_feature_cache, write_feature_cache
from .gmm import EmConfig, Gmm, extract_gsv, train_gmm_em, write_gsv_cache
from .nn import NumericError
from .pstnn import FUSION_KINDS, MFCC_DIM, SFENN_KINDS, TFENN_KINDS, PstnnConfig, PstnnModel
from .trainer import (
    AblationGrid,
    Hyper,
    ablation_grid,
    evaluate,
    load_features,
    load_trained,
    mfcc_cache_path,
    predict,
    run_baseline_gmm_ubm,
    save_trained,
    single_thread,
    train,
    write_ablation_report,
)

log = logging.getLogger("devtrace")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERIC = 0, 1, 2, 3, 4

DEFAULTS = {
    "corpus": {"n_devices": 8, "clips_per_device": 100, "split_ratio": 0.8, "seed": 0,
               "duration_s": 2.0, "sample_rate": 32000, "n_jobs": 1},
    "features": {f.name: f.default for f in dataclasses.fields(MfccConfig)},
    "ubm": {"n_components": 64, "relevance": 16.0,
            **{f.name: f.default for f in dataclasses.fields(EmConfig)}},
    "model": {k: v for k, v in dataclasses.asdict(PstnnConfig()).items() if k not in ("n_classes", "gsv_dim")},
    "train": dataclasses.asdict(Hyper()),
    "ablate": {"sfenn": ["dnn", None], "tfenn": ["bilstm", None], "fusion": ["attention", "splicing"],
               "losses": [[0.25, 0.5], [0.0, 0.0]], "seeds": [0, 1, 2], "checkpoints": [10, 20]},
    "paths": {"work_dir": "runs/default"},
}


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n" + "\n".join(f"  - {p}" for p in self.problems))


class DependencyError(RuntimeError):
    def __init__(self, artifact, command):
        self.command = command
        super().__init__(f"missing {artifact}; run `devtrace {command}` first")


# -- config --------------------------------------------------------------------

def _set_override(cfg, item, problems):
    key, sep, raw = item.partition("=")
    parts = key.strip().split(".")
    if not sep or len(parts) != 2:
        problems.append(f"--set expects section.key=value, got {item!r}")
        return
    section, name = parts
    cfg.setdefault(section, {})[name] = yaml.safe_load(raw)


def _check_type(section, key, value, default, problems):
    if default is None or value is None:
        return True
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, (int, float)):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if ok and isinstance(default, int) and not isinstance(default, bool) and float(value) != int(value):
            ok = False
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        problems.append(f"{section}.{key}: expected {type(default).__name__}, got {value!r}")
    return ok


def load_config(path=None, overrides=()):
    """Merge defaults, the YAML file and overrides; raise ConfigError listing every problem."""
    problems = []
    user = {}
    if path is not None:
        try:
            user = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError([f"cannot read {path}: {exc}"]) from exc
        if not isinstance(user, dict):
            raise ConfigError([f"{path}: top level must be a mapping"])
    for item in overrides:
        _set_override(user, item, problems)

    cfg = {s: dict(v) for s, v in DEFAULTS.items()}
    for section, values in user.items():
        if section not in DEFAULTS:
            problems.append(f"unknown section {section!r}")
            continue
        if not isinstance(values, dict):
            problems.append(f"section {section!r} must be a mapping")
            continue
        for key, value in values.items():
            if key not in DEFAULTS[section]:
                problems.append(f"unknown key {section}.{key}")
                continue
            # a mistyped value keeps its default so the range checks below still run
            if _check_type(section, key, value, DEFAULTS[section][key], problems):
                cfg[section][key] = value
    problems += _semantic_problems(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def _semantic_problems(cfg):
    problems = []
    c = cfg["corpus"]
    if c["n_devices"] < 2:
        problems.append("corpus.n_devices must be >= 2")
    if c["clips_per_device"] < 10:
        problems.append("corpus.clips_per_device must be >= 10")
    if not 0 < c["split_ratio"] < 1:
        problems.append("corpus.split_ratio must lie in (0, 1)")
    if c["duration_s"] <= 0:
        problems.append("corpus.duration_s must be > 0")
    for name, build in (("features", lambda: mfcc_config(cfg)), ("ubm", lambda: em_config(cfg))):
        try:
            build()
        except (ValueError, TypeError) as exc:
            problems.append(f"{name}: {exc}")
    if cfg["ubm"]["n_components"] < 1:
        problems.append("ubm.n_components must be >= 1")
    if cfg["ubm"]["relevance"] < 0:
        problems.append("ubm.relevance must be >= 0")
    problems += [f"model: {p}" for p in model_config(cfg, c["n_devices"], validate=False).violations()]
    try:
        problems += [f"train: {p}" for p in Hyper.violations(_hyper_raw(cfg))]
    except TypeError as exc:
        problems.append(f"train: {exc}")
    a = cfg["ablate"]
    for key, allowed in (("sfenn", SFENN_KINDS + (None,)), ("tfenn", TFENN_KINDS + (None,)),
                         ("fusion", FUSION_KINDS)):
        problems += [f"ablate.{key}: unknown kind {v!r}" for v in a[key] if v not in allowed]
    if len(a["checkpoints"]) != 2 or min(a["checkpoints"]) < 1:
        problems.append("ablate.checkpoints must be two positive epochs")
    for pair in a["losses"]:
        if not (isinstance(pair, list) and len(pair) == 2):
            problems.append(f"ablate.losses entries must be [lambda_t, lambda_s], got {pair!r}")
    return problems


def _hyper_raw(cfg):
    # bypass __post_init__ so violations can be listed rather than raised one by one
    h = object.__new__(Hyper)
    h.__dict__.update(cfg["train"])
    return h


def mfcc_config(cfg):
    return MfccConfig(**cfg["features"])


def em_config(cfg):
    u = cfg["ubm"]
    return EmConfig(**{f.name: u[f.name] for f in dataclasses.fields(EmConfig)})


def model_config(cfg, n_classes, gsv_dim=None, validate=True):
    kw = dict(cfg["model"], n_classes=n_classes,
              gsv_dim=gsv_dim or cfg["ubm"]["n_components"] * MFCC_DIM)
    if validate:
        return PstnnConfig(**kw)
    c = object.__new__(PstnnConfig)
    c.__dict__.update(kw)
    return c


def config_hash(cfg):
    raw = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(raw).hexdigest()


# -- layout --------------------------------------------------------------------

class Layout:
    def __init__(self, cfg):
        self.work = Path(cfg["paths"]["work_dir"])
        self.corpus = self.work / "corpus"
        self.manifest = self.corpus / "manifest.tsv"
        self.features = self.work / "features"
        self.ubm = self.work / "ubm.dtgm"
        self.gsv = self.work / "gsv.dtgv"
        self.model = self.work / "model.dtck"
        self.metrics = self.work / "metrics.json"
        self.metrics_txt = self.work / "metrics.txt"
        self.timing = self.work / "timing.json"
        self.baseline = self.work / "baseline_metrics.json"
        self.ablation = self.work / "ablation.tsv"
        self.manifests = self.work / "manifests"


def _require(path, command, what):
    if not Path(path).exists():
        raise DependencyError(f"{what} ({path})", command)


def _read_manifest(lay):
    _require(lay.manifest, "synth-corpus", "corpus manifest")
    return CorpusManifest.read(lay.manifest)


def _features(lay, manifest, split):
    _require(lay.gsv, "gsv", "supervector cache")
    for e in manifest.split(split):
        _require(mfcc_cache_path(lay.features, e.clip_id), "extract", "MFCC cache")
    return load_features(manifest, split, lay.features, lay.gsv)


def _write_run_manifest(lay, command, cfg, outputs, seed):
    lay.manifests.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "config": cfg,
        "outputs": [str(p) for p in outputs],
        "versions": {"devtrace": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "kernel_backend": kernels.BACKEND,
        "finished_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    (lay.manifests / f"{command}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# -- commands ------------------------------------------------------------------

def cmd_synth_corpus(cfg, lay, args):
    c = cfg["corpus"]
    build_corpus(c["n_devices"], c["clips_per_device"], c["split_ratio"], c["seed"], lay.corpus,
                 c["duration_s"], c["sample_rate"], n_jobs=c["n_jobs"])
    return [lay.manifest], c["seed"]


def cmd_extract(cfg, lay, args):
    manifest = _read_manifest(lay)
    mcfg = mfcc_config(cfg)
    for e in manifest.entries:
        out = mfcc_cache_path(lay.features, e.clip_id)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_feature_cache(out, mfcc(read_wav(manifest.resolve(e)), mcfg), e.clip_id)
    return [lay.features], None


def cmd_train_ubm(cfg, lay, args):
    manifest = _read_manifest(lay)
    frames = []
    for e in manifest.split("train"):
        path = mfcc_cache_path(lay.features, e.clip_id)
        _require(path, "extract", "MFCC cache")
        frames.append(read_feature_cache(path)[0])
    ubm = train_gmm_em(np.concatenate(frames), cfg["ubm"]["n_components"], em_config(cfg))
    ubm.save(lay.ubm)
    return [lay.ubm], cfg["ubm"]["seed"]


def cmd_gsv(cfg, lay, args):
    manifest = _read_manifest(lay)
    _require(lay.ubm, "train-ubm", "UBM")
    ubm = Gmm.load(lay.ubm)
    r = cfg["ubm"]["relevance"]
    ids, vecs = [], []
    for e in manifest.entries:
        path = mfcc_cache_path(lay.features, e.clip_id)
        _require(path, "extract", "MFCC cache")
        ids.append(e.clip_id)
        vecs.append(extract_gsv(ubm, read_feature_cache(path)[0], r).values)
    write_gsv_cache(lay.gsv, ids, np.stack(vecs), ubm.n_components, ubm.dim, r)
    return [lay.gsv], None


def cmd_train(cfg, lay, args):
    manifest = _read_manifest(lay)
    tr = _features(lay, manifest, "train")
    hyper = Hyper(**cfg["train"])
    mcfg = model_config(cfg, len(manifest.device_ids), tr.gsv.shape[1])
    model = PstnnModel(mcfg, dtype=hyper.dtype)
    model, history, std, opt = train(model, tr, hyper)
    save_trained(lay.model, model, std, {"history": history, "class_names": manifest.device_ids,
                                         "config_hash": config_hash(cfg)}, opt)
    return [lay.model], hyper.seed


def cmd_eval(cfg, lay, args):
    _require(lay.model, "train", "trained model")
    manifest = _read_manifest(lay)
    te = _features(lay, manifest, "test")
    model, std, meta = load_trained(lay.model)
    det = cfg["train"]["deterministic"]
    m = evaluate(model, te, std, meta.get("history", []), meta.get("class_names", []), deterministic=det)
    # timing is wall-clock, so in deterministic mode it goes to its own file
    m.write_json(lay.metrics, include_timing=not det)
    outputs = [lay.metrics, lay.metrics_txt]
    if det:
        lay.timing.write_text(json.dumps({"per_sample_test_time": round(m.per_sample_test_time, 4)}) + "\n")
        outputs.append(lay.timing)
    lay.metrics_txt.write_text(m.table("PSTNN") + "\n")
    print(m.table("PSTNN"))
    return outputs, cfg["train"]["seed"]


def cmd_predict(cfg, lay, args):
    _require(lay.model, "train", "trained model")
    _require(lay.ubm, "train-ubm", "UBM")
    model, std, meta = load_trained(lay.model)
    ubm = Gmm.load(lay.ubm)
    label, post = predict(model, read_wav(args.wav), ubm, std, mfcc_config(cfg), cfg["ubm"]["relevance"])
    names = meta.get("class_names") or [str(i) for i in range(len(post))]
    print(f"label\t{names[label]}")
    for n, p in zip(names, post):
        print(f"{n}\t{p:.6f}")
    return [], None


def cmd_baseline(cfg, lay, args):
    manifest = _read_manifest(lay)
    _require(lay.ubm, "train-ubm", "UBM")
    tr, te = _features(lay, manifest, "train"), _features(lay, manifest, "test")
    m = run_baseline_gmm_ubm(tr, te, Gmm.load(lay.ubm), cfg["ubm"]["relevance"], len(manifest.device_ids),
                             manifest.device_ids)
    m.write_json(lay.baseline, include_timing=not cfg["train"]["deterministic"])
    print(m.table("GMM-UBM"))
    return [lay.baseline], None


def cmd_ablate(cfg, lay, args):
    manifest = _read_manifest(lay)
    tr, te = _features(lay, manifest, "train"), _features(lay, manifest, "test")
    a = cfg["ablate"]
    grid = AblationGrid(a["sfenn"], a["tfenn"], a["fusion"], [tuple(p) for p in a["losses"]], a["seeds"],
                        tuple(a["checkpoints"]))
    hyper = Hyper(**cfg["train"])
    base = model_config(cfg, len(manifest.device_ids), tr.gsv.shape[1])
    rows = ablation_grid(tr, te, grid, hyper, len(manifest.device_ids), base)
    write_ablation_report(lay.ablation, rows)
    print(lay.ablation.read_text(), end="")
    return [lay.ablation], None


COMMANDS = {
    "synth-corpus": (cmd_synth_corpus, "render the synthetic device corpus and its manifest"),
    "extract": (cmd_extract, "compute and cache 39-d MFCCs for every clip"),
    "train-ubm": (cmd_train_ubm, "fit the UBM on pooled training frames"),
    "gsv": (cmd_gsv, "MAP-adapt the UBM per clip and cache supervectors"),
    "train": (cmd_train, "train the parallel spatial-temporal network"),
    "eval": (cmd_eval, "score the trained network on the test split"),
    "predict": (cmd_predict, "classify one WAV file"),
    "baseline": (cmd_baseline, "score the GMM-UBM baseline on the test split"),
    "ablate": (cmd_ablate, "train and score the ablation grid"),
}


def build_parser():
    p = argparse.ArgumentParser(prog="devtrace", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", type=Path, help="YAML run config")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        if name == "predict":
            sp.add_argument("--wav", type=Path, required=True)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as exc:
        print(f"devtrace: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    lay = Layout(cfg)
    fn = COMMANDS[args.command][0]
    try:
        with single_thread(cfg["train"]["deterministic"]):
            outputs, seed = fn(cfg, lay, args)
    except DependencyError as exc:
        print(f"devtrace {args.command}: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (NumericError, FloatingPointError) as exc:
        print(f"devtrace {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"devtrace {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    _write_run_manifest(lay, args.command, cfg, outputs, seed)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
