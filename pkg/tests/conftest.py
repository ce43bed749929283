from pathlib import Path

import numpy as np
import pytest

from devtrace import kernels


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    """Run a test under each available kernel backend, restoring the default after."""
    before = kernels.BACKEND
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(before)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """3 devices x 10 clips of 1 s, enough for pipeline plumbing tests."""
    from devtrace.corpus import build_corpus

    out = tmp_path_factory.mktemp("tiny_corpus")
    return build_corpus(3, 10, 0.8, seed=7, out_dir=out, duration_s=1.0)


DEFAULT_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "default.yaml"


@pytest.fixture(scope="session")
def default_cfg():
    from devtrace.cli import load_config

    return load_config(DEFAULT_CONFIG)


@pytest.fixture(scope="session")
def default_pipeline(default_cfg, tmp_path_factory):
    """The committed 8-device experiment up to cached features: corpus, MFCCs,
    UBM and supervectors, built once per session."""
    from devtrace.cli import em_config, mfcc_config
    from devtrace.corpus import build_corpus, read_wav
    from devtrace.dsp import mfcc
    from devtrace.gmm import extract_gsv, train_gmm_em
    from devtrace.trainer import FeatureSet

    c, u = default_cfg["corpus"], default_cfg["ubm"]
    out = tmp_path_factory.mktemp("default_corpus")
    manifest = build_corpus(c["n_devices"], c["clips_per_device"], c["split_ratio"], c["seed"], out,
                            c["duration_s"], c["sample_rate"])
    mcfg = mfcc_config(default_cfg)
    feats = {e.clip_id: mfcc(read_wav(manifest.resolve(e)), mcfg) for e in manifest.entries}
    frames = np.concatenate([feats[e.clip_id] for e in manifest.split("train")])
    ubm = train_gmm_em(frames, u["n_components"], em_config(default_cfg))
    labels = manifest.label_index()

    def split(name):
        es = manifest.split(name)
        return FeatureSet([e.clip_id for e in es], [labels[e.device_id] for e in es],
                          [feats[e.clip_id] for e in es],
                          np.stack([extract_gsv(ubm, feats[e.clip_id], u["relevance"]).values for e in es]))

    return {"manifest": manifest, "ubm": ubm, "train": split("train"), "test": split("test")}


@pytest.fixture(scope="session")
def default_model(default_cfg, default_pipeline):
    """DNN + Bi-LSTM + attention trained with the committed config."""
    from devtrace.cli import model_config
    from devtrace.pstnn import PstnnModel
    from devtrace.trainer import Hyper, train

    tr = default_pipeline["train"]
    hyper = Hyper(**default_cfg["train"])
    cfg = model_config(default_cfg, len(default_pipeline["manifest"].device_ids), tr.gsv.shape[1])
    model, history, std, _ = train(PstnnModel(cfg, dtype=hyper.dtype), tr, hyper)
    return {"model": model, "history": history, "std": std, "hyper": hyper}


# -- acceptance report ------------------------------------------------------------------

ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
