import itertools
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from devtrace.corpus import (
    AudioClip,
    CorpusManifest,
    DeviceProfile,
    WavFormatError,
    apply_device,
    build_corpus,
    device_components,
    device_profiles,
    make_device_profile,
    n_train_clips,
    read_wav,
    synth_utterance,
    write_wav,
)

# 80% of the smallest pairwise distance measured for make_device_profile(0..7)
# with the direct-DFT oracle below (observed minimum 1.4546 dB).
D_MIN_DB = 1.16
# largest |NCC| over 100 utterance pairs at any lag was 0.113
NCC_MAX = 0.5


def _write_raw(path, frames, n_channels=1, width=2, rate=32000):
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(n_channels)
        wf.setsampwidth(width)
        wf.setframerate(rate)
        wf.writeframes(frames)


def _dft_db(taps, n_fft=512):
    # literal DFT, independent of np.fft
    k = np.arange(n_fft // 2 + 1)[:, None]
    n = np.arange(len(taps))[None, :]
    H = (np.exp(-2j * np.pi * k * n / n_fft) * taps).sum(axis=1)
    return 20 * np.log10(np.abs(H))


# -- WAV -------------------------------------------------------------------------

def test_read_wav_scaling(tmp_path):
    p = tmp_path / "half.wav"
    _write_raw(p, np.full(100, 16384, dtype="<i2").tobytes())
    clip = read_wav(p)
    assert clip.sample_rate == 32000
    np.testing.assert_array_equal(clip.samples, 0.5)


def test_write_wav_zeros_and_saturation(tmp_path):
    p = tmp_path / "z.wav"
    write_wav(AudioClip(np.array([0.0, 0.0, 1.0, -1.0])), p)
    with wave.open(str(p), "rb") as wf:
        raw = np.frombuffer(wf.readframes(4), dtype="<i2")
        assert (wf.getnchannels(), wf.getsampwidth()) == (1, 2)
    np.testing.assert_array_equal(raw, [0, 0, 32767, -32768])


def test_stereo_rejected(tmp_path):
    p = tmp_path / "st.wav"
    _write_raw(p, np.zeros(20, dtype="<i2").tobytes(), n_channels=2)
    with pytest.raises(WavFormatError, match="channel"):
        read_wav(p)


def test_8bit_and_garbage_rejected(tmp_path):
    p = tmp_path / "b8.wav"
    _write_raw(p, bytes(20), width=1)
    with pytest.raises(WavFormatError):
        read_wav(p)
    q = tmp_path / "junk.wav"
    q.write_bytes(b"not a riff file at all")
    with pytest.raises(WavFormatError):
        read_wav(q)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 300), elements=st.floats(-1, 1)))
def test_wav_round_trip(tmp_path_factory, x):
    p = tmp_path_factory.mktemp("rt") / "c.wav"
    write_wav(AudioClip(x), p)
    assert np.max(np.abs(read_wav(p).samples - x)) <= 1 / 32768 + 1e-15


def test_audio_clip_validation():
    with pytest.raises(ValueError):
        AudioClip(np.array([]))
    with pytest.raises(ValueError):
        AudioClip(np.array([0.1]), sample_rate=0)


# -- synthesis -------------------------------------------------------------------

def test_synth_utterance_deterministic_and_sized():
    a, b = synth_utterance(5), synth_utterance(5)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert len(a) == 64000 and a.sample_rate == 32000
    assert np.sqrt(np.mean(a.samples ** 2)) == pytest.approx(0.1, rel=1e-9)
    assert np.max(np.abs(a.samples)) <= 1.0


def test_synth_utterance_rejects_short():
    with pytest.raises(ValueError):
        synth_utterance(0, duration_s=0.5)


def test_distinct_seeds_are_uncorrelated():
    a, b = synth_utterance(1).samples, synth_utterance(2).samples
    a, b = a - a.mean(), b - b.mean()
    ncc = np.correlate(a, b, mode="full")
    assert np.max(np.abs(ncc)) / (np.linalg.norm(a) * np.linalg.norm(b)) < NCC_MAX


def test_device_profile_basics():
    p = make_device_profile(3)
    q = make_device_profile(3)
    np.testing.assert_array_equal(p.fir_taps, q.fir_taps)
    assert np.linalg.norm(p.fir_taps) == pytest.approx(1.0, abs=1e-12)
    assert len(p.fir_taps) == 64
    with pytest.raises(ValueError):
        make_device_profile(0, n_taps=4)
    with pytest.raises(ValueError):
        DeviceProfile("x", np.ones(8) / np.sqrt(8), noise_floor_db=3.0, seed=0)


def test_device_coloration_is_gentle():
    db = _dft_db(make_device_profile(11).fir_taps)
    # +-6 dB shaping around its mean, before the window's roll-off at band edges
    inner = db[8:-8]
    assert np.ptp(inner) <= 12.5


def test_profiles_pairwise_spectral_distance():
    profiles = [make_device_profile(s) for s in range(8)]
    dists = [np.sqrt(np.mean((_dft_db(a.fir_taps) - _dft_db(b.fir_taps)) ** 2))
             for a, b in itertools.combinations(profiles, 2)]
    assert min(dists) >= D_MIN_DB


def test_default_corpus_profiles_separated():
    profiles = device_profiles(8, 0)
    dists = [np.sqrt(np.mean((_dft_db(a.fir_taps) - _dft_db(b.fir_taps)) ** 2))
             for a, b in itertools.combinations(profiles, 2)]
    assert min(dists) >= D_MIN_DB


def test_identity_device():
    clip = synth_utterance(4, duration_s=1.0)
    taps = np.zeros(16)
    taps[0] = 1.0
    out = apply_device(clip, DeviceProfile("id", taps, -120.0, 0), noise_seed=1)
    assert len(out) == len(clip)
    np.testing.assert_allclose(out.samples, clip.samples, atol=1e-5)


@pytest.mark.parametrize("floor_db", [-45.0, -35.0, -20.0])
def test_noise_floor_snr(floor_db):
    clip = synth_utterance(9, duration_s=1.0)
    prof = make_device_profile(2, noise_floor_db=floor_db)
    filtered, noise = device_components(clip, prof, noise_seed=3)
    snr = 10 * np.log10(np.mean(filtered ** 2) / np.mean(noise ** 2))
    assert abs(snr + floor_db) <= 0.5
    out = apply_device(clip, prof, noise_seed=3)
    assert len(out) == len(clip) and np.max(np.abs(out.samples)) <= 1.0


# -- corpus ----------------------------------------------------------------------

@pytest.mark.parametrize("clips,ratio,expected", [(100, 0.8, 80), (642, 0.8, 514), (10, 0.8, 8), (10, 0.99, 9)])
def test_train_counts(clips, ratio, expected):
    assert n_train_clips(clips, ratio) == expected


def test_build_corpus_stratified_and_deterministic(tiny_corpus, tmp_path):
    m = tiny_corpus
    assert len(m.entries) == 30
    for dev in m.device_ids:
        splits = [e.split for e in m.entries if e.device_id == dev]
        assert splits.count("train") == 8 and splits.count("test") == 2
    again = build_corpus(3, 10, 0.8, seed=7, out_dir=tmp_path, duration_s=1.0)
    assert again.entries == m.entries
    for e in m.entries[:5]:
        assert (tmp_path / e.path).read_bytes() == m.resolve(e).read_bytes()


def test_parallel_generation_matches_serial(tiny_corpus, tmp_path):
    build_corpus(3, 10, 0.8, seed=7, out_dir=tmp_path, duration_s=1.0, n_jobs=2)
    for e in tiny_corpus.entries:
        assert (tmp_path / e.path).read_bytes() == tiny_corpus.resolve(e).read_bytes()


def test_manifest_round_trip(tiny_corpus, tmp_path):
    tiny_corpus.write(tmp_path / "m.tsv")
    back = CorpusManifest.read(tmp_path / "m.tsv")
    assert back == tiny_corpus
    assert back.label_index() == {"dev00": 0, "dev01": 1, "dev02": 2}


def test_manifest_rejects_bad_header(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("file\tdevice\tsplit\n")
    with pytest.raises(ValueError, match="header"):
        CorpusManifest.read(p)


@pytest.mark.parametrize("kw", [dict(n_devices=1), dict(clips_per_device=5), dict(split_ratio=1.0)])
def test_build_corpus_preconditions(tmp_path, kw):
    args = dict(n_devices=2, clips_per_device=10, split_ratio=0.8, seed=0, out_dir=tmp_path)
    args.update(kw)
    with pytest.raises(ValueError):
        build_corpus(**args)
