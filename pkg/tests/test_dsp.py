import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from devtrace.corpus import AudioClip, apply_device, make_device_profile, synth_utterance
from devtrace.dsp import (
    MfccConfig,
    deltas,
    frame_signal,
    hz_to_mel,
    mel_filterbank,
    mfcc,
    n_frames_for,
    read_feature_cache,
    write_feature_cache,
)
from scipy.fft import dct, idct

CFG = MfccConfig()
SR = 32000


# -- literal per-formula reference ----------------------------------------------

def ref_mfcc(x, sr=SR, frame_ms=30.0, hop_ms=15.0, n_fft=1024, n_filt=26, n_ceps=13, width=2, floor=1e-10):
    """Loop-by-loop restatement of the MFCC recipe; shares no code with dsp."""
    flen = int(round(frame_ms * sr / 1000))
    hop = int(round(hop_ms * sr / 1000))
    n_frames = (len(x) - flen) // hop + 1
    window = [0.54 - 0.46 * np.cos(2 * np.pi * j / (flen - 1)) for j in range(flen)]

    def mel(f):
        return 2595.0 * np.log10(1 + f / 700.0)

    def imel(m):
        return 700.0 * (10 ** (m / 2595.0) - 1)

    top = mel(sr / 2)
    edges = [imel(top * i / (n_filt + 1)) for i in range(n_filt + 2)]
    n_bins = n_fft // 2 + 1
    fb = np.zeros((n_filt, n_bins))
    for m in range(n_filt):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        for k in range(n_bins):
            f = k * sr / n_fft
            if lo < f <= mid:
                fb[m, k] = (f - lo) / (mid - lo)
            elif mid < f < hi:
                fb[m, k] = (hi - f) / (hi - mid)
        fb[m] /= fb[m].max()

    k = np.arange(n_bins)[:, None]
    n = np.arange(flen)[None, :]
    dft = np.exp(-2j * np.pi * k * n / n_fft)  # zero padding to n_fft is implicit
    statics = np.zeros((n_frames, n_ceps))
    for i in range(n_frames):
        frame = np.array([window[j] * x[i * hop + j] for j in range(flen)])
        power = np.abs(dft @ frame) ** 2 / n_fft
        logmel = [np.log(max(float(fb[m] @ power), floor)) for m in range(n_filt)]
        for q in range(n_ceps):
            scale = np.sqrt(1.0 / n_filt) if q == 0 else np.sqrt(2.0 / n_filt)
            statics[i, q] = scale * sum(logmel[m] * np.cos(np.pi * q * (2 * m + 1) / (2 * n_filt))
                                        for m in range(n_filt))

    def reg(c):
        T = len(c)
        out = np.zeros_like(c)
        denom = 2 * sum(d * d for d in range(1, width + 1))
        for t in range(T):
            for d in range(1, width + 1):
                out[t] += d * (c[min(t + d, T - 1)] - c[max(t - d, 0)])
        return out / denom

    d1 = reg(statics)
    return np.hstack([statics, d1, reg(d1)])


@pytest.mark.parametrize("seed", range(10))
def test_mfcc_matches_reference(seed):
    clip = synth_utterance(seed, duration_s=1.0)
    ours = mfcc(clip)
    ref = ref_mfcc(clip.samples)
    assert ours.shape == ref.shape == (65, 39)
    np.testing.assert_allclose(ours, ref, rtol=0, atol=1e-8)


# -- framing ---------------------------------------------------------------------

def test_two_seconds_gives_132_frames():
    assert frame_signal(AudioClip(np.zeros(64000))).shape == (132, 960)
    assert mfcc(synth_utterance(0)).shape == (132, 39)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 5000), flen=st.integers(1, 400), hop=st.integers(1, 400))
def test_frame_count_formula(n, flen, hop):
    if n < flen:
        return
    windows = np.lib.stride_tricks.sliding_window_view(np.arange(n), flen)[::hop]
    assert n_frames_for(n, flen, hop) == len(windows)


def test_ones_frame_is_hamming():
    frames = frame_signal(AudioClip(np.ones(4000)))
    win = 0.54 - 0.46 * np.cos(2 * np.pi * np.arange(960) / 959)
    np.testing.assert_allclose(frames, np.broadcast_to(win, frames.shape), atol=1e-15)


def test_frame_index_oracle(rng):
    x = rng.uniform(-1, 1, 5000)
    frames = frame_signal(AudioClip(x))
    win = np.hamming(960)
    for i in (0, 3, len(frames) - 1):
        for j in (0, 100, 959):
            assert frames[i, j] == win[j] * x[i * 480 + j]


def test_short_clip_rejected():
    with pytest.raises(ValueError):
        frame_signal(AudioClip(np.zeros(500)))
    with pytest.raises(ValueError):
        mfcc(AudioClip(np.zeros(960 + 480 * 3)))  # 4 frames < 5


def test_config_validation():
    for kw in (dict(frame_ms=10, hop_ms=15), dict(n_ceps=30), dict(fft_size=1000), dict(delta_width=0)):
        with pytest.raises(ValueError):
            MfccConfig(**kw)
    with pytest.raises(ValueError):
        frame_signal(AudioClip(np.zeros(4000)), MfccConfig(fft_size=512))


# -- filterbank ------------------------------------------------------------------

def test_mel_formula_point():
    assert hz_to_mel(700.0) == pytest.approx(2595 * np.log10(2), rel=1e-15)


def test_filterbank_shape_and_triangles():
    fb = mel_filterbank(CFG, SR)
    w = fb.weights
    assert w.shape == (26, 513)
    assert np.all(w >= 0) and np.allclose(w.max(axis=1), 1.0)
    assert np.all(np.diff(fb.centers_hz) > 0)
    for row in w:
        nz = np.flatnonzero(row)
        peak = np.argmax(row)
        assert np.all(np.diff(row[nz[0]:peak + 1]) >= 0)
        assert np.all(np.diff(row[peak:nz[-1] + 1]) <= 0)
    # neighbours overlap
    assert np.all((w[:-1] * w[1:]).sum(axis=1) > 0)


def test_filterbank_flat_spectrum():
    w = mel_filterbank(CFG, SR).weights
    flat = np.ones(513)
    expect = np.array([sum(row[k] for k in range(513)) for row in w])
    np.testing.assert_allclose(w @ flat, expect, rtol=1e-13)


# -- deltas ----------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(T=st.integers(1, 40), c=st.floats(-1e3, 1e3), width=st.integers(1, 4))
def test_delta_of_constant_is_exactly_zero(T, c, width):
    assert np.all(deltas(np.full((T, 3), c), width) == 0.0)


def test_delta_delta_of_linear_ramp_is_zero_in_interior():
    t = np.arange(30, dtype=float)[:, None] * np.array([[0.5, -2.0]])
    d1 = deltas(t, 2)
    np.testing.assert_allclose(d1[2:-2], np.broadcast_to([0.5, -2.0], (26, 2)), atol=1e-13)
    # with edge replication the ramp's delta is constant only away from the ends
    np.testing.assert_array_equal(deltas(d1, 2)[4:-4], 0.0)


def test_silence_statics_constant_and_deltas_zero():
    out = mfcc(AudioClip(np.zeros(32000)))
    floor_static = dct(np.full(26, np.log(1e-10)), type=2, norm="ortho")[:13]
    np.testing.assert_allclose(out[:, :13], np.broadcast_to(floor_static, (out.shape[0], 13)), atol=1e-12)
    assert np.all(out[:, 13:] == 0.0)


def test_tone_is_steady():
    t = np.arange(32000) / SR
    # 1 kHz: 32 samples per period, so every 480-sample hop lands on the same phase
    out = mfcc(AudioClip(0.5 * np.sin(2 * np.pi * 1000 * t)))
    np.testing.assert_allclose(out[:, :13], np.broadcast_to(out[0, :13], (len(out), 13)), atol=1e-9)
    assert np.max(np.abs(out[:, 13:])) < 1e-9


def test_dct_is_orthonormal():
    logmel = np.log(np.random.default_rng(0).uniform(1e-3, 10, 26))
    np.testing.assert_allclose(idct(dct(logmel, norm="ortho"), norm="ortho"), logmel, atol=1e-10)


def test_no_cepstral_mean_subtraction():
    clip = synth_utterance(3, duration_s=1.0)
    taps = np.zeros(16)
    taps[:3] = [1.0, -0.9, 0.2]
    prof_taps = taps / np.linalg.norm(taps)
    from devtrace.corpus import DeviceProfile

    colored = apply_device(clip, DeviceProfile("hp", prof_taps, -120.0, 0), noise_seed=0)
    a, b = mfcc(clip)[:, :13].mean(0), mfcc(colored)[:, :13].mean(0)
    assert np.max(np.abs(a - b)) > 0.5


def test_width_is_39_for_random_device_clip():
    clip = apply_device(synth_utterance(8, duration_s=1.3), make_device_profile(1), noise_seed=2)
    out = mfcc(clip)
    assert out.shape[1] == 39 and np.all(np.isfinite(out))


def test_feature_cache_round_trip(tmp_path):
    values = np.random.default_rng(1).standard_normal((17, 39))
    write_feature_cache(tmp_path / "c.mfcc", values, "wav/dev01/clip0003")
    back, cid = read_feature_cache(tmp_path / "c.mfcc")
    assert cid == "wav/dev01/clip0003"
    np.testing.assert_array_equal(back, values)
    (tmp_path / "bad").write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(ValueError):
        read_feature_cache(tmp_path / "bad")
