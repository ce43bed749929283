"""39-dimensional MFCC front-end: Hamming-windowed 30 ms frames every 15 ms,
26 mel filters, log, orthonormal DCT-II keeping c0..c12, then regression
deltas and delta-deltas.

No pre-emphasis and no cepstral mean subtraction: the recording device acts
as a convolutional channel, which lands in the cepstral mean. Removing the
mean would remove the label.

Feature cache layout (little-endian)::

    magic      4 bytes  b"DTMF"
    version    uint16   1
    n_frames   uint32
    n_cols     uint32   (39)
    id_len     uint16
    clip_id    id_len bytes, UTF-8
    values     n_frames * n_cols float64, row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .corpus import AudioClip

N_STATIC = 13
MFCC_DIM = 3 * N_STATIC

_CACHE_MAGIC = b"DTMF"
_CACHE_HEAD = struct.Struct("<4sHIIH")


@dataclass(frozen=True)
class MfccConfig:
    frame_ms: float = 30.0
    hop_ms: float = 15.0
    fft_size: int = 1024
    n_mel_filters: int = 26
    n_ceps: int = N_STATIC
    delta_width: int = 2
    log_floor: float = 1e-10

    def __post_init__(self):
        if not self.frame_ms > self.hop_ms > 0:
            raise ValueError("need frame_ms > hop_ms > 0")
        if self.n_ceps > self.n_mel_filters:
            raise ValueError("n_ceps cannot exceed n_mel_filters")
        if self.fft_size & (self.fft_size - 1):
            raise ValueError("fft_size must be a power of two")
        if self.delta_width < 1:
            raise ValueError("delta_width must be >= 1")

    def frame_len(self, sample_rate):
        return int(round(self.frame_ms * sample_rate / 1000.0))

    def hop_len(self, sample_rate):
        return int(round(self.hop_ms * sample_rate / 1000.0))


@dataclass
class FilterBank:
    weights: np.ndarray  # (n_filters, fft_size // 2 + 1)
    edges_hz: np.ndarray  # (n_filters + 2,)

    @property
    def centers_hz(self):
        return self.edges_hz[1:-1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def n_frames_for(n_samples, frame_len, hop_len):
    return (n_samples - frame_len) // hop_len + 1


def frame_signal(clip: AudioClip, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    flen = cfg.frame_len(clip.sample_rate)
    hop = cfg.hop_len(clip.sample_rate)
    if len(clip) < flen:
        raise ValueError(f"clip has {len(clip)} samples, shorter than one {flen}-sample frame")
    if flen > cfg.fft_size:
        raise ValueError(f"fft_size {cfg.fft_size} is smaller than the {flen}-sample frame")
    win = np.lib.stride_tricks.sliding_window_view(clip.samples, flen)[::hop]
    return win * np.hamming(flen)


def mel_filterbank(cfg: MfccConfig, sample_rate: int) -> FilterBank:
    """Triangles evaluated on the FFT bin frequencies, each scaled to peak 1."""
    n_bins = cfg.fft_size // 2 + 1
    mels = np.linspace(0.0, hz_to_mel(sample_rate / 2.0), cfg.n_mel_filters + 2)
    edges = mel_to_hz(mels)
    freqs = np.arange(n_bins) * sample_rate / cfg.fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    w = np.clip(np.minimum(up, down), 0.0, None)
    peak = w.max(axis=1, keepdims=True)
    if np.any(peak == 0):
        raise ValueError("fft_size too small: some mel filters cover no FFT bin")
    return FilterBank(w / peak, edges)


def deltas(feat: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas over +/-width frames with edge replication."""
    T = feat.shape[0]
    padded = np.pad(feat, ((width, width), (0, 0)), mode="edge")
    num = np.zeros_like(feat)
    for n in range(1, width + 1):
        num += n * (padded[width + n:width + n + T] - padded[width - n:width - n + T])
    return num / (2 * sum(n * n for n in range(1, width + 1)))


def log_mel_energies(clip: AudioClip, cfg: MfccConfig = MfccConfig(), fbank: FilterBank | None = None):
    frames = frame_signal(clip, cfg)
    if fbank is None:
        fbank = mel_filterbank(cfg, clip.sample_rate)
    power = np.abs(np.fft.rfft(frames, cfg.fft_size)) ** 2 / cfg.fft_size
    return np.log(np.maximum(power @ fbank.weights.T, cfg.log_floor))


def mfcc(clip: AudioClip, cfg: MfccConfig = MfccConfig(), fbank: FilterBank | None = None) -> np.ndarray:
    """Return the (n_frames, 39) matrix [statics | deltas | delta-deltas]."""
    flen, hop = cfg.frame_len(clip.sample_rate), cfg.hop_len(clip.sample_rate)
    need = 2 * cfg.delta_width + 1
    if len(clip) < flen or n_frames_for(len(clip), flen, hop) < need:
        raise ValueError(f"clip too short: need at least {need} frames for delta context")
    statics = dct(log_mel_energies(clip, cfg, fbank), type=2, norm="ortho", axis=1)[:, : cfg.n_ceps]
    d1 = deltas(statics, cfg.delta_width)
    d2 = deltas(d1, cfg.delta_width)
    out = np.hstack([statics, d1, d2])
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite MFCC values")
    return out


# -- cache files -----------------------------------------------------------

def write_feature_cache(path, values: np.ndarray, clip_id: str) -> None:
    values = np.ascontiguousarray(values, dtype="<f8")
    ident = clip_id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CACHE_HEAD.pack(_CACHE_MAGIC, 1, values.shape[0], values.shape[1], len(ident)))
        fh.write(ident)
        fh.write(values.tobytes())


def read_feature_cache(path):
    """Return ``(values, clip_id)``."""
    data = Path(path).read_bytes()
    if len(data) < _CACHE_HEAD.size:
        raise ValueError(f"{path}: truncated feature cache")
    magic, version, n_frames, n_cols, id_len = _CACHE_HEAD.unpack_from(data)
    if magic != _CACHE_MAGIC or version != 1:
        raise ValueError(f"{path}: not a version-1 feature cache")
    off = _CACHE_HEAD.size
    clip_id = data[off:off + id_len].decode("utf-8")
    off += id_len
    values = np.frombuffer(data, dtype="<f8", count=n_frames * n_cols, offset=off)
    return values.reshape(n_frames, n_cols).astype(np.float64), clip_id
