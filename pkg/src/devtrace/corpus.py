"""WAV I/O and a deterministic synthetic multi-device corpus.

Each simulated device is a linear FIR coloration plus a white noise floor.
Utterances are pseudo-speech (pitched pulse train through drifting formant
resonators). Everything is a pure function of its seed.

Manifest layout (tab-separated, UTF-8)::

    # devtrace-manifest v1 n_devices=<int> seed=<int> split_ratio=<float>
    path<TAB>device_id<TAB>split
    wav/dev00/clip0000.wav<TAB>dev00<TAB>train
    ...

Paths are relative to the directory holding the manifest. Column order is
fixed: ``path``, ``device_id``, ``split``.
"""

from __future__ import annotations

import logging
import math
import wave
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

log = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE = 32000
MANIFEST_NAME = "manifest.tsv"
MANIFEST_COLUMNS = ("path", "device_id", "split")


class WavFormatError(ValueError):
    """Raised for WAV files that are malformed or not PCM16 mono."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("AudioClip needs a non-empty 1-D sample array")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


@dataclass
class DeviceProfile:
    device_id: str
    fir_taps: np.ndarray
    noise_floor_db: float
    seed: int = 0

    def __post_init__(self):
        self.fir_taps = np.asarray(self.fir_taps, dtype=np.float64)
        if self.fir_taps.ndim != 1 or self.fir_taps.size < 8:
            raise ValueError("fir_taps needs at least 8 coefficients")
        if abs(np.linalg.norm(self.fir_taps) - 1.0) > 1e-9:
            raise ValueError("fir_taps must have unit L2 norm")
        if not self.noise_floor_db < 0:
            raise ValueError("noise_floor_db must be negative")


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    device_id: str
    split: str

    @property
    def clip_id(self):
        return Path(self.path).with_suffix("").as_posix()


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry]
    n_devices: int
    seed: int
    split_ratio: float = 0.8
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest paths must be unique")
        for e in self.entries:
            if e.split not in ("train", "test"):
                raise ValueError(f"bad split {e.split!r} for {e.path}")

    @property
    def device_ids(self):
        return sorted({e.device_id for e in self.entries})

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def resolve(self, entry):
        return self.root / entry.path

    def label_index(self):
        return {d: i for i, d in enumerate(self.device_ids)}

    def write(self, path):
        path = Path(path)
        lines = [
            f"# devtrace-manifest v1 n_devices={self.n_devices} seed={self.seed} split_ratio={self.split_ratio!r}",
            "\t".join(MANIFEST_COLUMNS),
        ]
        lines += [f"{e.path}\t{e.device_id}\t{e.split}" for e in self.entries]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path):
        path = Path(path)
        meta = {}
        entries = []
        header_seen = False
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    if "=" in tok:
                        k, v = tok.split("=", 1)
                        meta[k] = v
                continue
            cols = line.split("\t")
            if not header_seen:
                if tuple(cols) != MANIFEST_COLUMNS:
                    raise ValueError(f"{path}:{lineno}: expected header {MANIFEST_COLUMNS}, got {cols}")
                header_seen = True
                continue
            if len(cols) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 columns, got {len(cols)}")
            entries.append(ManifestEntry(*cols))
        n_dev = int(meta.get("n_devices", len({e.device_id for e in entries})))
        return cls(entries, n_dev, int(meta.get("seed", 0)), float(meta.get("split_ratio", 0.8)), root=path.parent)


# -- WAV ---------------------------------------------------------------------

def read_wav(path) -> AudioClip:
    try:
        with wave.open(str(path), "rb") as wf:
            n_ch = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    except EOFError as exc:
        raise WavFormatError(f"{path}: truncated header") from exc
    if n_ch != 1:
        raise WavFormatError(f"{path}: expected 1 channel, found {n_ch}")
    if width != 2:
        raise WavFormatError(f"{path}: expected 16-bit PCM, found {8 * width}-bit")
    pcm = np.frombuffer(raw, dtype="<i2")
    if pcm.size == 0:
        raise WavFormatError(f"{path}: no samples")
    return AudioClip(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(clip: AudioClip, path) -> None:
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    path = Path(path)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(clip.sample_rate))
        wf.writeframes(pcm.tobytes())


# -- synthesis -----------------------------------------------------------------

_FORMANT_RANGES = ((300.0, 900.0), (900.0, 2400.0), (2000.0, 3400.0), (3000.0, 4500.0))
_BLOCK_S = 0.01


def _smooth_walk(rng, n_knots, n_out, lo, hi):
    """Random trajectory in [lo, hi] interpolated from a few knots."""
    knots = rng.uniform(lo, hi, size=n_knots)
    return np.interp(np.linspace(0, n_knots - 1, n_out), np.arange(n_knots), knots)


def synth_utterance(seed: int, duration_s: float = 2.0, sample_rate: int = DEFAULT_SAMPLE_RATE) -> AudioClip:
    """Deterministic pseudo-speech: a pitched pulse train shaped by 2-4
    slowly moving resonators, plus broadband noise at 10% of its RMS."""
    if duration_s < 1.0:
        raise ValueError("duration_s must be at least 1.0 s")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    n_knots = max(3, int(duration_s * 4))

    f0 = _smooth_walk(rng, n_knots, n, 80.0, 250.0)
    phase = np.cumsum(f0 / sample_rate)
    pulses = np.diff(np.floor(phase), prepend=0.0)
    # soften the pulses a little so the excitation is not a bare comb
    excitation = signal.lfilter([1.0], [1.0, -0.9], pulses - pulses.mean())

    n_formants = int(rng.integers(2, 5))
    block = int(round(_BLOCK_S * sample_rate))
    n_blocks = -(-n // block)
    voiced = np.zeros(n)
    for k in range(n_formants):
        lo, hi = _FORMANT_RANGES[k]
        centers = _smooth_walk(rng, n_knots, n_blocks, lo, hi)
        bandwidth = rng.uniform(60.0, 200.0)
        r = math.exp(-math.pi * bandwidth / sample_rate)
        zi = np.zeros(2)
        out = np.empty(n)
        for b in range(n_blocks):
            theta = 2 * math.pi * centers[b] / sample_rate
            a = [1.0, -2 * r * math.cos(theta), r * r]
            gain = (1 - r) * math.sqrt(1 - 2 * r * math.cos(2 * theta) + r * r)
            sl = slice(b * block, min(n, (b + 1) * block))
            out[sl], zi = signal.lfilter([gain], a, excitation[sl], zi=zi)
        voiced += out * rng.uniform(0.5, 1.0)

    voiced /= np.sqrt(np.mean(voiced ** 2)) + 1e-20
    x = voiced + 0.1 * rng.standard_normal(n)
    x *= 0.1 / np.sqrt(np.mean(x ** 2))
    return AudioClip(x, sample_rate)


def make_device_profile(seed: int, n_taps: int = 64, noise_floor_db: float = -40.0,
                        device_id: str | None = None, max_dev_db: float = 6.0) -> DeviceProfile:
    """Random smooth coloration within +/-``max_dev_db`` dB, realized as a
    linear-phase FIR with unit L2 norm."""
    if n_taps < 8:
        raise ValueError("n_taps must be at least 8")
    rng = np.random.default_rng(seed)
    spec = np.fft.rfft(rng.standard_normal(n_taps))
    log_mag = np.log(np.abs(spec) + 1e-12)
    width = max(3, (n_taps // 2 + 1) // 4)
    kernel = np.hanning(width + 2)[1:-1]
    kernel /= kernel.sum()
    smooth = np.convolve(np.pad(log_mag, width, mode="reflect"), kernel, mode="same")[width:-width]
    smooth -= smooth.mean()
    smooth *= max_dev_db / (np.max(np.abs(smooth)) + 1e-20)
    mag = 10.0 ** (smooth / 20.0)
    h = np.fft.irfft(mag, n=n_taps)
    taps = np.roll(h, n_taps // 2 - 1) * np.hamming(n_taps)
    taps /= np.linalg.norm(taps)
    return DeviceProfile(device_id or f"dev{seed:02d}", taps, float(noise_floor_db), seed)


def device_components(clip: AudioClip, profile: DeviceProfile, noise_seed: int):
    """Return the (filtered signal, additive noise) pair before mixing."""
    x = clip.samples
    filtered = np.convolve(x, profile.fir_taps)[: x.size]
    noise = np.random.default_rng(noise_seed).standard_normal(x.size)
    noise /= np.sqrt(np.mean(noise ** 2))
    noise *= np.sqrt(np.mean(filtered ** 2)) * 10.0 ** (profile.noise_floor_db / 20.0)
    return filtered, noise


def apply_device(clip: AudioClip, profile: DeviceProfile, noise_seed: int) -> AudioClip:
    filtered, noise = device_components(clip, profile, noise_seed)
    return AudioClip(np.clip(filtered + noise, -1.0, 1.0), clip.sample_rate)


def log_spectral_distance(taps_a, taps_b, n_fft=512):
    """RMS difference in dB between two filters' magnitude responses."""
    ha = 20 * np.log10(np.abs(np.fft.rfft(taps_a, n_fft)) + 1e-12)
    hb = 20 * np.log10(np.abs(np.fft.rfft(taps_b, n_fft)) + 1e-12)
    return float(np.sqrt(np.mean((ha - hb) ** 2)))


# -- corpus --------------------------------------------------------------------

def _seed_for(*key):
    return int(np.random.SeedSequence(list(key)).generate_state(1, dtype=np.uint32)[0])


def n_train_clips(clips_per_device, split_ratio):
    # round half up so 642 clips at 0.8 give 514 train / 128 test
    k = int(math.floor(split_ratio * clips_per_device + 0.5))
    return min(max(k, 1), clips_per_device - 1)


def device_profiles(n_devices, seed, n_taps=64):
    profiles = []
    for d in range(n_devices):
        rng = np.random.default_rng(_seed_for(seed, 0xD1CE, d))
        floor_db = float(rng.uniform(-45.0, -30.0))
        profiles.append(make_device_profile(_seed_for(seed, 0xF17, d), n_taps, floor_db, device_id=f"dev{d:02d}"))
    return profiles


def _render_clip(job):
    path, utt_seed, noise_seed, profile, duration_s, sample_rate = job
    clip = apply_device(synth_utterance(utt_seed, duration_s, sample_rate), profile, noise_seed)
    write_wav(clip, path)
    return str(path)


def build_corpus(n_devices: int, clips_per_device: int, split_ratio: float, seed: int, out_dir,
                 duration_s: float = 2.0, sample_rate: int = DEFAULT_SAMPLE_RATE, n_jobs: int = 1) -> CorpusManifest:
    """Write ``n_devices * clips_per_device`` WAVs and a stratified manifest."""
    if n_devices < 2:
        raise ValueError("n_devices must be at least 2")
    if clips_per_device < 10:
        raise ValueError("clips_per_device must be at least 10")
    if not 0 < split_ratio < 1:
        raise ValueError("split_ratio must lie in (0, 1)")
    out_dir = Path(out_dir)
    profiles = device_profiles(n_devices, seed)
    n_train = n_train_clips(clips_per_device, split_ratio)

    entries, jobs = [], []
    for d, prof in enumerate(profiles):
        (out_dir / "wav" / prof.device_id).mkdir(parents=True, exist_ok=True)
        for i in range(clips_per_device):
            rel = f"wav/{prof.device_id}/clip{i:04d}.wav"
            entries.append(ManifestEntry(rel, prof.device_id, "train" if i < n_train else "test"))
            jobs.append((out_dir / rel, _seed_for(seed, 1, d, i), _seed_for(seed, 2, d, i),
                         prof, duration_s, sample_rate))

    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            list(pool.map(_render_clip, jobs, chunksize=8))
    else:
        for job in jobs:
            _render_clip(job)

    manifest = CorpusManifest(entries, n_devices, seed, split_ratio, root=out_dir)
    manifest.write(out_dir / MANIFEST_NAME)
    log.info("wrote %d clips for %d devices to %s", len(entries), n_devices, out_dir)
    return manifest
