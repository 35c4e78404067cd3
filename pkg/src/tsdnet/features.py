"""Audio I/O and the two log-mel front ends.

Mixture branch: 22.05 kHz, 2048-sample Hann window, hop 441 (50 fps), 64 mels.
Reference branch: 44.1 kHz, 400-sample window, hop 200, 64 mels + 20 MFCCs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct
from scipy.signal import resample_poly

EPS = 1e-10


class WavFormatError(ValueError):
    """Raised when a RIFF/WAVE file cannot be decoded."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("AudioClip holds mono audio; downmix first")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError(f"non-finite samples in clip {self.source_id!r}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureMatrix:
    values: np.ndarray
    frames_per_second: float
    kind: str

    KINDS = ("log-mel", "mfcc", "logmel+mfcc")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ValueError(f"feature matrix must be t x f with t >= 1, got {self.values.shape}")
        if self.frames_per_second <= 0:
            raise ValueError("frames_per_second must be positive")

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class MixtureFeatureConfig:
    sample_rate: int = 22050
    window_size: int = 2048
    hop_size: int = 441
    n_mels: int = 64
    fmin: float = 0.0
    fmax: float | None = None

    @property
    def frames_per_second(self) -> float:
        return self.sample_rate / self.hop_size


@dataclass(frozen=True)
class ReferenceFeatureConfig:
    sample_rate: int = 44100
    window_size: int = 400
    hop_size: int = 200
    n_mels: int = 64
    n_mfcc: int = 20
    fmin: float = 0.0
    fmax: float | None = None

    @property
    def n_features(self) -> int:
        return self.n_mels + self.n_mfcc


# --------------------------------------------------------------------------- wav


def _iter_chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4].decode("latin-1")
        size = struct.unpack("<I", data[pos + 4:pos + 8])[0]
        yield cid, data[pos + 8:pos + 8 + size]
        pos += 8 + size + (size & 1)


def load_wav(path) -> AudioClip:
    """Read a PCM16/PCM24/float32 RIFF file, downmix to mono, scale to [-1, 1]."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise WavFormatError(f"{path}: unreadable ({exc})") from exc
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: 'RIFF' header chunk missing or not WAVE")

    fmt = payload = None
    for cid, body in _iter_chunks(data):
        if cid == "fmt " and fmt is None:
            fmt = body
        elif cid == "data" and payload is None:
            payload = body
    if fmt is None or len(fmt) < 16:
        raise WavFormatError(f"{path}: 'fmt ' chunk missing or truncated")
    if payload is None:
        raise WavFormatError(f"{path}: 'data' chunk missing")

    tag, channels, rate, _, align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == 0xFFFE and len(fmt) >= 40:  # WAVE_FORMAT_EXTENSIBLE
        tag = struct.unpack("<H", fmt[24:26])[0]
    if channels not in (1, 2):
        raise WavFormatError(f"{path}: 'fmt ' chunk declares {channels} channels (1-2 supported)")

    n = len(payload) // align
    payload = payload[:n * align]
    if tag == 1 and bits == 16:
        x = np.frombuffer(payload, dtype="<i2").astype(np.float64) / 32768.0
    elif tag == 1 and bits == 24:
        raw = np.frombuffer(payload, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        ints = raw[:, 0] | (raw[:, 1] << 8) | (raw[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        x = ints.astype(np.float64) / float(1 << 23)
    elif tag == 3 and bits == 32:
        x = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    else:
        raise WavFormatError(
            f"{path}: 'fmt ' chunk has unsupported codec (format tag {tag}, {bits} bits)")

    x = x.reshape(-1, channels).mean(axis=1)
    if not np.all(np.isfinite(x)):
        raise WavFormatError(f"{path}: 'data' chunk contains non-finite samples")
    return AudioClip(np.clip(x, -1.0, 1.0), rate, source_id=path.stem)


def write_wav(path, clip: AudioClip) -> None:
    """Write 16-bit PCM mono. Output bytes depend only on the samples."""
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2").tobytes()
    fmt = struct.pack("<HHIIHH", 1, 1, clip.sample_rate, clip.sample_rate * 2, 2, 16)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", len(pcm)) + pcm
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


# --------------------------------------------------------------------------- dsp


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == clip.sample_rate:
        return clip
    g = np.gcd(int(target_rate), clip.sample_rate)
    y = resample_poly(clip.samples, target_rate // g, clip.sample_rate // g)
    return AudioClip(y, target_rate, clip.source_id)


def stft_magnitude(clip: AudioClip, window_size: int, hop_size: int) -> np.ndarray:
    """One-sided |STFT|, Hann window, reflect-padded by window_size // 2 on both sides.

    Frame count is ``1 + len // hop_size``.
    """
    if window_size < 2 or hop_size < 1:
        raise ValueError("window_size >= 2 and hop_size >= 1 required")
    x = clip.samples
    pad = window_size // 2
    if len(x) <= pad:
        raise ValueError(
            f"clip of {len(x)} samples too short for window {window_size} with centre padding")
    x = np.pad(x, pad, mode="reflect")
    n_frames = 1 + (len(x) - window_size) // hop_size
    frames = np.lib.stride_tricks.sliding_window_view(x, window_size)[::hop_size][:n_frames]
    window = np.hanning(window_size + 1)[:-1]  # periodic Hann
    return np.abs(np.fft.rfft(frames * window, axis=1))


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int, fmin: float = 0.0,
                   fmax: float | None = None) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape (n_mels, n_fft // 2 + 1).

    Filters narrower than one FFT bin are widened to cover their nearest bin so that
    every row has positive mass.
    """
    fmax = sample_rate / 2 if fmax is None else fmax
    bin_hz = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, len(bin_hz)))
    for m in range(n_mels):
        lo, centre, hi = edges[m:m + 3]
        up = (bin_hz - lo) / (centre - lo)
        down = (hi - bin_hz) / (hi - centre)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
        if fb[m].sum() <= 0:
            fb[m, np.argmin(np.abs(bin_hz - centre))] = 1.0
    return fb


def log_mel(clip: AudioClip, sample_rate, window_size, hop_size, n_mels, fmin=0.0, fmax=None):
    clip = resample(clip, sample_rate)
    power = stft_magnitude(clip, window_size, hop_size) ** 2
    fb = mel_filterbank(sample_rate, window_size, n_mels, fmin, fmax)
    return np.log(power @ fb.T + EPS)


def mfcc_from_log_mel(logmel: np.ndarray, n_mfcc: int) -> np.ndarray:
    return dct(logmel, type=2, axis=1, norm="ortho")[:, :n_mfcc]


def mixture_features(clip: AudioClip, cfg: MixtureFeatureConfig = MixtureFeatureConfig()) -> FeatureMatrix:
    """Log-mel of the mixture, cropped to the label grid ``floor(duration * fps)`` frames.

    Frame i then covers [i / fps, (i + 1) / fps), the same grid ``frame_labels`` uses.
    """
    fps = cfg.sample_rate / cfg.hop_size
    values = log_mel(clip, cfg.sample_rate, cfg.window_size, cfg.hop_size, cfg.n_mels, cfg.fmin, cfg.fmax)
    n = max(1, int(np.floor(clip.duration * fps + 1e-9)))
    return FeatureMatrix(values[:n], fps, "log-mel")


def reference_features(clip: AudioClip, cfg: ReferenceFeatureConfig = ReferenceFeatureConfig()) -> FeatureMatrix:
    lm = log_mel(clip, cfg.sample_rate, cfg.window_size, cfg.hop_size, cfg.n_mels, cfg.fmin, cfg.fmax)
    mf = mfcc_from_log_mel(lm, cfg.n_mfcc)
    return FeatureMatrix(np.concatenate([lm, mf], axis=1), cfg.sample_rate / cfg.hop_size, "logmel+mfcc")


# ------------------------------------------------------------------------ cache


@dataclass
class FeatureCache:
    """On-disk ``.npy`` cache keyed by (source_id, config hash)."""

    root: Path
    version: int = 1
    _memory: dict = field(default_factory=dict, repr=False)

    def path_for(self, source_id: str, cfg_hash: str) -> Path:
        return Path(self.root) / f"v{self.version}" / cfg_hash / f"{source_id}.npy"

    def get(self, source_id: str, cfg_hash: str, compute):
        key = (source_id, cfg_hash)
        if key in self._memory:
            return self._memory[key]
        p = self.path_for(source_id, cfg_hash)
        if p.exists():
            arr = np.load(p)
        else:
            arr = np.asarray(compute(), dtype=np.float32)
            p.parent.mkdir(parents=True, exist_ok=True)
            tmp = p.with_suffix(".tmp.npy")
            np.save(tmp, arr)
            tmp.replace(p)
        self._memory[key] = arr
        return arr
