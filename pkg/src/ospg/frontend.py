"""Waveform -> 80-channel log-Mel frontend, plus mono audio file I/O."""

from __future__ import annotations

import functools
import math
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class AudioSignal:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio samples must be finite")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    frame_len: int = 400
    frame_hop: int = 160
    fft_size: int = 512
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = math.log(1e-10)

    def __post_init__(self):
        if self.frame_len > self.fft_size:
            raise ValueError("frame_len must not exceed fft_size")
        if self.fft_size & (self.fft_size - 1):
            raise ValueError(f"fft_size must be a power of two, got {self.fft_size}")
        if not 0 <= self.f_min < self.f_max <= self.sample_rate / 2:
            raise ValueError("need 0 <= f_min < f_max <= sample_rate / 2")
        if self.frame_hop < 1 or self.n_mels < 1:
            raise ValueError("frame_hop and n_mels must be positive")


@dataclass(frozen=True)
class MelSpectrogram:
    frames: np.ndarray  # [T', n_mels]
    frame_hop: int
    frame_len: int

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def n_frames(n_samples: int, frame_len: int, hop: int) -> int:
    return (n_samples - frame_len) // hop + 1


def frame_and_window(signal: AudioSignal, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    x = np.asarray(signal.samples, dtype=np.float64)
    if len(x) < cfg.frame_len:
        raise ValueError(f"signal has {len(x)} samples, shorter than one frame ({cfg.frame_len})")
    t = n_frames(len(x), cfg.frame_len, cfg.frame_hop)
    idx = np.arange(cfg.frame_len)[None, :] + cfg.frame_hop * np.arange(t)[:, None]
    # periodic Hann
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(cfg.frame_len) / cfg.frame_len)
    return x[idx] * window


def power_spectrum(frames: np.ndarray, fft_size: int) -> np.ndarray:
    spec = np.fft.rfft(frames, n=fft_size, axis=-1)
    return spec.real**2 + spec.imag**2


@functools.lru_cache(maxsize=8)
def _dft_basis(n: int) -> tuple[np.ndarray, np.ndarray]:
    angle = 2 * np.pi * ((np.arange(n // 2 + 1)[:, None] * np.arange(n)[None, :]) % n) / n
    return np.cos(angle), np.sin(angle)


def naive_dft(x: np.ndarray, n: int | None = None) -> np.ndarray:
    """Direct O(n^2) DFT by explicit summation, zero-padded to ``n``; bins 0..n//2."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x) if n is None else n
    xp = np.zeros(n)
    xp[: len(x)] = x
    cos, sin = _dft_basis(n)
    return cos @ xp - 1j * (sin @ xp)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """Center frequencies (Hz) of the mel filters."""
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    return pts[1:-1]


def mel_filterbank(cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """[n_mels, fft_size//2+1] triangular filters with unit peak.

    Edges are evaluated at exact bin frequencies, so adjacent triangles sum to
    one everywhere between the first and last center.
    """
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    freqs = np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate / cfg.fft_size
    lo, mid, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def log_mel(signal: AudioSignal, cfg: FrontendConfig = FrontendConfig()) -> MelSpectrogram:
    if signal.sample_rate != cfg.sample_rate:
        raise ValueError(f"sample rate {signal.sample_rate} does not match frontend rate {cfg.sample_rate}")
    power = power_spectrum(frame_and_window(signal, cfg), cfg.fft_size)
    energy = power @ mel_filterbank(cfg).T
    frames = np.log(np.maximum(energy, math.exp(cfg.log_floor)))
    return MelSpectrogram(frames.astype(np.float32), cfg.frame_hop, cfg.frame_len)


# -- file formats -----------------------------------------------------------

RAW_SUFFIXES = (".f32", ".raw")


def write_wav(path, signal: AudioSignal) -> None:
    pcm = np.clip(np.round(np.asarray(signal.samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(signal.sample_rate)
        w.writeframes(pcm.tobytes())


def read_wav(path) -> AudioSignal:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise ValueError(f"{path}: only mono 16-bit PCM is supported")
        rate = w.getframerate()
        data = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return AudioSignal(data.astype(np.float32) / 32768.0, rate)


def write_raw(path, signal: AudioSignal) -> None:
    Path(path).write_bytes(np.asarray(signal.samples, dtype="<f4").tobytes())


def read_raw(path, sample_rate: int = 16000) -> AudioSignal:
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    return AudioSignal(data.astype(np.float32), sample_rate)


def load_audio(path, sample_rate: int = 16000) -> AudioSignal:
    """Dispatch on extension: ``.wav`` is 16-bit PCM, ``.f32``/``.raw`` raw float32."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"audio file not found: {path}")
    if path.suffix.lower() == ".wav":
        return read_wav(path)
    if path.suffix.lower() in RAW_SUFFIXES:
        return read_raw(path, sample_rate)
    raise ValueError(f"{path}: unsupported audio extension {path.suffix!r}")
