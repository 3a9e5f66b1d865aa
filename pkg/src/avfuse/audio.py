"""Log-mel spectrogram front end for the audio branch.

Chain: resample to 16 kHz, Hann-windowed power STFT, triangular mel
projection, log with a small offset. Window and bank defaults follow the
usual 25 ms / 10 ms / 64-bin audio-CNN convention and live in
``LogMelConfig`` rather than being hard-coded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .ops import GeometryError, ShapeError


@dataclass
class AudioClip:
    """Mono sample sequence in [-1, 1] with its sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("AudioClip needs a non-empty 1-D sample sequence")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioClip samples must be finite")


@dataclass
class LogMelConfig:
    sample_rate: int = 16_000
    window: int = 400          # 25 ms at 16 kHz
    hop: int = 160             # 10 ms at 16 kHz
    mel_bins: int = 64
    f_min: float = 125.0
    f_max: float = 7500.0
    log_offset: float = 0.01


@dataclass
class LogMel:
    """Log-mel image, ``values[mel_bin, frame]``, plus the frame parameters."""

    values: np.ndarray
    mel_bins: int
    window: int
    hop: int

    def __post_init__(self):
        if self.values.shape[0] != self.mel_bins or self.values.shape[1] < 1:
            raise ShapeError(
                f"log-mel values {self.values.shape} inconsistent with "
                f"{self.mel_bins} mel bins"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("log-mel values must be finite")


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Linear-interpolation resampling; output length = round(n * target/source)."""
    if target_rate <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    n = clip.samples.size
    out_len = max(1, round(n * target_rate / clip.sample_rate))
    pos = np.arange(out_len) * (clip.sample_rate / target_rate)
    out = np.interp(pos, np.arange(n), clip.samples)
    return AudioClip(out, target_rate)


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window: w[k] = 0.5 * (1 - cos(2 pi k / n))."""
    if n < 1:
        raise ValueError(f"window length must be >= 1, got {n}")
    k = np.arange(n)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * k / n))


def stft_power(clip: AudioClip, window_len: int, hop: int) -> np.ndarray:
    """Hann-windowed power spectrogram, shape (window_len // 2 + 1, frames).

    Frame f covers samples [f * hop, f * hop + window_len); the clip must be
    at least one window long (``log_mel`` pads short clips before calling).
    """
    n = clip.samples.size
    if window_len > n:
        raise GeometryError(
            f"clip has {n} samples, shorter than one {window_len}-sample window"
        )
    if hop < 1:
        raise ValueError(f"hop must be >= 1, got {hop}")
    frames = sliding_window_view(clip.samples, window_len)[::hop]
    spec = np.fft.rfft(frames * hann_window(window_len), axis=1)
    return np.ascontiguousarray((spec.real**2 + spec.imag**2).T)


def hz_to_mel(f):
    """Mel scale: m(f) = 2595 * log10(1 + f / 700)."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_fft_bins: int, mel_bins: int, f_min: float, f_max: float,
                   sample_rate: int) -> np.ndarray:
    """Triangular mel filters, shape (mel_bins, n_fft_bins).

    Filter centers are equally spaced on the mel scale between f_min and
    f_max; each row is an unnormalized triangle evaluated at the FFT bin
    frequencies.
    """
    if not (0 <= f_min < f_max <= sample_rate / 2):
        raise ValueError(
            f"need 0 <= f_min < f_max <= Nyquist, got {f_min}, {f_max} "
            f"at {sample_rate} Hz"
        )
    window_len = 2 * (n_fft_bins - 1)
    bin_freqs = np.arange(n_fft_bins) * sample_rate / window_len
    corners = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), mel_bins + 2))
    bank = np.zeros((mel_bins, n_fft_bins))
    for m in range(mel_bins):
        lo, center, hi = corners[m], corners[m + 1], corners[m + 2]
        up = (bin_freqs - lo) / (center - lo)
        down = (hi - bin_freqs) / (hi - center)
        bank[m] = np.maximum(0.0, np.minimum(up, down))
    if np.any(bank.sum(axis=1) == 0):
        empty = np.flatnonzero(bank.sum(axis=1) == 0)
        raise ValueError(
            f"{empty.size} mel filters have no FFT support (first: {empty[0]}); "
            f"reduce mel_bins or enlarge the window"
        )
    return bank


def log_mel(clip: AudioClip, config: LogMelConfig | None = None) -> LogMel:
    """Full log-mel pipeline; short clips are zero-padded to one window."""
    cfg = config or LogMelConfig()
    clip = resample(clip, cfg.sample_rate)
    samples = clip.samples
    if samples.size < cfg.window:
        samples = np.pad(samples, (0, cfg.window - samples.size))
        clip = AudioClip(samples, cfg.sample_rate)
    power = stft_power(clip, cfg.window, cfg.hop)
    bank = mel_filterbank(cfg.window // 2 + 1, cfg.mel_bins, cfg.f_min,
                          cfg.f_max, cfg.sample_rate)
    values = np.log(bank @ power + cfg.log_offset)
    return LogMel(values=values.astype(np.float32), mel_bins=cfg.mel_bins,
                  window=cfg.window, hop=cfg.hop)
