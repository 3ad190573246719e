"""STFT front end, magnitude normalization and WAV I/O.

The analysis uses a periodic Hann window of 512 samples at 16 kHz with a
256-sample shift.  Only complete windows produce frames, the DC bin is
dropped and the Nyquist bin kept, so each frame carries F = 512/2 = 256
complex bins at center frequencies v_f = f * fs / 512, f = 1..256.

Normalization divides the whole multichannel spectrogram by a mean
magnitude so the features the estimator sees are invariant to the overall
recording level while inter-channel phase (and relative level) is kept.
The offline variant uses a single global scalar; the online variant
tracks a recursive mean with a frame-rate forgetting factor and is causal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 16000
WINDOW_SIZE = 512
HOP_SIZE = 256
NUM_FREQS = WINDOW_SIZE // 2
SMOOTHING_FRAMES = 125


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = SAMPLE_RATE
    window_size: int = WINDOW_SIZE
    hop_size: int = HOP_SIZE

    @property
    def num_freqs(self) -> int:
        return self.window_size // 2

    def frequencies(self) -> np.ndarray:
        """Center frequencies in Hz of the retained bins, f = 1..F."""
        f = np.arange(1, self.num_freqs + 1, dtype=np.float64)
        return f * self.sample_rate / self.window_size

    def num_frames(self, num_samples: int) -> int:
        if num_samples < self.window_size:
            return 0
        return (num_samples - self.window_size) // self.hop_size + 1


def hann_window(size: int = WINDOW_SIZE) -> np.ndarray:
    """Periodic Hann window: w[i] = 0.5 - 0.5 cos(2 pi i / size)."""
    i = np.arange(size, dtype=np.float64)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * i / size)


def stft(signal: np.ndarray, config: StftConfig = StftConfig()) -> np.ndarray:
    """Multichannel STFT.

    ``signal`` is (T,) or (T, M) float samples.  Returns complex128
    (N, F, M) with N complete frames, DC dropped, Nyquist kept.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError(f"expected (T,) or (T, M) signal, got shape {x.shape}")
    t, m = x.shape
    n = config.num_frames(t)
    win = hann_window(config.window_size)
    out = np.empty((n, config.num_freqs, m), dtype=np.complex128)
    for i in range(n):
        start = i * config.hop_size
        seg = x[start : start + config.window_size] * win[:, None]
        spec = np.fft.rfft(seg, axis=0)
        out[i] = spec[1:, :]
    return out


def normalize_offline(spec: np.ndarray) -> np.ndarray:
    """Divide by the global mean magnitude over frames, bins and channels."""
    mu = float(np.mean(np.abs(spec)))
    if mu <= 0.0:
        mu = 1.0
    return spec / mu


class OnlineNormalizer:
    """Causal recursive mean-magnitude tracker.

    mu(n) = beta * mu(n-1) + (1 - beta) * mean_{f,m} |X(n, f, m)| with
    beta = (L - 1) / (L + 1); the first frame initializes mu to its own
    mean magnitude.  Frames with zero running mean pass through unscaled.
    """

    def __init__(self, smoothing_frames: int = SMOOTHING_FRAMES):
        if smoothing_frames < 1:
            raise ValueError("smoothing_frames must be >= 1")
        self.beta = (smoothing_frames - 1.0) / (smoothing_frames + 1.0)
        self.mu = None

    def process_frame(self, frame: np.ndarray) -> np.ndarray:
        """Normalize one (F, M) frame, updating the running mean."""
        level = float(np.mean(np.abs(frame)))
        if self.mu is None:
            self.mu = level
        else:
            self.mu = self.beta * self.mu + (1.0 - self.beta) * level
        if self.mu <= 0.0:
            return np.array(frame, copy=True)
        return frame / self.mu


def normalize_online(spec: np.ndarray, smoothing_frames: int = SMOOTHING_FRAMES) -> np.ndarray:
    """Apply the causal normalizer to a whole (N, F, M) spectrogram."""
    norm = OnlineNormalizer(smoothing_frames)
    out = np.empty_like(spec)
    for n in range(spec.shape[0]):
        out[n] = norm.process_frame(spec[n])
    return out


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE):
    """Write float32 WAV; samples are (T,) or (T, M) in [-1, 1] nominally."""
    wavfile.write(path, sample_rate, np.asarray(samples, dtype=np.float32))


def read_wav(path, expected_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Read a WAV written by :func:`write_wav`; returns float64 samples."""
    rate, data = wavfile.read(path)
    if rate != expected_rate:
        raise ValueError(f"{path}: sample rate {rate} != expected {expected_rate}")
    if data.dtype.kind == "i":
        data = data.astype(np.float64) / float(np.iinfo(data.dtype).max)
    return np.asarray(data, dtype=np.float64)
