"""Audio ingestion and log-mel features.

The front end is deliberately small: load/resample/peak-normalize a
waveform, short-time Fourier transform with a periodic Hann window and
no centering, a triangular mel filterbank, per-recording dynamic-range
compression to [-1, 1], and segmentation into fixed 43-frame chunks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from gmvc.errors import InvalidInput, ShapeError, TooShort

SAMPLE_RATE = 22050
MEL_BANDS = 96
CHUNK_FRAMES = 43
HOP = 256
WIN = 1024
N_FFT = 1024
FLOOR_DB = 80.0

_LOG_GUARD = 1e-10  # keeps log10 finite on empty bands


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # (T, 96) in [-1, 1]
    hop: int = HOP

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class MelConfig:
    sample_rate: int = SAMPLE_RATE
    n_fft: int = N_FFT
    win_length: int = WIN
    hop: int = HOP
    n_mels: int = MEL_BANDS
    fmin: float = 0.0
    fmax: float = SAMPLE_RATE / 2.0
    floor_db: float = FLOOR_DB

    def validate(self) -> "MelConfig":
        if min(self.n_fft, self.win_length, self.hop, self.n_mels) < 1:
            raise InvalidInput("mel config sizes must be positive")
        if self.win_length > self.n_fft:
            raise InvalidInput("window longer than FFT size")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2.0:
            raise InvalidInput("need 0 <= fmin < fmax <= Nyquist")
        if self.floor_db <= 0:
            raise InvalidInput("floor_db must be positive")
        return self


def _hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular filters, (n_mels, n_fft//2 + 1), unit peak."""
    edges = mel_to_hz(
        np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    )
    bin_hz = np.arange(cfg.n_fft // 2 + 1) * (cfg.sample_rate / cfg.n_fft)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz[None, :] - lo) / (mid - lo)
    falling = (hi - bin_hz[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def load_waveform(path: str, target_rate: int = SAMPLE_RATE) -> Waveform:
    """Read a wav file: mono-mix, resample, peak-normalize to 1.0."""
    from scipy.io import wavfile

    rate, data = wavfile.read(path)
    if data.size == 0:
        raise InvalidInput(f"empty waveform: {path}")
    x = data.astype(np.float64)
    if np.issubdtype(data.dtype, np.integer):
        x /= float(-np.iinfo(data.dtype).min)
    if x.ndim == 2:
        x = x.mean(axis=1)
    elif x.ndim != 1:
        raise ShapeError(f"unsupported wav layout {data.shape}")
    if rate != target_rate:
        x = resample(x, rate, target_rate)
    return Waveform(normalize_peak(x), target_rate)


def resample(x: np.ndarray, rate_in: int, rate_out: int) -> np.ndarray:
    """Polyphase windowed-sinc rate conversion."""
    from scipy.signal import resample_poly

    frac = Fraction(rate_out, rate_in)
    return resample_poly(x, frac.numerator, frac.denominator)


def normalize_peak(x: np.ndarray) -> np.ndarray:
    peak = np.max(np.abs(x)) if x.size else 0.0
    if peak == 0.0:
        return np.asarray(x, dtype=np.float64)
    return np.asarray(x, dtype=np.float64) / peak


def stft_magnitude(x: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """(frames, n_fft//2+1) magnitudes; no centering, tail dropped."""
    n = x.shape[0]
    if n < cfg.win_length:
        raise TooShort(
            f"waveform of {n} samples is shorter than one {cfg.win_length}-sample window"
        )
    n_frames = 1 + (n - cfg.win_length) // cfg.hop
    idx = np.arange(cfg.win_length)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    frames = x[idx] * _hann_periodic(cfg.win_length)[None, :]
    return np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1))


def compute_mel(w: Waveform, cfg: MelConfig | None = None) -> MelSpectrogram:
    """Log-magnitude mel spectrogram compressed to [-1, 1].

    The dynamic range is clipped ``floor_db`` below the recording's own
    maximum and that span mapped linearly onto [-1, 1]; an all-zero
    waveform lands on the floor, i.e. every cell is exactly -1.
    """
    cfg = (cfg or MelConfig()).validate()
    x = np.asarray(w.samples, dtype=np.float64)
    if x.size == 0:
        raise InvalidInput("empty waveform")
    if w.sample_rate != cfg.sample_rate:
        raise InvalidInput(
            f"waveform at {w.sample_rate} Hz; expected {cfg.sample_rate}"
        )
    mag = stft_magnitude(x, cfg)
    if not np.any(x):
        out = np.full((mag.shape[0], cfg.n_mels), -1.0, dtype=np.float32)
        return MelSpectrogram(out, cfg.hop)
    mel = mag @ mel_filterbank(cfg).T
    db = 20.0 * np.log10(np.maximum(mel, _LOG_GUARD))
    top = db.max()
    out = np.clip((db - top) / (cfg.floor_db / 2.0) + 1.0, -1.0, 1.0)
    return MelSpectrogram(out.astype(np.float32), cfg.hop)


def chunk(m: MelSpectrogram) -> list[np.ndarray]:
    """Split into consecutive 43-frame blocks; the tail is dropped."""
    t = m.frames.shape[0]
    if m.frames.ndim != 2 or m.frames.shape[1] != MEL_BANDS:
        raise ShapeError(f"expected (T, {MEL_BANDS}) mel matrix, got {m.frames.shape}")
    n = t // CHUNK_FRAMES
    if n == 0:
        raise TooShort(f"{t} frames < one {CHUNK_FRAMES}-frame chunk")
    blocks = m.frames[: n * CHUNK_FRAMES].reshape(n, CHUNK_FRAMES, MEL_BANDS)
    return [blocks[i].copy() for i in range(n)]


def chunk_array(m: MelSpectrogram) -> np.ndarray:
    """Same as chunk() but stacked: (N, 43, 96)."""
    return np.stack(chunk(m), axis=0)
