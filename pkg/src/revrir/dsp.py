"""Signal primitives: real FFT, FFT convolution, log-magnitude features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

DEFAULT_FLOOR_DB = -120.0


@dataclass(frozen=True, eq=False)
class Signal:
    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValidationError("signal must be one-dimensional")
        if not np.all(np.isfinite(x)):
            raise ValidationError("signal contains non-finite samples")
        if not self.sample_rate > 0:
            raise ValidationError("sample_rate must be positive")
        object.__setattr__(self, "samples", x)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True, eq=False)
class Spectrogram:
    values: np.ndarray  # frames x bins, dB
    frame_length: int
    hop: int
    sample_rate: float

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def next_power_of_two(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def fft_real(x, n: int) -> np.ndarray:
    """DFT of ``x`` zero-padded to ``n`` points, bins ``0..n/2``."""
    x = np.asarray(x, dtype=np.float64)
    if not is_power_of_two(n):
        raise ValidationError(f"FFT size {n} is not a power of two")
    if x.shape[-1] > n:
        raise ValidationError(f"FFT size {n} shorter than input length {x.shape[-1]}")
    return np.fft.rfft(x, n=n)


def ifft_real(spectrum, n: int) -> np.ndarray:
    if not is_power_of_two(n):
        raise ValidationError(f"FFT size {n} is not a power of two")
    return np.fft.irfft(spectrum, n=n)


def convolve(s: Signal, h: Signal) -> Signal:
    """Full linear convolution via zero-padded FFTs."""
    if s.sample_rate != h.sample_rate:
        raise ValidationError(f"sample-rate mismatch: {s.sample_rate} vs {h.sample_rate}")
    return Signal(convolve_arrays(s.samples, h.samples), s.sample_rate)


def convolve_arrays(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValidationError("cannot convolve an empty signal")
    out_len = a.size + b.size - 1
    n = next_power_of_two(out_len)
    return ifft_real(fft_real(a, n) * fft_real(b, n), n)[:out_len]


def log_mag_spectrum(h, n: int = 4096, floor_db: float = DEFAULT_FLOOR_DB) -> np.ndarray:
    """``20 log10 |FFT(h)|`` over ``n/2 + 1`` bins, clamped at ``floor_db``.

    ``h`` may be an array, a :class:`Signal`, or anything with ``samples``;
    a leading batch axis is allowed.
    """
    x = np.asarray(getattr(h, "samples", h), dtype=np.float64)
    mag = np.abs(fft_real(x, n))
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(mag)
    return np.maximum(db, floor_db)


def frame_count(length: int, frame_length: int, hop: int) -> int:
    return 1 + (length - frame_length) // hop


def spectrogram(
    x: Signal,
    frame_length: int = 256,
    hop: int = 128,
    floor_db: float = DEFAULT_FLOOR_DB,
) -> Spectrogram:
    """Hann-windowed log-magnitude STFT in dB (frames x bins)."""
    if not is_power_of_two(frame_length):
        raise ValidationError(f"frame_length {frame_length} is not a power of two")
    if hop < 1:
        raise ValidationError("hop must be at least one sample")
    samples = x.samples if isinstance(x, Signal) else np.asarray(x, dtype=np.float64)
    if samples.shape[-1] < frame_length:
        raise ValidationError(
            f"signal of {samples.shape[-1]} samples is shorter than one {frame_length}-sample frame"
        )
    frames = np.lib.stride_tricks.sliding_window_view(samples, frame_length)[::hop]
    window = np.hanning(frame_length + 1)[:-1]  # periodic Hann
    mag = np.abs(np.fft.rfft(frames * window, axis=-1))
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(mag)
    rate = x.sample_rate if isinstance(x, Signal) else 0.0
    return Spectrogram(np.maximum(db, floor_db), frame_length, hop, rate)
