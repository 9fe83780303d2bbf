"""Hand-crafted 30-dimensional RIR descriptor for the baseline classifier.

Five bands ``[50 k, 200 k]`` Hz, ``k = 1..5``, each contribute (in order):

``decay``      energy-decay rate in dB/s: negated slope of a least-squares
               line through the Schroeder curve between -5 and -25 dB,
               computed on the band-passed RIR (brick-wall FFT mask).
``energy``     fraction of total spectral energy ``sum |H|^2`` inside the band.
``kurtosis``   excess kurtosis of the linear magnitude ``|H|`` over band bins.
``spread``     standard deviation of ``20 log10 |H|`` over band bins, dB.
``modes``      number of peaks in the band's dB response with prominence >= 6 dB.

Five time-domain features follow:

``early_density``  local maxima of ``|h|`` within 50 ms after the strongest
                   sample that reach -40 dB re that sample, per second.
``drr``            direct-to-reverberant ratio in dB; "direct" is +-2.5 ms
                   around the strongest sample.
``decay``          full-band Schroeder decay rate, dB/s.
``kurtosis``       excess kurtosis of the samples.
``centroid``       energy-weighted mean time ``sum t h^2 / sum h^2``, seconds.

Every feature is invariant to a gain on ``h``: ratios, dB differences,
shape statistics or peak counts relative to the peak.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import find_peaks
from scipy.stats import kurtosis

from ..dsp import next_power_of_two
from ..errors import FeatureError

N_BANDS = 5
BAND_FEATURES = ("decay", "energy", "kurtosis", "spread", "modes")
TIME_FEATURES = ("early_density", "drr", "decay", "kurtosis", "centroid")
FEATURE_NAMES = [f"band{k}_{f}" for k in range(1, N_BANDS + 1) for f in BAND_FEATURES] + [
    f"time_{f}" for f in TIME_FEATURES
]
N_FEATURES = len(FEATURE_NAMES)

_EPS = 1e-300


def band_edges(k: int) -> tuple[float, float]:
    return (50.0 * k, 200.0 * k)


def schroeder_db(h: np.ndarray) -> np.ndarray:
    energy = np.cumsum((h * h)[::-1])[::-1]
    if energy[0] <= 0:
        raise FeatureError("silent response has no energy decay")
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(energy / energy[0])


def decay_rate(h: np.ndarray, fs: float, upper_db: float = -5.0, lower_db: float = -25.0) -> float:
    """Decay in dB/s from a line fit to the Schroeder curve between two levels."""
    edc = schroeder_db(h)
    sel = np.flatnonzero((edc <= upper_db) & (edc >= lower_db))
    if sel.size < 2:
        raise FeatureError(f"Schroeder curve has fewer than two points in [{lower_db}, {upper_db}] dB")
    t = sel / fs
    slope = np.polyfit(t, edc[sel], 1)[0]
    return float(-slope)


def baseline_features(h, fs: float = 8000.0) -> np.ndarray:
    """The 30-vector described in the module docstring."""
    fs = float(getattr(h, "sample_rate", fs))
    h = np.asarray(getattr(h, "samples", h), dtype=np.float64)
    if not np.any(h):
        raise FeatureError("silent RIR (all zeros)")
    n = next_power_of_two(h.size)
    spec = np.fft.rfft(h, n)
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    power = np.abs(spec) ** 2
    mag_db = 10.0 * np.log10(power + _EPS)
    out = []
    for k in range(1, N_BANDS + 1):
        lo, hi = band_edges(k)
        band = (freqs >= lo) & (freqs <= hi)
        h_band = np.fft.irfft(spec * band, n)[: h.size]
        db = mag_db[band]
        out += [
            decay_rate(h_band, fs),
            power[band].sum() / power.sum(),
            kurtosis(np.sqrt(power[band])),
            db.std(),
            float(find_peaks(db, prominence=6.0)[0].size),
        ]
    mag = np.abs(h)
    onset = int(np.argmax(mag))
    early = mag[onset : onset + int(round(0.05 * fs)) + 1]
    peaks, _ = find_peaks(early, height=mag[onset] * 10 ** (-40 / 20))
    arrivals = peaks.size + 1  # the strongest sample itself is an arrival
    half = int(round(0.0025 * fs))
    energy = h * h
    direct = energy[max(0, onset - half) : onset + half + 1].sum()
    reverberant = energy.sum() - direct
    t = np.arange(h.size) / fs
    out += [
        arrivals / 0.05,
        10.0 * np.log10((direct + _EPS) / (reverberant + _EPS)),
        decay_rate(h, fs),
        kurtosis(h),
        float((t * energy).sum() / energy.sum()),
    ]
    vec = np.array(out, dtype=np.float64)
    if not np.all(np.isfinite(vec)):
        bad = [FEATURE_NAMES[i] for i in np.flatnonzero(~np.isfinite(vec))]
        raise FeatureError(f"non-finite features: {bad}")
    return vec
