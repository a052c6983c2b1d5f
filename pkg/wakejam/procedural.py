#  Copyright (c) 2020 Robert Lieck
"""
Procedurally generated stand-ins for recorded audio: keyword-like and negative voiced utterances and colored-noise
backgrounds.
"""
import numpy as np

from .audio import AudioClip
from .corpus import Utterance
from .util import __SAMPLE_RATE__, InvariantError

# spectral exponent of colored noise: power ~ 1 / f^exponent
NOISE_COLORS = {"white": 0.0, "pink": 1.0, "brown": 2.0}


def voiced(contour, sample_rate, rng, harmonics=5, noise=0.01):
    """Harmonic tone following the f0 `contour` (Hz per sample) under a Hann envelope."""
    phase = 2 * np.pi * np.cumsum(contour) / sample_rate
    y = sum(np.sin(k * phase) / k for k in range(1, harmonics + 1))
    y = y * np.hanning(len(contour))
    y = y + noise * rng.standard_normal(len(y))
    return 0.5 * y / np.max(np.abs(y))


def keyword_utterance(rng, sample_rate=__SAMPLE_RATE__, duration=(0.6, 0.9)):
    """Rise-and-fall pitch contour around a random f0 in [180, 260] Hz."""
    n = int(rng.uniform(*duration) * sample_rate)
    t = np.linspace(0, 1, n)
    f0 = rng.uniform(180, 260)
    return AudioClip(voiced(f0 * (1 + 0.5 * np.sin(np.pi * t)), sample_rate, rng), sample_rate)


def negative_utterance(rng, sample_rate=__SAMPLE_RATE__, duration=(0.4, 1.2)):
    """Falling or flat-with-vibrato contours that never rise like a keyword."""
    n = int(rng.uniform(*duration) * sample_rate)
    t = np.linspace(0, 1, n)
    f0 = rng.uniform(100, 300)
    if rng.random() < 0.5:
        contour = f0 * (1.4 - 0.6 * t)
    else:
        contour = f0 * (1 + 0.03 * np.sin(2 * np.pi * rng.uniform(4, 7) * t * n / sample_rate))
    return AudioClip(voiced(contour, sample_rate, rng, harmonics=int(rng.integers(2, 8))), sample_rate)


def colored_noise(n_samples, rng, color="pink", level_db=-35.0, sample_rate=__SAMPLE_RATE__):
    """Gaussian noise with a 1/f^exponent power spectrum at an RMS level of `level_db` dBFS."""
    if color not in NOISE_COLORS:
        raise InvariantError(f"Unknown noise color '{color}', expected one of {sorted(NOISE_COLORS)}")
    spectrum = np.fft.rfft(rng.standard_normal(n_samples))
    freqs = np.fft.rfftfreq(n_samples)
    freqs[0] = freqs[1] if n_samples > 1 else 1.0
    spectrum = spectrum / freqs ** (NOISE_COLORS[color] / 2)
    y = np.fft.irfft(spectrum, n=n_samples)
    y = y / np.sqrt(np.mean(y ** 2)) * 10 ** (level_db / 20)
    return AudioClip(y, sample_rate)


def generate_sources(n_keywords=8, n_negatives=8, n_backgrounds=4, seed=0, sample_rate=__SAMPLE_RATE__,
                     background_seconds=30.0, color="pink", level_db=-35.0):
    """
    Raw utterances for a fully synthetic corpus.
    :return: dict with lists of Utterances under 'keyword', 'negative' and 'background'
    """
    rng = np.random.default_rng(seed)
    n_background = int(background_seconds * sample_rate)
    return dict(
        keyword=[Utterance(f"kw-{i:03d}", keyword_utterance(rng, sample_rate)) for i in range(n_keywords)],
        negative=[Utterance(f"neg-{i:03d}", negative_utterance(rng, sample_rate)) for i in range(n_negatives)],
        background=[Utterance(f"bg-{i:03d}", colored_noise(n_background, rng, color, level_db, sample_rate))
                    for i in range(n_backgrounds)],
    )
