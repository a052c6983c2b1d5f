#  Copyright (c) 2020 Robert Lieck
"""
Frequency-masking threshold of clean audio and the masking penalty of a perturbation.

The threshold follows a simplified MPEG-1 psychoacoustic model: tonal maskers at local spectral maxima above the
absolute threshold of hearing, spread over the Bark scale with a two-slope spreading function (+27 dB/Bark below the
masker, -12 dB/Bark above it) and summed in power together with the absolute threshold.
All levels live on the normalized scale where the loudest bin of a frame sits at 92 dB.
"""
from dataclasses import dataclass

import numpy as np
import pandas as pd
import torch

from .audio import FrameSpec, PsdFrame, frame_signal, psd_tensor, as_tensor, DTYPE
from .util import __SAMPLE_RATE__, InvariantError

# full-scale level of the normalized PSD
REFERENCE_DB = 92.0

# spreading slopes in dB per Bark
SLOPE_BELOW = 27.0
SLOPE_ABOVE = -12.0

# maskers closer than this (in Bark) are merged, keeping the louder one
MASKER_MERGE_BARK = 0.5

# the absolute threshold is evaluated no lower than this frequency (it diverges at DC)
MIN_ATH_FREQ = 20.0


@dataclass(frozen=True, eq=False)
class MaskingThreshold:
    threshold: np.ndarray
    max_psd: np.ndarray
    spec: FrameSpec

    @property
    def shape(self):
        return self.threshold.shape

    def to_frame(self):
        """frame x bin matrix as a DataFrame (one row per frame)."""
        threshold = self.threshold.reshape(-1, self.threshold.shape[-1])
        return pd.DataFrame(threshold, columns=[f"bin_{k}" for k in range(threshold.shape[1])])

    def to_csv(self, path):
        self.to_frame().to_csv(path, index_label="frame")


@dataclass(frozen=True)
class MaskingLossTerms:
    normalized_psd: torch.Tensor
    per_frame: torch.Tensor
    loss: torch.Tensor


###############
# psychoacoustic scales
###############

def bark(freqs):
    freqs = np.asarray(freqs, dtype=np.float64)
    return 13 * np.arctan(0.00076 * freqs) + 3.5 * np.arctan((freqs / 7500.0) ** 2)


def absolute_threshold(freqs):
    """Absolute threshold of hearing in dB on the normalized scale."""
    khz = np.maximum(np.asarray(freqs, dtype=np.float64), MIN_ATH_FREQ) / 1000.0
    return 3.64 * khz ** -0.8 - 6.5 * np.exp(-0.6 * (khz - 3.3) ** 2) + 0.001 * khz ** 4 - 12


def bin_frequencies(n, sample_rate=__SAMPLE_RATE__):
    return np.fft.rfftfreq(n, d=1.0 / sample_rate)


def tonal_maskers(psd_frame, barks, ath):
    """
    Pick maskers of one frame.
    :return: array of (bark, level dB, bin) rows, sorted by frequency
    """
    inner = np.arange(1, len(psd_frame) - 1)
    is_peak = (psd_frame[inner] > psd_frame[inner - 1]) & (psd_frame[inner] > psd_frame[inner + 1])
    idx = inner[is_peak & (psd_frame[inner] > ath[inner])]
    if len(idx) == 0:
        return np.zeros((0, 3))
    power = 10 ** (psd_frame / 10.0)
    level = 10 * np.log10(power[idx - 1] + power[idx] + power[idx + 1])
    maskers = [[barks[idx[0]], level[0], idx[0]]]
    for i in range(1, len(idx)):
        if barks[idx[i]] - maskers[-1][0] < MASKER_MERGE_BARK:
            if level[i] > maskers[-1][1]:
                maskers[-1] = [barks[idx[i]], level[i], idx[i]]
        else:
            maskers.append([barks[idx[i]], level[i], idx[i]])
    return np.array(maskers)


def frame_threshold(psd_frame, barks, ath):
    """Global masking threshold of one normalized PSD frame."""
    total = 10 ** (ath / 10.0)
    for z, level, _ in tonal_maskers(psd_frame, barks, ath):
        dz = barks - z
        spread = np.where(dz < 0, SLOPE_BELOW * dz, SLOPE_ABOVE * dz)
        total = total + 10 ** ((level - 6.025 - 0.275 * z + spread) / 10.0)
    return 10 * np.log10(total)


###########
# operations
###########

def masking_threshold(x, spec=FrameSpec(), sample_rate=None):
    """
    Per-frame, per-bin masking threshold of clean audio.
    :param x: AudioClip, array or tensor; leading batch dimensions are kept
    :param spec: frame geometry (window size N, hop, window)
    :return: MaskingThreshold with threshold of shape (..., frames, N//2 + 1)
    """
    if sample_rate is None:
        sample_rate = getattr(x, "sample_rate", __SAMPLE_RATE__)
    with torch.no_grad():
        p_x = psd_tensor(frame_signal(as_tensor(x).detach(), spec), spec.window_size).numpy()
    max_psd = p_x.max(axis=-1)
    normalized = REFERENCE_DB - max_psd[..., None] + p_x
    freqs = bin_frequencies(spec.window_size, sample_rate)
    barks = bark(freqs)
    ath = absolute_threshold(freqs)
    flat = normalized.reshape(-1, normalized.shape[-1])
    threshold = np.stack([frame_threshold(frame, barks, ath) for frame in flat]).reshape(normalized.shape)
    return MaskingThreshold(threshold=threshold, max_psd=max_psd, spec=spec)


def normalized_perturbation_psd(p_x, p_delta):
    """
    92 - max_k p_x(k) + p_delta(k), with the maximum taken per frame.
    :param p_x: PsdFrame or array/tensor (..., bins) of the clean audio
    :param p_delta: PsdFrame or array/tensor of the perturbation, same shape
    """
    if isinstance(p_x, PsdFrame):
        p_x = p_x.bins
    if isinstance(p_delta, PsdFrame):
        p_delta = p_delta.bins
    p_x = torch.as_tensor(p_x, dtype=DTYPE)
    p_delta = torch.as_tensor(p_delta, dtype=DTYPE)
    if p_x.shape != p_delta.shape:
        raise InvariantError(f"PSD shapes differ: {tuple(p_x.shape)} vs {tuple(p_delta.shape)}")
    return REFERENCE_DB - p_x.max(dim=-1, keepdim=True).values + p_delta


def masking_penalty(normalized_psd, threshold):
    """Hinge max(p - eta, 0) averaged over the N//2 + 1 bins of each frame; returns (per-frame, mean over frames)."""
    threshold = torch.as_tensor(threshold, dtype=DTYPE)
    if normalized_psd.shape != threshold.shape:
        raise InvariantError(f"PSD shape {tuple(normalized_psd.shape)} does not match "
                             f"threshold shape {tuple(threshold.shape)}")
    per_frame = torch.relu(normalized_psd - threshold).mean(dim=-1)
    return per_frame, per_frame.mean()


def masking_terms(x, delta, spec=FrameSpec(), threshold=None):
    """All terms of the masking penalty; gradients flow to `delta`."""
    x = as_tensor(x)
    delta = as_tensor(delta)
    if x.shape[-1] != delta.shape[-1]:
        raise InvariantError(f"Clean audio ({x.shape[-1]} samples) and perturbation ({delta.shape[-1]} samples) "
                             f"differ in length")
    if threshold is None:
        threshold = masking_threshold(x, spec)
    p_delta = psd_tensor(frame_signal(delta, spec), spec.window_size)
    normalized = REFERENCE_DB - torch.as_tensor(threshold.max_psd, dtype=DTYPE)[..., None] + p_delta
    per_frame, loss = masking_penalty(normalized.expand(threshold.threshold.shape), threshold.threshold)
    return MaskingLossTerms(normalized_psd=normalized, per_frame=per_frame, loss=loss)


def masking_loss(x, delta, spec=FrameSpec(), threshold=None):
    """Scalar masking penalty L_eta(x, delta)."""
    return masking_terms(x, delta, spec, threshold).loss
