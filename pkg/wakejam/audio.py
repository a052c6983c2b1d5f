#  Copyright (c) 2020 Robert Lieck
"""Audio container, WAV I/O, mixing, framing and power spectral density."""
from dataclasses import dataclass
from math import gcd
from pathlib import Path

import numpy as np
import soundfile
import torch
from scipy.signal import resample_poly

from .util import __SAMPLE_RATE__, __DB_FLOOR__, __MIN_VOL__, __MAX_VOL__, \
    AudioFormatError, AudioIOError, UnsupportedAudioError, InvariantError, EmptyOutputError, NumericError, \
    BoundsError

# every differentiable path runs in double precision
DTYPE = torch.float64

# integer and float PCM codecs read_wav accepts
SUPPORTED_SUBTYPES = {"PCM_U8", "PCM_S8", "PCM_16", "PCM_24", "PCM_32", "FLOAT"}
SUPPORTED_FORMATS = {"WAV", "WAVEX"}

WINDOWS = ("rect", "hann")


##############
# domain types
##############

@dataclass(frozen=True, eq=False)
class AudioClip:
    """Mono samples in full scale [-1, 1] (not enforced before export) at `sample_rate` Hz."""
    samples: np.ndarray
    sample_rate: int = __SAMPLE_RATE__

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(samples)):
            raise NumericError("AudioClip samples must be finite")
        if int(self.sample_rate) <= 0:
            raise InvariantError(f"Sample rate must be positive, got {self.sample_rate}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return len(self.samples)

    def __repr__(self):
        return f"{self.__class__.__name__}({len(self)} samples, {self.sample_rate} Hz)"

    @property
    def duration(self):
        return len(self) / self.sample_rate

    @classmethod
    def zeros(cls, length, sample_rate=__SAMPLE_RATE__):
        return cls(np.zeros(int(length)), sample_rate)

    @classmethod
    def from_tensor(cls, tensor, sample_rate=__SAMPLE_RATE__):
        return cls(tensor.detach().cpu().numpy(), sample_rate)

    def tensor(self, requires_grad=False):
        return torch.tensor(self.samples, dtype=DTYPE, requires_grad=requires_grad)

    def rms(self):
        return float(np.sqrt(np.mean(self.samples ** 2))) if len(self) else 0.0


@dataclass(frozen=True)
class FrameSpec:
    window_size: int = 512
    hop: int = 160
    window: str = "hann"

    def __post_init__(self):
        if not 0 < self.hop <= self.window_size:
            raise InvariantError(f"Frame hop must satisfy 0 < hop <= window size "
                                 f"(got hop={self.hop}, window size={self.window_size})")
        if self.window not in WINDOWS:
            raise InvariantError(f"Unknown window '{self.window}', expected one of {WINDOWS}")

    @property
    def n_bins(self):
        return self.window_size // 2 + 1

    def n_frames(self, length):
        """Number of frames `frame_signal` produces for a signal of `length` samples (0 if too short)."""
        if length < self.window_size:
            return 0
        return 1 + (length - self.window_size) // self.hop

    def window_tensor(self):
        if self.window == "hann":
            return torch.hann_window(self.window_size, periodic=True, dtype=DTYPE)
        return torch.ones(self.window_size, dtype=DTYPE)


@dataclass(frozen=True, eq=False)
class PsdFrame:
    bins: np.ndarray
    frame_index: int = 0

    def __len__(self):
        return len(self.bins)


#########
# helpers
#########

def as_tensor(signal):
    """AudioClip, array or tensor -> 1-D double tensor (tensors are passed through to keep their graph)."""
    if isinstance(signal, AudioClip):
        return signal.tensor()
    if isinstance(signal, torch.Tensor):
        return signal.to(DTYPE)
    return torch.as_tensor(np.asarray(signal, dtype=np.float64), dtype=DTYPE)


def resample(samples, rate_from, rate_to):
    """Polyphase resampling between integer rates."""
    if rate_from == rate_to:
        return np.asarray(samples, dtype=np.float64)
    g = gcd(int(rate_from), int(rate_to))
    return resample_poly(np.asarray(samples, dtype=np.float64), int(rate_to) // g, int(rate_from) // g)


#######
# I/O
#######

def read_wav(path, sample_rate=__SAMPLE_RATE__):
    """
    Read a PCM/float WAV file as a mono clip at the working rate.
    :param path: file to read
    :param sample_rate: working rate; files at other rates are resampled (None keeps the file's rate)
    :return: AudioClip with channels averaged and amplitudes scaled to [-1, 1]
    """
    path = Path(path)
    try:
        info = soundfile.info(str(path))
    except RuntimeError as e:
        # soundfile.LibsndfileError derives from RuntimeError
        raise AudioFormatError(f"Could not parse WAV header of '{path}': {e}")
    if info.format not in SUPPORTED_FORMATS or info.subtype not in SUPPORTED_SUBTYPES:
        raise UnsupportedAudioError(f"'{path}' has unsupported format {info.format}/{info.subtype}; "
                                    f"expected WAV with one of {sorted(SUPPORTED_SUBTYPES)}")
    try:
        data, rate = soundfile.read(str(path), dtype="float64", always_2d=True)
    except RuntimeError as e:
        raise AudioFormatError(f"Could not read samples of '{path}': {e}")
    samples = data.mean(axis=1)
    if sample_rate is not None and rate != sample_rate:
        samples = resample(samples, rate, sample_rate)
        rate = sample_rate
    return AudioClip(samples, rate)


def to_pcm16(samples):
    """Full-scale floats -> int16 with 1.0 mapping to 32767 (clipping happens here and only here)."""
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype(np.int16)


def write_wav(clip, path):
    """Write `clip` as 16-bit PCM mono."""
    if len(clip) == 0:
        raise EmptyOutputError("Cannot write an empty clip")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        soundfile.write(str(path), to_pcm16(clip.samples), clip.sample_rate, subtype="PCM_16", format="WAV")
    except (OSError, RuntimeError) as e:
        raise AudioIOError(f"Writing '{path}' failed: {e}")


############
# operations
############

def mix(base, overlay, offset=0, gain=1.0):
    """
    Add `gain * overlay` onto `base` starting at sample `offset`.
    The result has the length of `base`; the overlay is truncated at the end.
    """
    if base.sample_rate != overlay.sample_rate:
        raise InvariantError(f"Cannot mix clips with different rates ({base.sample_rate} vs {overlay.sample_rate})")
    if not 0 <= offset <= len(base):
        raise InvariantError(f"Offset {offset} outside [0, {len(base)}]")
    out = np.array(base.samples)
    if gain != 0:
        n = min(len(overlay), len(base) - offset)
        out[offset:offset + n] += gain * overlay.samples[:n]
    return AudioClip(out, base.sample_rate)


def frame_signal(signal, spec):
    """
    Cut a signal into windowed frames.
    :param signal: AudioClip or 1-D tensor (gradients flow through tensors)
    :param spec: FrameSpec
    :return: tensor of shape (1 + (len - N) // hop, N)
    """
    x = as_tensor(signal)
    if x.shape[-1] < spec.window_size:
        raise EmptyOutputError(f"Signal of {x.shape[-1]} samples is shorter than the window ({spec.window_size})")
    frames = x.unfold(-1, spec.window_size, spec.hop)
    return frames * spec.window_tensor()


def psd_tensor(frames, n):
    """Per-bin power 10*log10(|s(k)/N|^2) of windowed frames (..., N) -> (..., N//2 + 1), floored at -200 dB."""
    spectrum = torch.fft.rfft(frames, n=n, dim=-1) / n
    power = spectrum.real ** 2 + spectrum.imag ** 2
    return 10 * torch.log10(torch.clamp_min(power, 10 ** (__DB_FLOOR__ / 10)))


def psd(frame, n, frame_index=0):
    frame = as_tensor(frame)
    if frame.shape[-1] != n:
        raise InvariantError(f"Frame has {frame.shape[-1]} samples, expected {n}")
    if not torch.all(torch.isfinite(frame)):
        raise NumericError("PSD of a non-finite frame")
    return PsdFrame(psd_tensor(frame, n).detach().numpy(), frame_index)


def vol_to_amplitude(vol):
    """Digital loudness mapping: vol in dB [0, 100] -> peak scale 10^((vol - 100) / 20). Accepts tensors."""
    values = vol.detach().numpy() if isinstance(vol, torch.Tensor) else np.asarray(vol)
    if np.any(values < __MIN_VOL__) or np.any(values > __MAX_VOL__):
        raise BoundsError(f"Volume {vol} outside [{__MIN_VOL__}, {__MAX_VOL__}] dB")
    return 10 ** ((vol - __MAX_VOL__) / 20)
