#  Copyright (c) 2020 Robert Lieck
"""Shoebox room impulse responses by the image source method, and the room distribution sampled per attack step."""
import itertools
import math
from dataclasses import dataclass, replace
from warnings import warn

import numpy as np
import pandas as pd
import torch

from .audio import AudioClip, as_tensor, DTYPE
from .util import __SAMPLE_RATE__, __SPEED_OF_SOUND__, InvariantError, GeometryError, ConfigError

# walls in the order x=0, x=Lx, y=0, y=Ly, z=0, z=Lz
WALLS = ("x0", "x1", "y0", "y1", "z0", "z1")

MAX_ORDER_LIMIT = 10


@dataclass(frozen=True)
class RoomConfig:
    dims: tuple
    source: tuple
    mic: tuple
    absorption: tuple = (0.5,) * 6
    max_order: int = 6
    c: float = __SPEED_OF_SOUND__
    fs: int = __SAMPLE_RATE__

    def __post_init__(self):
        dims = tuple(float(v) for v in self.dims)
        source = tuple(float(v) for v in self.source)
        mic = tuple(float(v) for v in self.mic)
        absorption = self.absorption
        if np.isscalar(absorption):
            absorption = (absorption,) * 6
        absorption = tuple(float(a) for a in absorption)
        if len(dims) != 3 or len(source) != 3 or len(mic) != 3 or len(absorption) != 6:
            raise InvariantError("A room needs 3 dimensions, 3D source and mic positions and 6 wall absorptions")
        for name, pos in (("source", source), ("mic", mic)):
            if not all(0 < p < d for p, d in zip(pos, dims)):
                raise InvariantError(f"The {name} {pos} is not strictly inside the room {dims}")
        if not all(0 < a <= 1 for a in absorption):
            raise InvariantError(f"Absorption coefficients must lie in (0, 1], got {absorption}")
        if not 0 <= self.max_order <= MAX_ORDER_LIMIT:
            raise InvariantError(f"Image order must lie in [0, {MAX_ORDER_LIMIT}], got {self.max_order}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "source", source)
        object.__setattr__(self, "mic", mic)
        object.__setattr__(self, "absorption", absorption)

    @property
    def distance(self):
        return float(np.linalg.norm(np.subtract(self.source, self.mic)))

    @property
    def direct_index(self):
        return int(round(self.fs * self.distance / self.c))

    def to_dict(self):
        d = dict(zip(("lx", "ly", "lz"), self.dims))
        d.update(zip(("src_x", "src_y", "src_z"), self.source))
        d.update(zip(("mic_x", "mic_y", "mic_z"), self.mic))
        d.update({f"absorption_{w}": a for w, a in zip(WALLS, self.absorption)})
        d.update(max_order=self.max_order, c=self.c, fs=self.fs, distance=self.distance,
                 direct_index=self.direct_index)
        return d


@dataclass(frozen=True, eq=False)
class ImpulseResponse:
    taps: np.ndarray
    fs: int = __SAMPLE_RATE__

    def __len__(self):
        return len(self.taps)

    def tensor(self):
        return torch.as_tensor(self.taps, dtype=DTYPE)

    def clip(self):
        return AudioClip(self.taps, self.fs)


@dataclass(frozen=True)
class RoomDistribution:
    """
    Uniform ranges (min, max) of room geometry; either `rt60` or `absorption` sets the walls.
    Source and microphone are drawn `margin` away from the walls unless `source` / `mic` give per-axis ranges.
    """
    lx: tuple = (3.0, 6.0)
    ly: tuple = (3.0, 6.0)
    lz: tuple = (2.5, 3.0)
    margin: float = 0.5
    source: tuple = None
    mic: tuple = None
    rt60: tuple = (0.2, 0.6)
    absorption: tuple = None
    max_order: int = 6
    count: int = 8
    seed: int = 0
    c: float = __SPEED_OF_SOUND__
    fs: int = __SAMPLE_RATE__


#########
# helpers
#########

def sabine_absorption(rt60, dims, c=__SPEED_OF_SOUND__):
    """Uniform wall absorption that gives reverberation time `rt60` by Sabine's formula, clamped into (0, 1]."""
    lx, ly, lz = dims
    volume = lx * ly * lz
    surface = 2 * (lx * ly + lx * lz + ly * lz)
    absorption = 24 * math.log(10) * volume / (c * surface * rt60)
    if absorption > 1:
        warn(f"RT60 of {rt60}s is too short for a {dims} room (absorption {absorption:.3f}); clamped to 1",
             RuntimeWarning)
        absorption = 1.0
    return absorption


def image_sources(cfg):
    """
    Image positions and reflection counts up to `cfg.max_order`.
    :return: positions (n, 3) and wall hit counts (n, 6) in WALLS order
    """
    order = cfg.max_order
    dims = np.array(cfg.dims)
    source = np.array(cfg.source)
    r = np.array(list(itertools.product(range(-order, order + 1), repeat=3)))
    p = np.array(list(itertools.product((0, 1), repeat=3)))
    r = np.repeat(r, len(p), axis=0)
    p = np.tile(p, (len(r) // len(p), 1))
    # coordinate (1 - 2p) s + 2 r L hits the wall at 0 |r - p| times and the wall at L |r| times
    hits_low = np.abs(r - p)
    hits_high = np.abs(r)
    keep = (hits_low + hits_high).sum(axis=1) <= order
    positions = ((1 - 2 * p) * source + 2 * r * dims)[keep]
    hits = np.stack([hits_low[:, 0], hits_high[:, 0],
                     hits_low[:, 1], hits_high[:, 1],
                     hits_low[:, 2], hits_high[:, 2]], axis=1)[keep]
    return positions, hits


############
# operations
############

def image_source_rir(cfg):
    """Impulse response: every image contributes (1 - absorption)^hits / (4 pi d) at sample round(d / c * fs)."""
    positions, hits = image_sources(cfg)
    distances = np.linalg.norm(positions - np.array(cfg.mic), axis=1)
    if np.any(distances == 0):
        raise GeometryError(f"Microphone {cfg.mic} coincides with an image source")
    reflection = 1 - np.array(cfg.absorption)
    amplitudes = np.prod(reflection[None, :] ** hits, axis=1) / (4 * math.pi * distances)
    delays = np.round(distances / cfg.c * cfg.fs).astype(int)
    taps = np.zeros(delays.max() + 1)
    np.add.at(taps, delays, amplitudes)
    return ImpulseResponse(taps, cfg.fs)


def convolve(x, r):
    """Full linear convolution along the last axis (differentiable in both arguments)."""
    x = as_tensor(x)
    r = as_tensor(r)
    n = x.shape[-1] + r.shape[-1] - 1
    size = 1 << (n - 1).bit_length()
    y = torch.fft.irfft(torch.fft.rfft(x, n=size) * torch.fft.rfft(r, n=size), n=size)
    return y[..., :n]


def apply_rir(x, r):
    """
    Room transform t(x) = x * r.
    :param x: AudioClip or tensor (gradients flow through tensors)
    :param r: ImpulseResponse
    :return: AudioClip (for clips) or tensor of length len(x) + len(r) - 1
    """
    if isinstance(x, AudioClip):
        if x.sample_rate != r.fs:
            raise InvariantError(f"Signal rate {x.sample_rate} Hz and impulse response rate {r.fs} Hz differ")
        with torch.no_grad():
            return AudioClip(convolve(x.tensor(), r.tensor()).numpy(), x.sample_rate)
    return convolve(x, r.tensor())


def sample_rooms(dist):
    """Draw `dist.count` room configurations uniformly from the distribution's ranges."""
    rng = np.random.default_rng(dist.seed)
    for name in ("lx", "ly", "lz"):
        lo, hi = getattr(dist, name)
        if lo > hi or lo <= 2 * dist.margin:
            raise ConfigError(f"Range {name}={getattr(dist, name)} cannot hold a source and microphone "
                              f"{dist.margin} m away from the walls")
    if dist.absorption is None and dist.rt60 is None:
        raise ConfigError("A room distribution needs either an rt60 or an absorption range")
    rooms = []
    for _ in range(dist.count):
        dims = tuple(rng.uniform(*getattr(dist, name)) for name in ("lx", "ly", "lz"))
        source = random_position(dims, dist.margin, rng, dist.source)
        mic = random_position(dims, dist.margin, rng, dist.mic)
        if dist.absorption is not None:
            absorption = rng.uniform(*dist.absorption)
        else:
            absorption = sabine_absorption(rng.uniform(*dist.rt60), dims, dist.c)
        try:
            rooms.append(RoomConfig(dims=dims, source=source, mic=mic, absorption=absorption,
                                    max_order=dist.max_order, c=dist.c, fs=dist.fs))
        except InvariantError as e:
            raise ConfigError(f"Room distribution produced an invalid room: {e}")
    return rooms


def random_position(dims, margin, rng, ranges=None):
    if ranges is None:
        ranges = [(margin, d - margin) for d in dims]
    return tuple(rng.uniform(lo, hi) for lo, hi in ranges)


def resample_source(cfg, rng, margin=0.5):
    """Same room and microphone, new source position (the adversary's path in the split-path variant)."""
    return replace(cfg, source=random_position(cfg.dims, margin, rng))


def rooms_to_frame(rooms):
    return pd.DataFrame([room.to_dict() for room in rooms])
