#  Copyright (c) 2020 Robert Lieck
"""
Differentiable Karplus-Strong synthesis of plucked-string note sequences.

A note is rendered by exciting a delay line of D = floor(fs / fr) samples with Gaussian noise and feeding it back as

    y[n] = c * (omega * y[n - D] + (1 - omega) * y[n - D - 1]),    c = loop_gain * gamma (* v_output)

Frequencies and volumes are differentiable (through gamma, omega and the volume factor); the integer delay D is
held fixed while differentiating. Durations never change.
"""
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .audio import AudioClip, DTYPE, vol_to_amplitude
from .diff import clip
from .util import __SAMPLE_RATE__, __MIN_FREQ__, __MAX_FREQ__, __MIN_VOL__, __MAX_VOL__, \
    BoundsError, InvariantError, NoteTooShortError, NumericError

# omega stays inside the open interval (0, 1)
OMEGA_MIN = 1e-3
OMEGA_MAX = 1 - 1e-3

# the recursion stops once loop_gain^k falls below this fraction of the excitation
TAIL_TOLERANCE = 1e-15

VOLUME_MODES = ("output", "recursive")


###########
# the notes
###########

@dataclass(frozen=True)
class Note:
    freq: float
    dur: int
    vol: float

    def __post_init__(self):
        object.__setattr__(self, "freq", float(self.freq))
        object.__setattr__(self, "dur", int(self.dur))
        object.__setattr__(self, "vol", float(self.vol))
        if self.dur <= 0:
            raise InvariantError(f"Note duration must be positive, got {self.dur}")

    def check_bounds(self):
        if not __MIN_FREQ__ <= self.freq <= __MAX_FREQ__:
            raise BoundsError(f"Frequency {self.freq} Hz outside [{__MIN_FREQ__}, {__MAX_FREQ__}]")
        if not __MIN_VOL__ <= self.vol <= __MAX_VOL__:
            raise BoundsError(f"Volume {self.vol} dB outside [{__MIN_VOL__}, {__MAX_VOL__}]")
        return self


@dataclass(frozen=True)
class KSNoteState:
    delay: int
    omega: float
    gamma: float
    p_v: float
    v_output: float
    beta: float
    n_periods: float
    seed: int


@dataclass(frozen=True)
class SynthParams:
    """A sequence of notes; frequencies and volumes are the trainable part, durations are fixed."""
    notes: tuple
    bpm: float = 120.0
    sample_rate: int = __SAMPLE_RATE__
    seeds: tuple = ()
    beta: float = 1.0
    loop_gain: float = 0.5
    volume_mode: str = "output"

    def __post_init__(self):
        notes = tuple(self.notes)
        if not notes:
            raise InvariantError("A note sequence needs at least one note")
        for note in notes:
            note.check_bounds()
        seeds = tuple(int(s) for s in self.seeds) if self.seeds else tuple(range(len(notes)))
        if len(seeds) != len(notes):
            raise InvariantError(f"Got {len(seeds)} seeds for {len(notes)} notes")
        if self.volume_mode not in VOLUME_MODES:
            raise InvariantError(f"Unknown volume mode '{self.volume_mode}', expected one of {VOLUME_MODES}")
        object.__setattr__(self, "notes", notes)
        object.__setattr__(self, "seeds", seeds)

    def __len__(self):
        return len(self.notes)

    @property
    def freqs(self):
        return np.array([n.freq for n in self.notes])

    @property
    def vols(self):
        return np.array([n.vol for n in self.notes])

    @property
    def durations(self):
        return tuple(n.dur for n in self.notes)

    @property
    def length(self):
        return sum(self.durations)

    def with_values(self, freqs=None, vols=None):
        """Same sequence with new frequencies and/or volumes (durations and seeds untouched)."""
        freqs = self.freqs if freqs is None else np.asarray(freqs, dtype=np.float64)
        vols = self.vols if vols is None else np.asarray(vols, dtype=np.float64)
        notes = tuple(Note(f, n.dur, v) for f, v, n in zip(freqs, vols, self.notes))
        return replace(self, notes=notes)

    def delays(self):
        return tuple(int(math.floor(self.sample_rate / n.freq)) for n in self.notes)

    # the portable attack artifact

    def to_dict(self):
        return dict(notes=[dict(freq_hz=n.freq, dur_samples=n.dur, vol_db=n.vol) for n in self.notes],
                    bpm=self.bpm,
                    fs=self.sample_rate,
                    seeds=list(self.seeds),
                    beta=self.beta,
                    loop_gain=self.loop_gain,
                    volume_mode=self.volume_mode)

    @classmethod
    def from_dict(cls, d):
        notes = tuple(Note(n["freq_hz"], n["dur_samples"], n["vol_db"]) for n in d["notes"])
        return cls(notes=notes,
                   bpm=d.get("bpm", 120.0),
                   sample_rate=d.get("fs", __SAMPLE_RATE__),
                   seeds=tuple(d.get("seeds", ())),
                   beta=d.get("beta", 1.0),
                   loop_gain=d.get("loop_gain", 0.5),
                   volume_mode=d.get("volume_mode", "output"))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_midi(self, path):
        """Write the sequence as a one-track MIDI file on the nearest piano keys (velocity from volume)."""
        import mido
        ticks_per_beat = 480
        mid = mido.MidiFile(ticks_per_beat=ticks_per_beat)
        track = mido.MidiTrack()
        mid.tracks.append(track)
        track.append(mido.MetaMessage("set_tempo", tempo=mido.bpm2tempo(self.bpm)))
        samples_per_tick = 60.0 / self.bpm * self.sample_rate / ticks_per_beat
        for note in self.notes:
            key = midi_number(note.freq)
            velocity = int(round(127 * note.vol / __MAX_VOL__))
            track.append(mido.Message("note_on", note=key, velocity=velocity, time=0))
            track.append(mido.Message("note_off", note=key, velocity=0,
                                      time=int(round(note.dur / samples_per_tick))))
        mid.save(str(path))


#################
# the 88 key grid
#################

def midi_number(freq):
    """Nearest MIDI note number of a frequency (A4 = 440 Hz = 69)."""
    return int(round(69 + 12 * math.log2(freq / 440.0)))


def snap_to_keys(freqs):
    """Project frequencies onto the equal-tempered 88-key grid (A0 = 27.5 Hz to C8 = 4186 Hz)."""
    freqs = np.asarray(freqs, dtype=np.float64)
    keys = np.clip(np.round(69 + 12 * np.log2(freqs / 440.0)), 21, 108)
    return np.clip(440.0 * 2 ** ((keys - 69) / 12), __MIN_FREQ__, __MAX_FREQ__)


def describe_notes(params):
    """Human-readable pitch names, e.g. ['A4', 'C#5']."""
    from music21 import pitch
    return [pitch.Pitch(midi=midi_number(n.freq)).nameWithOctave for n in params.notes]


def beat_durations(n_notes, bpm, sample_rate=__SAMPLE_RATE__, beats=0.5):
    """Fixed note durations in samples for `n_notes` notes of `beats` beats each at `bpm`."""
    return [int(round(60.0 / bpm * beats * sample_rate))] * n_notes


def random_params(n_notes, rng, bpm=120.0, sample_rate=__SAMPLE_RATE__, beats=0.5, vol=None, **kwargs):
    """Uniformly random feasible sequence; `vol` fixes all volumes, otherwise they are drawn too."""
    freqs = rng.uniform(__MIN_FREQ__, __MAX_FREQ__, size=n_notes)
    vols = np.full(n_notes, vol, dtype=np.float64) if vol is not None else rng.uniform(__MIN_VOL__, __MAX_VOL__,
                                                                                        size=n_notes)
    seeds = rng.integers(0, 2 ** 31 - 1, size=n_notes)
    durations = beat_durations(n_notes, bpm, sample_rate, beats)
    return SynthParams(notes=tuple(Note(f, d, v) for f, d, v in zip(freqs, durations, vols)),
                       bpm=bpm, sample_rate=sample_rate, seeds=tuple(int(s) for s in seeds), **kwargs)


###################
# note coefficients
###################

def ks_coefficients(freq, vol, dur, sample_rate, delay=None):
    """
    Differentiable per-note quantities.
    :param freq: frequency tensor (Hz)
    :param vol: volume tensor (dB)
    :param dur: duration in samples
    :param sample_rate: sampling rate in Hz
    :param delay: integer delay to hold fixed; derived from `freq` if None
    :return: dict with delay (int) and tensors omega, gamma, p_v, v_output, n_periods
    """
    ratio = sample_rate / freq
    if delay is None:
        delay = int(math.floor(float(ratio)))
    omega = clip(ratio - delay, OMEGA_MIN, OMEGA_MAX)
    n_periods = dur * freq / sample_rate
    log_f = torch.log(freq)
    gamma = clip((4 / log_f) ** (1 / n_periods), hi=1.0)
    p_v = 1 + 0.8 * (log_f - 3) / 5.5 * torch.cos(math.pi / 5.3 * (log_f - 3))
    v_output = p_v * vol_to_amplitude(vol)
    return dict(delay=delay, omega=omega, gamma=gamma, p_v=p_v, v_output=v_output, n_periods=n_periods)


def derive_state(note, sample_rate=__SAMPLE_RATE__, beta=1.0, seed=0, check_bounds=True):
    if check_bounds:
        note.check_bounds()
    c = ks_coefficients(torch.tensor(note.freq, dtype=DTYPE), torch.tensor(note.vol, dtype=DTYPE),
                        note.dur, sample_rate)
    if c["delay"] < 2:
        raise InvariantError(f"Delay {c['delay']} of {note.freq} Hz at {sample_rate} Hz is below 2 samples")
    return KSNoteState(delay=c["delay"],
                       omega=float(c["omega"]),
                       gamma=float(c["gamma"]),
                       p_v=float(c["p_v"]),
                       v_output=float(c["v_output"]),
                       beta=float(beta),
                       n_periods=float(c["n_periods"]),
                       seed=int(seed))


def excitation_noise(delay, beta, seed):
    return np.random.default_rng(seed).normal(0.0, math.sqrt(beta), size=delay)


def pluck_init(state):
    """The random initial displacement: `delay` samples of N(0, beta), fixed by the state's seed."""
    return excitation_noise(state.delay, state.beta, state.seed)


###########
# rendering
###########

def karplus_strong(excitation, delay, omega, gamma, v_output, dur, loop_gain=0.5, volume_mode="output"):
    """
    Run the plucked-string recursion for `dur` samples, one delay period per step.
    :param excitation: tensor of `delay` samples
    :return: tensor of `dur` samples
    """
    if dur <= delay:
        raise NoteTooShortError(f"Note of {dur} samples is not longer than its delay ({delay})")
    if volume_mode == "recursive":
        coef = loop_gain * gamma * v_output
        prev = excitation * v_output
    else:
        coef = loop_gain * gamma
        prev = excitation
    decay = abs(float(coef))
    blocks = [prev]
    produced = delay
    tail = torch.zeros(1, dtype=DTYPE)
    k = 1
    while produced < dur and decay ** k >= TAIL_TOLERANCE:
        shifted = torch.cat([tail, prev[:-1]])
        block = coef * (omega * prev + (1 - omega) * shifted)
        tail = prev[-1:]
        prev = block
        n = min(delay, dur - produced)
        blocks.append(block[:n])
        produced += n
        k += 1
    y = torch.cat(blocks)
    if produced < dur:
        y = torch.cat([y, torch.zeros(dur - produced, dtype=DTYPE)])
    if volume_mode == "output":
        y = y * v_output
    return y


def render_note(note, state, loop_gain=0.5, volume_mode="output"):
    excitation = torch.as_tensor(pluck_init(state), dtype=DTYPE)
    y = karplus_strong(excitation, state.delay,
                       torch.tensor(state.omega, dtype=DTYPE),
                       torch.tensor(state.gamma, dtype=DTYPE),
                       torch.tensor(state.v_output, dtype=DTYPE),
                       note.dur, loop_gain=loop_gain, volume_mode=volume_mode)
    return AudioClip(y.numpy())


def tile(y, length):
    """Loop a sequence to exactly `length` samples."""
    reps = -(-length // y.shape[-1])
    return y.repeat(reps)[:length]


def render_sequence_tensor(params, freqs=None, vols=None, target_length=None, delays=None, seed_offset=0):
    """
    Differentiable rendering of a note sequence.
    :param params: SynthParams (durations, seeds and synthesis options)
    :param freqs: frequency tensor (defaults to the params' values)
    :param vols: volume tensor (defaults to the params' values)
    :param target_length: loop the sequence to this many samples
    :param delays: integer delays to hold fixed (default: derived from the current frequencies)
    :param seed_offset: added to every note seed; nonzero values draw fresh excitations
    :return: 1-D tensor
    """
    if freqs is None:
        freqs = torch.tensor(params.freqs, dtype=DTYPE)
    if vols is None:
        vols = torch.tensor(params.vols, dtype=DTYPE)
    if delays is None:
        delays = params.delays()
    out = []
    for i, note in enumerate(params.notes):
        c = ks_coefficients(freqs[i], vols[i], note.dur, params.sample_rate, delay=delays[i])
        excitation = torch.as_tensor(excitation_noise(c["delay"], params.beta, params.seeds[i] + seed_offset),
                                     dtype=DTYPE)
        out.append(karplus_strong(excitation, c["delay"], c["omega"], c["gamma"], c["v_output"], note.dur,
                                  loop_gain=params.loop_gain, volume_mode=params.volume_mode))
    y = torch.cat(out)
    if target_length is not None:
        y = tile(y, target_length)
    return y


def render_sequence(params, target_length=None):
    """Render a note sequence back to back (the adversarial waveform), optionally looped to `target_length`."""
    with torch.no_grad():
        y = render_sequence_tensor(params, target_length=target_length)
    return AudioClip(y.numpy(), params.sample_rate)


##########
# backward
##########

@dataclass
class GradTape:
    freqs: torch.Tensor
    vols: torch.Tensor
    output: torch.Tensor
    delays: tuple
    durations: tuple = field(default_factory=tuple)


def forward(params, target_length=None, seed_offset=0):
    """Render with gradient recording; returns the waveform tensor and the tape to differentiate it."""
    freqs = torch.tensor(params.freqs, dtype=DTYPE, requires_grad=True)
    vols = torch.tensor(params.vols, dtype=DTYPE, requires_grad=True)
    delays = params.delays()
    y = render_sequence_tensor(params, freqs, vols, target_length=target_length, delays=delays,
                               seed_offset=seed_offset)
    return y, GradTape(freqs=freqs, vols=vols, output=y, delays=delays, durations=params.durations)


def backward(params, tape, upstream):
    """
    Chain an upstream gradient (d loss / d output samples) back to the notes.
    :return: (d loss / d freq, d loss / d vol) as arrays of length L
    """
    if tape.durations != params.durations or tape.delays != params.delays():
        raise InvariantError("Gradient tape was recorded for different synthesis parameters")
    upstream = torch.as_tensor(upstream, dtype=DTYPE)
    if upstream.shape != tape.output.shape:
        raise InvariantError(f"Upstream gradient shape {tuple(upstream.shape)} does not match "
                             f"output shape {tuple(tape.output.shape)}")
    d_freq, d_vol = torch.autograd.grad(tape.output, [tape.freqs, tape.vols], grad_outputs=upstream,
                                        retain_graph=True, allow_unused=True)
    d_freq = np.zeros(len(params)) if d_freq is None else d_freq.numpy()
    d_vol = np.zeros(len(params)) if d_vol is None else d_vol.numpy()
    if not (np.all(np.isfinite(d_freq)) and np.all(np.isfinite(d_vol))):
        raise NumericError("Non-finite synthesizer gradient")
    return d_freq, d_vol
