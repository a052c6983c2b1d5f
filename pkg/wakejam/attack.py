#  Copyright (c) 2020 Robert Lieck
"""
Adversarial music: projected gradient ascent on note frequencies and volumes that maximizes the detector loss in
expectation over rooms while a masking penalty keeps the music below the clean audio's masking threshold.
"""
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
import torch
from torch import nn

from .audio import AudioClip, FrameSpec, DTYPE
from .decision import DecisionParams, evaluate_model
from .detector import extract_features
from .diff import grad
from .psychoacoustic import masking_threshold, masking_terms
from .room import RoomDistribution, sample_rooms, image_source_rir, apply_rir, resample_source
from .synth import SynthParams, Note, random_params, beat_durations, forward, render_sequence, tile
from .util import __MIN_FREQ__, __MAX_FREQ__, __MIN_VOL__, __MAX_VOL__, \
    ConfigError, DataError, InvariantError, NumericError

logger = logging.getLogger(__name__)

BASELINES = ("random_music", "random_single_notes", "real_music")

# soft limit on how much worse (higher attacked F1) the room-trained adversary may do under held-out rooms
EOT_TOLERANCE_F1 = 0.1


@dataclass(frozen=True)
class AttackConfig:
    alpha: float = 0.05
    steps: int = 500
    freq_step: float = 2.0
    vol_step: float = 0.5
    rooms: int = 8
    batch_size: int = 4
    seed: int = 0
    use_rir: bool = True
    use_masking: bool = True
    split_path: bool = False
    resample_rooms: bool = True
    resample_excitation: bool = False
    n_notes: int = 16
    bpm: float = 120.0
    beats: float = 0.5
    initial_vol: float = 70.0
    masking_spec: FrameSpec = FrameSpec()

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"Masking weight alpha must be non-negative, got {self.alpha}")
        if self.steps < 1 or self.rooms < 1 or self.batch_size < 1 or self.n_notes < 1:
            raise ConfigError(f"Steps, rooms, batch size and notes must be positive: {self}")
        if self.freq_step < 0 or self.vol_step < 0:
            raise ConfigError(f"Step sizes must be non-negative (got {self.freq_step}, {self.vol_step})")
        if not __MIN_VOL__ <= self.initial_vol <= __MAX_VOL__:
            raise ConfigError(f"Initial volume {self.initial_vol} outside [{__MIN_VOL__}, {__MAX_VOL__}]")

    @property
    def freq_bounds(self):
        return __MIN_FREQ__, __MAX_FREQ__

    @property
    def vol_bounds(self):
        return __MIN_VOL__, __MAX_VOL__


@dataclass(frozen=True)
class AttackTerms:
    loss: torch.Tensor
    wake: torch.Tensor
    masking: torch.Tensor


@dataclass
class AttackResult:
    initial_params: SynthParams
    final_params: SynthParams
    best_params: SynthParams
    best_loss: float
    trajectory: list = field(default_factory=list)

    @property
    def initial_loss(self):
        return self.trajectory[0]["attack_loss"]

    def trajectory_frame(self):
        return pd.DataFrame(self.trajectory,
                            columns=["step", "attack_loss", "wake_loss", "masking_loss", "clean_wake_loss"])


#########
# helpers
#########

def stack_batch(clips):
    """Audio (B, L) and frame labels (B, T) of equally long clips."""
    lengths = {len(c.audio) for c in clips}
    if len(lengths) != 1:
        raise InvariantError(f"Attack batches need clips of equal length, got {sorted(lengths)}")
    x = torch.stack([c.audio.tensor() for c in clips])
    y = torch.stack([torch.as_tensor(c.frame_labels, dtype=DTYPE) for c in clips])
    return x, y


def room_rirs(rooms):
    return [image_source_rir(room) for room in rooms]


def wake_loss(model, x, y, delta=None, rirs=None, adversary_rirs=None):
    """
    Frame BCE of the detector on t(x + delta), averaged over the impulse responses.
    With `adversary_rirs` the speech and the adversary take separate paths: t(x) + t'(delta).
    """
    n = x.shape[-1]

    def bce(signal):
        logits = model.logits(extract_features(signal, model.frontend))
        if logits.shape != y.shape:
            raise InvariantError(f"Detector produced {tuple(logits.shape)} frames, labels have {tuple(y.shape)}")
        return nn.functional.binary_cross_entropy_with_logits(logits, y)

    if not rirs:
        return bce(x if delta is None else x + delta)
    losses = []
    for i, rir in enumerate(rirs):
        if delta is None:
            signal = apply_rir(x, rir)[..., :n]
        elif adversary_rirs is not None:
            signal = apply_rir(x, rir)[..., :n] + apply_rir(delta, adversary_rirs[i])[..., :n]
        else:
            signal = apply_rir(x + delta, rir)[..., :n]
        losses.append(bce(signal))
    return torch.stack(losses).mean()


def attack_terms(model, x, y, delta, cfg, rirs=None, adversary_rirs=None, thresholds=None):
    """
    l = mean over rooms and batch of BCE(f(t(x + delta)), y) - alpha * L_eta(x, delta).
    :param x: clean audio (B, L) or (L,)
    :param y: frame labels matching the detector frames of x
    :param delta: rendered perturbation of length L (broadcast over the batch)
    :param rirs: ImpulseResponses (ignored unless cfg.use_rir)
    :param thresholds: precomputed MaskingThreshold of x (computed if None)
    """
    if delta.shape[-1] != x.shape[-1]:
        raise InvariantError(f"Perturbation has {delta.shape[-1]} samples, audio has {x.shape[-1]}")
    if cfg.use_rir and not rirs:
        raise InvariantError("Room transforms requested but no impulse responses given")
    use_rirs = rirs if cfg.use_rir else None
    wake = wake_loss(model, x, y, delta, use_rirs, adversary_rirs if cfg.use_rir else None)
    if cfg.use_masking and cfg.alpha > 0:
        masking = masking_terms(x, delta.expand(x.shape), cfg.masking_spec, thresholds).loss
    else:
        masking = torch.zeros((), dtype=DTYPE)
    return AttackTerms(loss=wake - cfg.alpha * masking, wake=wake, masking=masking)


def attack_loss(model, x, y, delta, cfg, rirs=None, adversary_rirs=None, thresholds=None):
    return attack_terms(model, x, y, delta, cfg, rirs, adversary_rirs, thresholds).loss


def normalize(g):
    """Scale a gradient to unit RMS (zero stays zero)."""
    rms = np.sqrt(np.mean(np.square(g)))
    return np.zeros_like(g) if rms == 0 else g / rms


def check_feasible(params, cfg):
    f, v = np.asarray(params.freqs), np.asarray(params.vols)
    if np.any(f < cfg.freq_bounds[0]) or np.any(f > cfg.freq_bounds[1]) \
            or np.any(v < cfg.vol_bounds[0]) or np.any(v > cfg.vol_bounds[1]):
        raise InvariantError(f"Parameters left the feasible box: freqs {f}, vols {v}")


############
# operations
############

def pgd_step(params, gradient, cfg):
    """
    One projected ascent step on frequencies and volumes.
    :param gradient: (d loss / d freq, d loss / d vol)
    :return: SynthParams with updated values clipped into the bounds; durations are kept
    """
    d_freq, d_vol = (np.asarray(g, dtype=np.float64) for g in gradient)
    if not (np.all(np.isfinite(d_freq)) and np.all(np.isfinite(d_vol))):
        raise NumericError(f"Non-finite attack gradient (freq {d_freq}, vol {d_vol})")
    freqs = np.clip(np.asarray(params.freqs) + cfg.freq_step * normalize(d_freq), *cfg.freq_bounds)
    vols = np.clip(np.asarray(params.vols) + cfg.vol_step * normalize(d_vol), *cfg.vol_bounds)
    return params.with_values(freqs=freqs, vols=vols)


def initial_params(cfg, sample_rate):
    rng = np.random.default_rng(cfg.seed)
    return random_params(cfg.n_notes, rng, bpm=cfg.bpm, sample_rate=sample_rate, beats=cfg.beats,
                         vol=cfg.initial_vol)


def run_attack(model, clips, cfg=AttackConfig(), rooms=RoomDistribution(), initial=None):
    """
    Optimize adversarial music against `model` on labeled training clips.
    Each step samples a clip batch (and rooms), renders the music, evaluates the attack loss, differentiates it
    with respect to the note frequencies and volumes and takes a projected ascent step.
    :return: AttackResult with the best iterate by attack loss
    """
    clips = list(clips)
    if not any(len(c.events) for c in clips):
        raise DataError("The attack needs clips with keyword events")
    sample_rate = clips[0].audio.sample_rate
    params = initial if initial is not None else initial_params(cfg, sample_rate)
    check_feasible(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    thresholds = {}
    result = AttackResult(initial_params=params, final_params=params, best_params=params, best_loss=-np.inf)
    rirs = adversary_rirs = None
    for step in range(cfg.steps):
        batch = sorted(rng.choice(len(clips), size=min(cfg.batch_size, len(clips)), replace=False))
        x, y = stack_batch([clips[i] for i in batch])
        key = tuple(batch)
        if key not in thresholds:
            thresholds[key] = masking_threshold(x, cfg.masking_spec, sample_rate)
        if cfg.use_rir and (rirs is None or cfg.resample_rooms):
            configs = sample_rooms(replace(rooms, count=cfg.rooms, seed=int(rng.integers(2 ** 31)), fs=sample_rate))
            rirs = room_rirs(configs)
            if cfg.split_path:
                adversary_rirs = room_rirs([resample_source(c, rng, rooms.margin) for c in configs])
        delta, tape = forward(params, target_length=x.shape[-1],
                              seed_offset=step if cfg.resample_excitation else 0)
        terms = attack_terms(model, x, y, delta, cfg, rirs, adversary_rirs, thresholds[key])
        grads = grad(terms.loss, {"freq": tape.freqs, "vol": tape.vols})
        with torch.no_grad():
            clean = wake_loss(model, x, y, None, rirs if cfg.use_rir else None).item()
        loss = terms.loss.item()
        result.trajectory.append(dict(step=step, attack_loss=loss, wake_loss=terms.wake.item(),
                                      masking_loss=terms.masking.item(), clean_wake_loss=clean))
        if loss > result.best_loss:
            result.best_loss, result.best_params = loss, params
        logger.debug(f"step {step}: attack loss {loss:.5f} (wake {terms.wake.item():.5f}, "
                     f"masking {terms.masking.item():.5f}, clean {clean:.5f})")
        if (step + 1) % max(1, cfg.steps // 10) == 0:
            logger.info(f"attack step {step + 1}/{cfg.steps}: loss {loss:.4f}, best {result.best_loss:.4f}")
        params = pgd_step(params, (grads["freq"].numpy(), grads["vol"].numpy()), cfg)
        check_feasible(params, cfg)
    result.final_params = params
    return result


###########
# baselines
###########

def baseline_params(kind, seed=0, n_notes=16, bpm=120.0, sample_rate=None, beats=0.5):
    """
    Random feasible music for comparison with the adversary.
    'random_music': every note uniform in the bounds box; 'random_single_notes': one uniform random note repeated.
    """
    kwargs = {} if sample_rate is None else dict(sample_rate=sample_rate)
    rng = np.random.default_rng(seed)
    if kind == "random_music":
        return random_params(n_notes, rng, bpm=bpm, beats=beats, **kwargs)
    if kind == "random_single_notes":
        params = random_params(1, rng, bpm=bpm, beats=beats, **kwargs)
        durations = beat_durations(n_notes, bpm, params.sample_rate, beats)
        note = params.notes[0]
        return replace(params, notes=tuple(Note(note.freq, dur, note.vol) for dur in durations),
                       seeds=(params.seeds[0],) * n_notes)
    raise ConfigError(f"Unknown baseline '{kind}', expected one of {BASELINES[:2]}")


def match_loudness(clip, reference_rms):
    """Scale a clip to the given RMS (silent clips stay silent)."""
    rms = clip.rms()
    if rms == 0:
        return clip
    return AudioClip(clip.samples * (reference_rms / rms), clip.sample_rate)


def baseline_audio(kind, length, reference_rms=None, seed=0, music=None, **kwargs):
    """
    Rendered baseline looped to `length` samples and matched to `reference_rms` (the adversary's loudness).
    :param music: AudioClip of real music, required for kind 'real_music'
    """
    if kind == "real_music":
        if music is None:
            raise ConfigError("The 'real_music' baseline needs a music recording")
        with torch.no_grad():
            clip = AudioClip(tile(music.tensor(), length).numpy(), music.sample_rate)
    else:
        clip = render_sequence(baseline_params(kind, seed, **kwargs), length)
    return clip if reference_rms is None else match_loudness(clip, reference_rms)


############
# evaluation
############

def perturb_clips(clips, perturbation=None, rir=None, adversary_rir=None):
    """
    Clips as the detector hears them: t(x + delta) cut to the clean length (t is the identity without `rir`).
    With `adversary_rir` the perturbation takes its own path.
    """
    out = []
    for clip in clips:
        n = len(clip.audio)
        with torch.no_grad():
            x = clip.audio.tensor()
            delta = None if perturbation is None else tile(perturbation.tensor(), n)
            if rir is None:
                y = x if delta is None else x + delta
            elif delta is None:
                y = apply_rir(x, rir)[:n]
            elif adversary_rir is not None:
                y = apply_rir(x, rir)[:n] + apply_rir(delta, adversary_rir)[:n]
            else:
                y = apply_rir(x + delta, rir)[:n]
        out.append(replace(clip, audio=AudioClip(y.numpy(), clip.audio.sample_rate)))
    return out


def eot_report(model, clips, adversaries, rooms, decision=DecisionParams()):
    """
    Attacked F1 of each adversary without a room and averaged over held-out rooms.
    :param adversaries: dict name -> SynthParams; the names 'rir' and 'no_rir' trigger the soft robustness check
    :param rooms: held-out RoomConfigs
    :return: DataFrame with one row per (adversary, condition)
    """
    rirs = room_rirs(rooms)
    n = len(clips[0].audio)
    rows = []
    for name, params in sorted(adversaries.items()):
        music = render_sequence(params, n)
        rows.append(dict(adversary=name, condition="no_rir",
                         **evaluate_model(model, perturb_clips(clips, music), decision).to_dict()))
        report = None
        for rir in rirs:
            r = evaluate_model(model, perturb_clips(clips, music, rir), decision)
            report = r if report is None else report + r
        rows.append(dict(adversary=name, condition="heldout_rooms", **report.to_dict()))
    frame = pd.DataFrame(rows)
    heldout = frame[frame.condition == "heldout_rooms"].set_index("adversary").f1
    if "rir" in heldout and "no_rir" in heldout and heldout["rir"] > heldout["no_rir"] + EOT_TOLERANCE_F1:
        logger.warning(f"room-trained adversary leaves F1 {heldout['rir']:.3f} under held-out rooms, more than "
                       f"{EOT_TOLERANCE_F1} above the room-free adversary ({heldout['no_rir']:.3f})")
    return frame
