#  Copyright (c) 2020 Robert Lieck
"""
Synthetic labeled corpus: augmentation of raw utterances, mixing onto background noise, frame labels, leakage-free
splits and the JSON corpus manifest.
"""
import itertools
import json
import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import get_window, resample_poly

from .audio import AudioClip, FrameSpec, mix, read_wav, write_wav
from .util import __SAMPLE_RATE__, InvariantError, DataError, PlacementError, DegenerateOutputError, ConfigError

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1

SPLITS = ("train", "test")


##############
# domain types
##############

@dataclass(frozen=True)
class Utterance:
    """A raw or augmented source recording; descendants keep the `raw_id` of their raw utterance."""
    raw_id: str
    audio: AudioClip
    variant: tuple = ()

    @property
    def utterance_id(self):
        if not self.variant:
            return self.raw_id
        return self.raw_id + "@" + "_".join(f"{v:g}" for v in self.variant)


@dataclass(frozen=True)
class Placement:
    offset: int
    length: int
    gain: float
    source_id: str
    raw_id: str
    positive: bool

    @property
    def end(self):
        return self.offset + self.length

    def to_dict(self):
        return dict(offset=self.offset, length=self.length, gain=self.gain, source_id=self.source_id,
                    raw_id=self.raw_id, positive=self.positive)


@dataclass(frozen=True, eq=False)
class LabeledClip:
    """Background clip with placed utterances; `events` are keyword intervals [onset, offset) in samples."""
    audio: AudioClip
    frame_labels: np.ndarray
    events: tuple = ()
    placements: tuple = ()
    background_id: str = None
    clip_id: str = None

    @property
    def raw_ids(self):
        ids = {p.raw_id for p in self.placements}
        if self.background_id is not None:
            ids.add(self.background_id)
        return sorted(ids)


@dataclass(frozen=True)
class AugmentationSpec:
    """Speed x tempo x gain grid; every raw utterance yields one variant per grid point."""
    speeds: tuple = (0.9, 0.95, 1.0, 1.05, 1.1)
    tempos: tuple = (0.9, 1.1)
    gains_db: tuple = (-6.0, 0.0)
    multiplicity: int = None
    grain_ms: float = 30.0
    min_length: int = 1

    def __post_init__(self):
        if not (self.speeds and self.tempos and self.gains_db):
            raise InvariantError("Augmentation grid needs at least one speed, tempo and gain")
        if any(f <= 0 for f in self.speeds + self.tempos):
            raise InvariantError(f"Speed and tempo factors must be positive (speeds {self.speeds}, "
                                 f"tempos {self.tempos})")
        size = len(self.speeds) * len(self.tempos) * len(self.gains_db)
        if self.multiplicity is None:
            object.__setattr__(self, "multiplicity", size)
        elif self.multiplicity != size:
            raise InvariantError(f"Multiplicity {self.multiplicity} does not match the grid size {size}")

    def grid(self):
        return list(itertools.product(self.speeds, self.tempos, self.gains_db))


@dataclass(frozen=True)
class SplitManifest:
    train: tuple
    test: tuple

    def __post_init__(self):
        object.__setattr__(self, "train", tuple(sorted(self.train)))
        object.__setattr__(self, "test", tuple(sorted(self.test)))
        self.assert_disjoint()

    def assert_disjoint(self):
        leaked = set(self.train) & set(self.test)
        if leaked:
            raise InvariantError(f"Raw IDs in both splits: {sorted(leaked)}")

    def split_of(self, raw_id):
        if raw_id in self.train:
            return "train"
        if raw_id in self.test:
            return "test"
        raise KeyError(raw_id)

    def merge(self, other):
        return SplitManifest(train=self.train + other.train, test=self.test + other.test)

    def to_dict(self):
        return dict(train=list(self.train), test=list(self.test))


@dataclass(frozen=True)
class CorpusConfig:
    clips: int = 200
    ratio: float = 0.8
    clip_seconds: float = 10.0
    density: int = 1
    negative_density: int = 1
    gain_db: tuple = (0.0, 0.0)
    seed: int = 0
    sample_rate: int = __SAMPLE_RATE__
    # frames the labels are defined on; must be those of the detector frontend
    frames: FrameSpec = FrameSpec(window_size=400, hop=160, window="hann")

    def __post_init__(self):
        if self.clips < 2 or self.clip_seconds <= 0 or self.density < 0 or self.negative_density < 0:
            raise ConfigError(f"Invalid corpus configuration: {self}")


#########
# helpers
#########

def frame_labels(events, n_samples, spec):
    """1 on every frame [i*hop, i*hop + N) overlapping a keyword interval [onset, offset), else 0."""
    n = spec.n_frames(n_samples)
    starts = np.arange(n) * spec.hop
    labels = np.zeros(n, dtype=np.float64)
    for onset, offset in events:
        labels[(starts < offset) & (starts + spec.window_size > onset)] = 1.0
    return labels


def change_speed(samples, factor):
    """Resample so that playback runs `factor` times faster (pitch moves with it); length ceil(len / factor)."""
    if factor == 1:
        return np.array(samples, dtype=np.float64)
    ratio = Fraction(factor).limit_denominator(1000)
    return resample_poly(samples, ratio.denominator, ratio.numerator)


def change_tempo(samples, factor, sample_rate=__SAMPLE_RATE__, grain_ms=30.0):
    """Overlap-add time stretch with fixed grains at 50% overlap (pitch preserved); length about len / factor."""
    if factor == 1:
        return np.array(samples, dtype=np.float64)
    grain = max(2, int(round(grain_ms * sample_rate / 1000)))
    hop_out = grain // 2
    hop_in = max(1, int(round(hop_out * factor)))
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < grain:
        x = np.pad(x, (0, grain - len(x)))
    n = 1 + (len(x) - grain) // hop_in
    window = get_window("hann", grain)
    out = np.zeros((n - 1) * hop_out + grain)
    norm = np.zeros_like(out)
    for i in range(n):
        out[i * hop_out:i * hop_out + grain] += window * x[i * hop_in:i * hop_in + grain]
        norm[i * hop_out:i * hop_out + grain] += window
    return np.where(norm > 1e-3, out / np.maximum(norm, 1e-3), 0.0)


############
# operations
############

def augment(clip, spec=AugmentationSpec()):
    """
    All variants of an utterance on the augmentation grid (speed, then tempo, then gain).
    :return: list of (variant, AudioClip) with variant = (speed, tempo, gain_db)
    """
    out = []
    for speed, tempo, gain in spec.grid():
        y = change_speed(clip.samples, speed)
        y = change_tempo(y, tempo, clip.sample_rate, spec.grain_ms)
        if gain != 0:
            y = y * 10 ** (gain / 20)
        if len(y) < spec.min_length:
            raise DegenerateOutputError(f"Variant speed={speed} tempo={tempo} has {len(y)} samples, "
                                        f"fewer than {spec.min_length}")
        out.append(((speed, tempo, gain), AudioClip(y, clip.sample_rate)))
    return out


def augment_utterances(utterances, spec=AugmentationSpec()):
    return [Utterance(u.raw_id, audio, variant) for u in utterances for variant, audio in augment(u.audio, spec)]


def synthesize_mixture(background, positives, negatives, density, rng, frames, negative_density=None,
                       clip_seconds=10.0, gain_db=(0.0, 0.0), background_id=None, max_tries=100):
    """
    Place keyword and negative utterances at random non-overlapping offsets on a background.
    :param background: AudioClip of at least `clip_seconds`; a random `clip_seconds` excerpt is used
    :param positives: keyword Utterances
    :param negatives: negative-speech Utterances
    :param density: keyword events per clip
    :param rng: numpy Generator
    :param frames: FrameSpec of the detector frontend the labels are computed on
    :param negative_density: negative utterances per clip (defaults to `density`)
    :param gain_db: range of the per-placement gain
    :return: LabeledClip
    """
    if negative_density is None:
        negative_density = density
    length = int(round(clip_seconds * background.sample_rate))
    if len(background) < length:
        raise DataError(f"Background of {background.duration:.2f}s is shorter than {clip_seconds}s")
    if density > 0 and not positives:
        raise DataError("Keyword events requested but no keyword utterances available")
    if negative_density > 0 and not negatives:
        negative_density = 0
    start = int(rng.integers(0, len(background) - length + 1))
    audio = AudioClip(background.samples[start:start + length], background.sample_rate)

    chosen = [(positives[i], True) for i in rng.integers(0, len(positives), density)] if density else []
    chosen += [(negatives[i], False) for i in rng.integers(0, len(negatives), negative_density)] \
        if negative_density else []
    if sum(len(u.audio) for u, _ in chosen) > length:
        raise PlacementError(f"Utterances of {sum(len(u.audio) for u, _ in chosen)} samples do not fit "
                             f"into {length} samples")
    placements = []
    for utterance, positive in chosen:
        n = len(utterance.audio)
        for _ in range(max_tries):
            offset = int(rng.integers(0, length - n + 1))
            if all(offset + n <= p.offset or offset >= p.end for p in placements):
                break
        else:
            raise PlacementError(f"Could not place a {n}-sample utterance without overlap "
                                 f"after {max_tries} attempts")
        gain = float(10 ** (rng.uniform(*gain_db) / 20))
        placements.append(Placement(offset=offset, length=n, gain=gain, source_id=utterance.utterance_id,
                                    raw_id=utterance.raw_id, positive=positive))
        audio = mix(audio, utterance.audio, offset, gain)
    placements.sort(key=lambda p: p.offset)
    events = tuple((p.offset, p.end) for p in placements if p.positive)
    return LabeledClip(audio=audio, frame_labels=frame_labels(events, length, frames), events=events,
                       placements=tuple(placements), background_id=background_id)


def make_splits(raw_ids, ratio=0.8, seed=0):
    """Split raw utterance IDs into train/test; every descendant follows its raw ID."""
    ids = sorted(set(raw_ids))
    n_train = int(round(ratio * len(ids)))
    if not 0 < n_train < len(ids):
        raise ConfigError(f"Ratio {ratio} over {len(ids)} raw IDs leaves a split empty")
    order = np.random.default_rng(seed).permutation(len(ids))
    return SplitManifest(train=[ids[i] for i in order[:n_train]], test=[ids[i] for i in order[n_train:]])


def validation_ids(train_ids, fraction=0.1, seed=0):
    """Carve a validation subset from training raw IDs (at least one ID, never all of them)."""
    ids = sorted(train_ids)
    if len(ids) < 2:
        return ids, []
    n = min(len(ids) - 1, max(1, int(round(fraction * len(ids)))))
    order = np.random.default_rng(seed).permutation(len(ids))
    return sorted(ids[i] for i in order[n:]), sorted(ids[i] for i in order[:n])


def background_segments(raw_id, clip, clip_seconds):
    """Cut a long background into non-overlapping clip-length segments, each its own raw ID."""
    length = int(round(clip_seconds * clip.sample_rate))
    n = len(clip) // length
    if n == 0:
        raise DataError(f"Background '{raw_id}' ({clip.duration:.2f}s) is shorter than {clip_seconds}s")
    if n == 1:
        return [Utterance(raw_id, clip)]
    return [Utterance(f"{raw_id}#{k}", AudioClip(clip.samples[k * length:(k + 1) * length], clip.sample_rate))
            for k in range(n)]


##########
# manifest
##########

@dataclass
class CorpusManifest:
    """Everything needed to rebuild and label the corpus: splits, augmented utterances and mixed clips."""
    config: dict
    splits: dict
    utterances: list = field(default_factory=list)
    clips: list = field(default_factory=list)
    version: int = MANIFEST_VERSION

    REQUIRED = ("version", "config", "splits", "utterances", "clips")
    CLIP_KEYS = ("id", "path", "split", "events", "placements", "raw_ids", "samples")

    def to_dict(self):
        return dict(version=self.version, config=self.config, splits=self.splits, utterances=self.utterances,
                    clips=self.clips)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict) or any(key not in d for key in cls.REQUIRED):
            raise ConfigError(f"Corpus manifest lacks required keys {cls.REQUIRED}")
        if d["version"] != MANIFEST_VERSION:
            raise ConfigError(f"Unsupported corpus manifest version {d['version']}")
        for clip in d["clips"]:
            missing = [key for key in cls.CLIP_KEYS if key not in clip]
            if missing:
                raise ConfigError(f"Manifest clip entry {clip.get('id')} lacks {missing}")
            if clip["split"] not in SPLITS:
                raise ConfigError(f"Manifest clip {clip['id']} has unknown split '{clip['split']}'")
        return cls(config=d["config"], splits=d["splits"], utterances=d["utterances"], clips=d["clips"],
                   version=d["version"])

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise DataError(f"Corpus manifest '{path}' does not exist")
        try:
            with open(path) as f:
                d = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Corpus manifest '{path}' is not valid JSON: {e}")
        return cls.from_dict(d)

    def split_manifest(self):
        return SplitManifest(train=self.splits["train"], test=self.splits["test"])

    def clip_entries(self, split=None, raw_ids=None):
        for entry in self.clips:
            if split is not None and entry["split"] != split:
                continue
            if raw_ids is not None and not set(entry["raw_ids"]) <= set(raw_ids):
                continue
            yield entry

    def load_clips(self, root, frames, split=None, raw_ids=None, sample_rate=__SAMPLE_RATE__):
        """Read the clips of a split back as LabeledClips, labeled on `frames` from the recorded events."""
        root = Path(root)
        clips = []
        for entry in self.clip_entries(split, raw_ids):
            audio = read_wav(root / entry["path"], sample_rate)
            events = tuple((int(on), int(off)) for on, off in entry["events"])
            placements = tuple(Placement(**p) for p in entry["placements"])
            clips.append(LabeledClip(audio=audio, frame_labels=frame_labels(events, len(audio), frames),
                                     events=events, placements=placements, background_id=entry.get("background_id"),
                                     clip_id=entry["id"]))
        return clips


def build_corpus(keywords, negatives, backgrounds, out_dir, cfg=CorpusConfig(), spec=AugmentationSpec()):
    """
    Split raw utterances, augment them and mix clips per split; writes clip WAVs and `manifest.json`.
    :param keywords: raw keyword Utterances
    :param negatives: raw negative-speech Utterances (may be empty)
    :param backgrounds: raw background Utterances (long recordings are cut into clip-length segments)
    :param out_dir: target directory
    :return: CorpusManifest
    """
    out_dir = Path(out_dir)
    # every variant must span at least one label frame
    if spec.min_length < cfg.frames.window_size:
        spec = replace(spec, min_length=cfg.frames.window_size)
    segments = [s for b in backgrounds for s in background_segments(b.raw_id, b.audio, cfg.clip_seconds)]
    groups = dict(keyword=keywords, negative=negatives, background=segments)
    splits = SplitManifest(train=(), test=())
    for name, group in groups.items():
        if not group:
            if name != "negative":
                raise DataError(f"No {name} audio to build a corpus from")
            continue
        if len({u.raw_id for u in group}) < 2:
            raise ConfigError(f"At least two raw {name} recordings are needed for a train/test split")
        splits = splits.merge(make_splits([u.raw_id for u in group], cfg.ratio, cfg.seed))

    augmented_keywords = augment_utterances(keywords, spec)
    augmented_negatives = augment_utterances(negatives, spec)
    utterances = [dict(id=u.utterance_id, raw_id=u.raw_id, kind=kind, split=splits.split_of(u.raw_id),
                       variant=list(u.variant), samples=len(u.audio))
                  for kind, group in (("keyword", augmented_keywords), ("negative", augmented_negatives))
                  for u in group]
    logger.info(f"{len(augmented_keywords)} keyword and {len(augmented_negatives)} negative variants "
                f"from {len(keywords)} + {len(negatives)} raw utterances")

    n_train = int(round(cfg.ratio * cfg.clips))
    counts = dict(train=n_train, test=cfg.clips - n_train)
    entries = []
    for split in SPLITS:
        members = set(getattr(splits, split))
        pos = [u for u in augmented_keywords if u.raw_id in members]
        neg = [u for u in augmented_negatives if u.raw_id in members]
        bgs = [u for u in segments if u.raw_id in members]
        rng = np.random.default_rng([cfg.seed, SPLITS.index(split)])
        for k in range(counts[split]):
            background = bgs[int(rng.integers(0, len(bgs)))]
            clip = synthesize_mixture(background.audio, pos, neg, cfg.density, rng, cfg.frames,
                                      negative_density=cfg.negative_density, clip_seconds=cfg.clip_seconds,
                                      gain_db=cfg.gain_db, background_id=background.raw_id)
            clip_id = f"{split}-{k:05d}"
            rel_path = Path(split) / f"{clip_id}.wav"
            write_wav(clip.audio, out_dir / rel_path)
            entries.append(dict(id=clip_id, path=rel_path.as_posix(), split=split, samples=len(clip.audio),
                                events=[list(e) for e in clip.events],
                                placements=[p.to_dict() for p in clip.placements],
                                background_id=clip.background_id, raw_ids=clip.raw_ids))
        logger.info(f"wrote {counts[split]} {split} clips")

    for entry in entries:
        if {splits.split_of(r) for r in entry["raw_ids"]} != {entry["split"]}:
            raise InvariantError(f"Clip {entry['id']} mixes raw IDs from different splits")
    manifest = CorpusManifest(config=dict(clips=cfg.clips, ratio=cfg.ratio, clip_seconds=cfg.clip_seconds,
                                          density=cfg.density, negative_density=cfg.negative_density,
                                          gain_db=list(cfg.gain_db), seed=cfg.seed,
                                          sample_rate=cfg.sample_rate,
                                          frames=dict(window_size=cfg.frames.window_size, hop=cfg.frames.hop,
                                                      window=cfg.frames.window),
                                          augmentation=dict(speeds=list(spec.speeds), tempos=list(spec.tempos),
                                                            gains_db=list(spec.gains_db),
                                                            multiplicity=spec.multiplicity)),
                              splits=splits.to_dict(), utterances=utterances, clips=entries)
    manifest.save(out_dir / "manifest.json")
    return manifest


def label_ratio(clips):
    """Fraction of keyword frames, for logging class balance."""
    labels = np.concatenate([c.frame_labels for c in clips]) if clips else np.zeros(0)
    return float(labels.mean()) if len(labels) else math.nan
