#  Copyright (c) 2020 Robert Lieck
"""Decision layer on top of per-frame posteriors: event detection, event-level metrics and the DET curve."""
import logging
import math
from dataclasses import dataclass, asdict, replace

import numpy as np
import pandas as pd
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .util import InvariantError, ConfigError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DetectionEvent:
    onset: int
    offset: int
    peak: float

    def __post_init__(self):
        if self.onset > self.offset:
            raise InvariantError(f"Event onset {self.onset} after offset {self.offset}")


@dataclass(frozen=True)
class DecisionParams:
    """Threshold `tau`, moving-average width and refractory period in frames, match tolerance in ms."""
    tau: float = 0.5
    smoothing: int = 30
    refractory: int = 100
    tolerance_ms: float = 750.0
    hop_ms: float = 10.0

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise InvariantError(f"Decision threshold must lie in (0, 1), got {self.tau}")
        if self.smoothing < 1 or self.refractory < 0:
            raise InvariantError(f"Smoothing must be >= 1 and refractory >= 0 frames "
                                 f"(got {self.smoothing}, {self.refractory})")
        if self.tolerance_ms < 0 or self.hop_ms <= 0:
            raise InvariantError(f"Tolerance must be >= 0 and hop > 0 ms (got {self.tolerance_ms}, {self.hop_ms})")


@dataclass(frozen=True)
class MetricsReport:
    """
    Event-level confusion counts; the rates are derived with the 0/0 -> 0 convention.
    `negative_windows` counts the keyword-free stretches in which a false alarm could occur.
    """
    true_positives: int = 0
    false_positives: int = 0
    false_negatives: int = 0
    negative_windows: int = 0
    count: int = 0

    @property
    def precision(self):
        return _ratio(self.true_positives, self.true_positives + self.false_positives)

    @property
    def recall(self):
        return _ratio(self.true_positives, self.true_positives + self.false_negatives)

    @property
    def f1(self):
        p, r = self.precision, self.recall
        return _ratio(2 * p * r, p + r)

    @property
    def miss_rate(self):
        return 1.0 - self.recall

    @property
    def false_alarm_rate(self):
        return min(1.0, _ratio(self.false_positives, self.negative_windows))

    def combine(self, *others):
        """Pool the counts of several reports (micro-averaging)."""
        fields = asdict(self)
        for other in others:
            for key, value in asdict(other).items():
                fields[key] += value
        return MetricsReport(**fields)

    def __add__(self, other):
        return self.combine(other)

    def to_dict(self):
        return dict(precision=self.precision, recall=self.recall, f1=self.f1, miss_rate=self.miss_rate,
                    false_alarm_rate=self.false_alarm_rate, **asdict(self))

    def to_frame(self, **labels):
        """One-row DataFrame; `labels` become leading columns (e.g. mode='clean')."""
        return pd.DataFrame([{**labels, **self.to_dict()}])


def _ratio(num, den):
    return num / den if den else 0.0


#########
# helpers
#########

def smooth(posteriors, width):
    """Trailing moving average over `width` frames (shorter windows at the start)."""
    p = np.asarray(posteriors, dtype=np.float64)
    cum = np.concatenate([[0.0], np.cumsum(p)])
    idx = np.arange(1, len(p) + 1)
    start = np.maximum(idx - width, 0)
    return (cum[idx] - cum[start]) / (idx - start)


def truth_frames(events, hop):
    """Keyword intervals [onset, offset) in samples -> inclusive frame intervals at the given hop."""
    return [(int(on) // hop, max(int(on), int(off) - 1) // hop) for on, off in events]


def negative_windows(n_frames, truths, window):
    """Number of `window`-frame stretches outside the keyword intervals (at least one)."""
    covered = np.zeros(n_frames, dtype=bool)
    for on, off in truths:
        covered[max(on, 0):min(off + 1, n_frames)] = True
    return max(1, math.ceil(int((~covered).sum()) / window))


############
# operations
############

def detect_events(posteriors, tau=0.5, w=30, refractory=100):
    """
    Turn per-frame posteriors into detection events.
    An event starts where the w-frame moving average crosses tau upwards and lasts while it stays at or above tau;
    crossings less than `refractory` frames after the previous event's onset are ignored.
    """
    params = DecisionParams(tau=tau, smoothing=w, refractory=refractory)
    s = smooth(posteriors, params.smoothing)
    above = s >= params.tau
    events = []
    last_onset = None
    t = 0
    while t < len(s):
        if not above[t]:
            t += 1
            continue
        end = t
        while end + 1 < len(s) and above[end + 1]:
            end += 1
        if last_onset is None or t - last_onset >= params.refractory:
            events.append(DetectionEvent(onset=t, offset=end, peak=float(s[t:end + 1].max())))
            last_onset = t
        t = end + 1
    return events


def evaluate(events, truths, tolerance_ms=750.0, hop_ms=10.0, n_frames=None, window_frames=100):
    """
    Match events to ground-truth keyword intervals one-to-one (maximum bipartite matching).
    :param events: DetectionEvents
    :param truths: inclusive (onset, offset) frame intervals
    :param tolerance_ms: an event matches a truth if its onset lies within this distance of the interval
    :param hop_ms: frame hop in ms
    :param n_frames: frames in the evaluated audio (defaults to the last event/truth frame + 1)
    :param window_frames: length of one negative opportunity window for the false-alarm rate
    :return: MetricsReport
    """
    if tolerance_ms < 0:
        raise InvariantError(f"Tolerance must be non-negative, got {tolerance_ms}")
    tolerance = tolerance_ms / hop_ms
    truths = [(int(on), int(off)) for on, off in truths]
    if n_frames is None:
        n_frames = 1 + max([e.offset for e in events] + [off for _, off in truths] + [0])
    tp = 0
    if events and truths:
        adjacency = np.array([[on - tolerance <= e.onset <= off + tolerance for on, off in truths]
                              for e in events], dtype=np.int8)
        matching = maximum_bipartite_matching(csr_matrix(adjacency), perm_type="column")
        tp = int((matching >= 0).sum())
    return MetricsReport(true_positives=tp,
                         false_positives=len(events) - tp,
                         false_negatives=len(truths) - tp,
                         negative_windows=negative_windows(n_frames, truths, window_frames),
                         count=1)


def evaluate_posteriors(posteriors, truths, params=DecisionParams(), window_frames=None):
    """Decide and evaluate a list of per-clip posterior sequences with their truth intervals; counts are pooled."""
    if window_frames is None:
        window_frames = max(params.refractory, 1)
    report = MetricsReport()
    for p, t in zip(posteriors, truths):
        events = detect_events(p, params.tau, params.smoothing, params.refractory)
        report = report + evaluate(events, t, params.tolerance_ms, params.hop_ms, n_frames=len(p),
                                   window_frames=window_frames)
    return report


def det_curve(model, clips, taus, params=DecisionParams()):
    """
    Detection error tradeoff over a threshold grid.
    :param model: anything with `posteriors(audio)` (a DetectorModel)
    :param clips: LabeledClips with keyword events in samples
    :param taus: at least two thresholds in (0, 1)
    :return: DataFrame with columns tau, far, miss, miss_envelope sorted by decreasing tau; `far` and `miss` are
    measured at tau, `miss_envelope` is the lowest miss rate over thresholds >= tau
    """
    taus = sorted({float(t) for t in taus}, reverse=True)
    if len(taus) < 2:
        raise ConfigError(f"A DET curve needs at least two thresholds, got {taus}")
    posteriors, truths = posteriors_and_truths(model, clips)
    rows = []
    envelope = 1.0
    for tau in taus:
        report = evaluate_posteriors(posteriors, truths, replace(params, tau=tau))
        if report.miss_rate > envelope:
            logger.debug(f"miss rate {report.miss_rate:.4f} at tau={tau} above envelope {envelope:.4f}")
        envelope = min(envelope, report.miss_rate)
        rows.append(dict(tau=tau, far=report.false_alarm_rate, miss=report.miss_rate, miss_envelope=envelope))
    return pd.DataFrame(rows, columns=["tau", "far", "miss", "miss_envelope"])


def posteriors_and_truths(model, clips):
    hop = model.frontend.spec.hop
    posteriors = [model.posteriors(clip.audio) for clip in clips]
    truths = [truth_frames(clip.events, hop) for clip in clips]
    return posteriors, truths


def evaluate_model(model, clips, params=DecisionParams()):
    """Event-level metrics of `model` on labeled clips."""
    posteriors, truths = posteriors_and_truths(model, clips)
    return evaluate_posteriors(posteriors, truths, params)
