#  Copyright (c) 2020 Robert Lieck
"""
The emulated wake-word detector: log mel filterbank frontend, time-delayed bottleneck highway network, training
and checkpoints.
"""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import librosa
import numpy as np
import torch
from torch import nn

from .audio import FrameSpec, as_tensor, frame_signal, DTYPE
from .decision import DecisionParams, evaluate_model
from .util import __SAMPLE_RATE__, InvariantError, DataError, ConfigError, CompatibilityError, AudioIOError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "wakejam-detector"
CHECKPOINT_VERSION = 1

OPTIMIZERS = ("adam", "sgd")


##########
# frontend
##########

@dataclass(frozen=True, eq=False)
class FeatureFrontend:
    """
    Log filterbank energies of a zero-padded DFT per frame (25 ms window, 10 ms hop, 512-point DFT at 16 kHz).
    `mean` and `std` are the per-feature normalization statistics; None until fitted on training data.
    """
    spec: FrameSpec = FrameSpec(window_size=400, hop=160, window="hann")
    n_fft: int = 512
    n_mels: int = 64
    sample_rate: int = __SAMPLE_RATE__
    log_floor: float = 1e-10
    mean: np.ndarray = None
    std: np.ndarray = None

    def __post_init__(self):
        if self.n_mels < 1:
            raise InvariantError(f"Filterbank needs at least one band, got {self.n_mels}")
        if self.n_fft < self.spec.window_size:
            raise InvariantError(f"DFT size {self.n_fft} is smaller than the window ({self.spec.window_size})")
        if self.log_floor <= 0:
            raise InvariantError(f"Log floor must be positive, got {self.log_floor}")
        for name in ("mean", "std"):
            value = getattr(self, name)
            if value is not None:
                value = np.array(value, dtype=np.float64).reshape(-1)
                if len(value) != self.n_mels:
                    raise InvariantError(f"Normalization {name} has {len(value)} entries, expected {self.n_mels}")
                object.__setattr__(self, name, value)

    @property
    def n_features(self):
        return self.n_mels

    @property
    def fitted(self):
        return self.mean is not None and self.std is not None

    def filterbank(self):
        """(n_mels, n_fft // 2 + 1) mel weights as a double tensor."""
        weights = librosa.filters.mel(sr=self.sample_rate, n_fft=self.n_fft, n_mels=self.n_mels)
        return torch.as_tensor(weights, dtype=DTYPE)

    def geometry(self):
        """Everything a checkpoint must agree on, without the statistics."""
        return dict(window_size=self.spec.window_size, hop=self.spec.hop, window=self.spec.window,
                    n_fft=self.n_fft, n_mels=self.n_mels, sample_rate=self.sample_rate, log_floor=self.log_floor)

    def to_dict(self):
        d = self.geometry()
        d.update(mean=None if self.mean is None else self.mean.tolist(),
                 std=None if self.std is None else self.std.tolist())
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(spec=FrameSpec(window_size=d["window_size"], hop=d["hop"], window=d["window"]),
                   n_fft=d["n_fft"], n_mels=d["n_mels"], sample_rate=d["sample_rate"], log_floor=d["log_floor"],
                   mean=d.get("mean"), std=d.get("std"))


def log_energies(x, frontend):
    x = as_tensor(x)
    frames = frame_signal(x, frontend.spec)
    spectrum = torch.fft.rfft(frames, n=frontend.n_fft, dim=-1)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    return torch.log(power @ frontend.filterbank().T + frontend.log_floor)


def extract_features(clip, frontend):
    """
    Feature matrix (frames x n_mels) of a clip or tensor; differentiable with respect to the samples.
    Normalized with the frontend statistics when they are fitted.
    """
    features = log_energies(clip, frontend)
    if frontend.fitted:
        mean = torch.as_tensor(frontend.mean, dtype=DTYPE)
        std = torch.as_tensor(frontend.std, dtype=DTYPE)
        features = (features - mean) / std
    return features


def fit_normalization(frontend, clips, min_std=1e-8):
    """Frontend with mean/std of the log energies over all frames of the (training) clips."""
    with torch.no_grad():
        stacked = torch.cat([log_energies(c, frontend) for c in clips]).numpy()
    if len(stacked) == 0:
        raise DataError("Cannot fit feature normalization without any frames")
    return replace(frontend, mean=stacked.mean(axis=0), std=np.maximum(stacked.std(axis=0), min_std))


#########
# network
#########

class HighwayLayer(nn.Module):
    """y = T(x) * tanh(W_H x + b_H) + (1 - T(x)) * x with gate T(x) = sigmoid(W_T x + b_T)."""

    def __init__(self, width, gate_bias=-1.0):
        super().__init__()
        self.width = width
        self.transform = nn.Linear(width, width)
        self.gate = nn.Linear(width, width)
        # start close to the carry path
        self.gate.bias.data.fill_(gate_bias)

    def forward(self, x):
        if x.shape[-1] != self.width:
            raise InvariantError(f"Highway layer of width {self.width} got input of width {x.shape[-1]}")
        t = torch.sigmoid(self.gate(x))
        return t * torch.tanh(self.transform(x)) + (1 - t) * x


def highway_forward(layer, x):
    return layer(torch.as_tensor(x, dtype=DTYPE))


def stack_context(h, context):
    """Concatenate each frame with its `context` neighbours on either side, repeating the edge frames."""
    if context == 0:
        return h
    first = h[..., :1, :].expand(*h.shape[:-2], context, h.shape[-1])
    last = h[..., -1:, :].expand(*h.shape[:-2], context, h.shape[-1])
    padded = torch.cat([first, h, last], dim=-2)
    # (..., T, width, 2c+1) -> (..., T, 2c+1, width)
    windows = padded.unfold(-2, 2 * context + 1, 1).transpose(-1, -2)
    return windows.reshape(*h.shape[:-1], (2 * context + 1) * h.shape[-1])


@dataclass(frozen=True)
class Architecture:
    feature_width: int = 128
    feature_layers: int = 4
    bottleneck: int = 64
    context: int = 3
    classifier_width: int = 128
    classifier_layers: int = 6

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < (0 if name == "context" else 1):
                raise InvariantError(f"Architecture parameter {name} must be positive, got {value}")


class DetectorModel(nn.Module):
    """
    Frame-wise wake-word posterior: input projection, highway feature block, linear bottleneck, temporal context
    stacking, projection, highway classifier block and a logistic output unit.
    """

    # posteriors are kept strictly inside (0, 1)
    EPS = 1e-12

    def __init__(self, frontend=FeatureFrontend(), architecture=Architecture(), seed=0):
        super().__init__()
        self.frontend = frontend
        self.architecture = architecture
        a = architecture
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.input = nn.Linear(frontend.n_features, a.feature_width)
            self.feature_block = nn.Sequential(*[HighwayLayer(a.feature_width) for _ in range(a.feature_layers)])
            self.bottleneck = nn.Linear(a.feature_width, a.bottleneck)
            self.context_projection = nn.Linear((2 * a.context + 1) * a.bottleneck, a.classifier_width)
            self.classifier_block = nn.Sequential(*[HighwayLayer(a.classifier_width)
                                                    for _ in range(a.classifier_layers)])
            self.output = nn.Linear(a.classifier_width, 1)
        self.to(DTYPE)

    def logits(self, features):
        h = self.feature_block(self.input(features))
        h = stack_context(self.bottleneck(h), self.architecture.context)
        h = self.classifier_block(self.context_projection(h))
        return self.output(h).squeeze(-1)

    def forward(self, features):
        """Per-frame posteriors (..., frames) of a feature matrix (..., frames, n_features)."""
        return torch.clamp(torch.sigmoid(self.logits(features)), self.EPS, 1 - self.EPS)

    def posteriors(self, audio):
        """Posteriors of a clip as an array (no gradient)."""
        with torch.no_grad():
            return self(extract_features(audio, self.frontend)).numpy()


def forward(model, features):
    return model(torch.as_tensor(features, dtype=DTYPE))


##########
# training
##########

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0
    optimizer: str = "adam"
    patience: int = 5

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError(f"Training hyperparameters must be positive: {self}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"Unknown optimizer '{self.optimizer}', expected one of {OPTIMIZERS}")


@dataclass
class TrainResult:
    model: DetectorModel
    initial_loss: float
    losses: list = field(default_factory=list)
    validation_f1: list = field(default_factory=list)
    best_epoch: int = None


def frame_bce(model, features, labels):
    logits = model.logits(features)
    return nn.functional.binary_cross_entropy_with_logits(logits, labels)


def _make_optimizer(model, cfg):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    return torch.optim.SGD(model.parameters(), lr=cfg.learning_rate)


def train(model, clips, cfg=TrainConfig(), validation=None, decision=DecisionParams()):
    """
    Minimize frame-level binary cross-entropy on labeled clips.
    :param model: DetectorModel; its frontend gets normalization statistics from `clips` if it has none
    :param clips: LabeledClips (audio + frame labels)
    :param cfg: TrainConfig
    :param validation: optional LabeledClips for early stopping on event-level F1 (best epoch is restored)
    :param decision: decision parameters used for the validation F1
    :return: TrainResult
    """
    clips = list(clips)
    labels = np.concatenate([np.asarray(c.frame_labels) for c in clips]) if clips else np.zeros(0)
    if not (np.any(labels == 1) and np.any(labels == 0)):
        raise DataError("Training needs frames of both classes (keyword and non-keyword)")
    if not model.frontend.fitted:
        model.frontend = fit_normalization(model.frontend, [c.audio for c in clips])
    with torch.no_grad():
        features = [extract_features(c.audio, model.frontend) for c in clips]
    targets = [torch.as_tensor(c.frame_labels, dtype=DTYPE) for c in clips]
    for f, t in zip(features, targets):
        if f.shape[0] != t.shape[0]:
            raise DataError(f"Clip has {f.shape[0]} feature frames but {t.shape[0]} labels")

    def epoch_loss():
        with torch.no_grad():
            return float(np.mean([frame_bce(model, f, t).item() for f, t in zip(features, targets)]))

    rng = np.random.default_rng(cfg.seed)
    optimizer = _make_optimizer(model, cfg)
    result = TrainResult(model=model, initial_loss=epoch_loss())
    logger.info(f"training on {len(clips)} clips, initial loss {result.initial_loss:.4f}")
    best_f1, best_state, stale = -1.0, None, 0
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(clips))
        running = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            optimizer.zero_grad()
            loss = torch.stack([frame_bce(model, features[i], targets[i]) for i in batch]).mean()
            loss.backward()
            optimizer.step()
            running.append(loss.item())
        model.eval()
        result.losses.append(float(np.mean(running)))
        message = f"epoch {epoch + 1}/{cfg.epochs}: loss {result.losses[-1]:.4f}"
        if validation:
            f1 = evaluate_model(model, validation, decision).f1
            result.validation_f1.append(f1)
            message += f", validation F1 {f1:.3f}"
            if f1 > best_f1:
                best_f1, stale, result.best_epoch = f1, 0, epoch
                best_state = {k: v.clone() for k, v in model.state_dict().items()}
            else:
                stale += 1
        logger.info(message)
        if validation and stale >= cfg.patience:
            logger.info(f"early stopping after epoch {epoch + 1}, best epoch {result.best_epoch + 1}")
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    return result


#############
# checkpoints
#############

def save_checkpoint(model, path):
    """Weights with an architecture header and the fitted frontend."""
    path = Path(path)
    checkpoint = dict(format=CHECKPOINT_FORMAT,
                      version=CHECKPOINT_VERSION,
                      architecture=model.architecture.__dict__,
                      frontend=model.frontend.to_dict(),
                      state_dict=model.state_dict())
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(checkpoint, str(path))
    except OSError as e:
        raise AudioIOError(f"Writing checkpoint '{path}' failed: {e}")


def check_compatible(frontend, expected):
    """Raise CompatibilityError if two frontends disagree on frame geometry or filterbank."""
    have, want = frontend.geometry(), expected.geometry()
    diff = {k: (have[k], want[k]) for k in want if have[k] != want[k]}
    if diff:
        raise CompatibilityError(f"Checkpoint frontend does not match the configured one "
                                 f"(checkpoint vs configured): {diff}")


def load_checkpoint(path, frontend=None):
    """
    Restore a DetectorModel.
    :param frontend: if given, the checkpoint's frontend must match its geometry
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Checkpoint '{path}' does not exist")
    try:
        checkpoint = torch.load(str(path), map_location="cpu")
    except Exception as e:
        raise CompatibilityError(f"Could not read checkpoint '{path}': {e}")
    if not isinstance(checkpoint, dict) or checkpoint.get("format") != CHECKPOINT_FORMAT:
        raise CompatibilityError(f"'{path}' is not a detector checkpoint")
    if checkpoint.get("version") != CHECKPOINT_VERSION:
        raise CompatibilityError(f"Checkpoint version {checkpoint.get('version')} is not supported "
                                 f"(expected {CHECKPOINT_VERSION})")
    stored = FeatureFrontend.from_dict(checkpoint["frontend"])
    if frontend is not None:
        check_compatible(stored, frontend)
    model = DetectorModel(frontend=stored, architecture=Architecture(**checkpoint["architecture"]))
    try:
        model.load_state_dict(checkpoint["state_dict"])
    except RuntimeError as e:
        raise CompatibilityError(f"Checkpoint weights do not fit the declared architecture: {e}")
    model.eval()
    return model
