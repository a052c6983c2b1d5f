#  Copyright (c) 2020 Robert Lieck

from .audio import AudioClip, FrameSpec, read_wav, write_wav
from .synth import Note, SynthParams, render_sequence
from .room import RoomConfig, RoomDistribution, image_source_rir, apply_rir
from .detector import FeatureFrontend, DetectorModel, TrainConfig, train, load_checkpoint, save_checkpoint
from .attack import AttackConfig, run_attack
from .config import ExperimentConfig
