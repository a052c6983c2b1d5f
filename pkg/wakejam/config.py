#  Copyright (c) 2020 Robert Lieck
"""Experiment configuration: layered INI files validated against the packaged defaults, with typed views."""
import configparser
import os
from pathlib import Path
from warnings import warn

from .attack import AttackConfig
from .audio import FrameSpec
from .corpus import AugmentationSpec, CorpusConfig
from .decision import DecisionParams
from .detector import FeatureFrontend, Architecture, TrainConfig
from .room import RoomDistribution
from .util import __DEFAULT__, __REPORT_DIR_ENV__, ConfigError, getbool

DEFAULT_FILE = Path(__file__).parent / 'default_config.ini'
HOME_FILE = Path("~/.wakejam/wakejam.ini")
LOCAL_FILE = Path('wakejam.ini')

# variants per raw recording of the standard augmentation grid
AUGMENTATION_MULTIPLICITY = 20


##################
# helper functions
##################

def _get_config_obj():
    return configparser.ConfigParser(allow_no_value=True,
                                     interpolation=configparser.ExtendedInterpolation(),
                                     default_section=__DEFAULT__)


def _pairs(values):
    if values is None:
        return None
    if len(values) % 2:
        raise ConfigError(f"Expected (min, max) pairs, got {values}")
    return tuple(zip(values[::2], values[1::2]))


###############
# configuration
###############

class ExperimentConfig:
    """
    Configuration of one experiment.
    :param files: additional config files, read after the standard locations
    :param overrides: iterable of (section, key, value), applied last
    :param home: read ~/.wakejam/wakejam.ini (None: if present, True: required, False: skip)
    :param local: read ./wakejam.ini, same convention
    """

    def __init__(self, *files, overrides=(), home=None, local=None):
        self.schema = _get_config_obj()
        with open(DEFAULT_FILE) as f:
            self.schema.read_file(f)
        self.config = _get_config_obj()
        self.config.read_dict({s: dict(self.schema.items(s, raw=True)) for s in self.schema.sections()})
        self.files = [DEFAULT_FILE]
        for flag, file in [(home, HOME_FILE.expanduser()), (local, LOCAL_FILE)]:
            if flag or (flag is None and file.is_file()):
                self.load(file)
        for file in files:
            self.load(file)
        env = os.environ.get(__REPORT_DIR_ENV__)
        if env:
            self.config["paths"]["report_dir"] = env
        for section, key, value in overrides:
            self.set(section, key, value)

    def _check(self, section, key=None):
        if section not in self.schema.sections():
            raise ConfigError(f"Unknown config section [{section}]")
        if key is not None and not self.schema.has_option(section, key):
            raise ConfigError(f"Unknown config key '{key}' in section [{section}]")

    def load(self, file):
        """Read a config file after checking all its sections and keys against the schema."""
        file = Path(file)
        if not file.is_file():
            raise ConfigError(f"Config file '{file}' does not exist")
        tmp = _get_config_obj()
        try:
            with open(file) as f:
                tmp.read_file(f)
        except configparser.Error as e:
            raise ConfigError(f"Could not parse config file '{file}': {e}")
        for section in tmp.sections():
            self._check(section)
            for key in tmp[section]:
                if key not in tmp.defaults():
                    self._check(section, key)
        for key in tmp.defaults():
            raise ConfigError(f"Config file '{file}' sets '{key}' in [{__DEFAULT__}], which is not used")
        self.config.read_dict({s: dict(tmp.items(s, raw=True)) for s in tmp.sections()})
        self.files.append(file)

    def set(self, section, key, value):
        self._check(section, key)
        self.config[section][key] = None if value is None else str(value)

    # typed access

    def get(self, section, key):
        self._check(section, key)
        try:
            value = self.config.get(section, key)
        except configparser.Error as e:
            raise ConfigError(f"Could not resolve [{section}] {key}: {e}")
        return None if value is None or value.strip() == "" else value.strip()

    def _convert(self, section, key, kind):
        value = self.get(section, key)
        if value is None:
            return None
        try:
            return kind(value)
        except ValueError:
            raise ConfigError(f"[{section}] {key} = '{value}' is not a valid {kind.__name__}")

    def getint(self, section, key):
        return self._convert(section, key, int)

    def getfloat(self, section, key):
        return self._convert(section, key, float)

    def getbool(self, section, key):
        value = self.get(section, key)
        return None if value is None else getbool(value)

    def getfloats(self, section, key):
        value = self.get(section, key)
        if value is None:
            return None
        try:
            return tuple(float(v) for v in value.split(","))
        except ValueError:
            raise ConfigError(f"[{section}] {key} = '{value}' is not a list of numbers")

    def getpath(self, section, key):
        value = self.get(section, key)
        return None if value is None else Path(value).expanduser()

    # views

    def frame_spec(self):
        return FrameSpec(window_size=self.getint("frontend", "window_size"), hop=self.getint("frontend", "hop"),
                         window=self.get("frontend", "window"))

    def frontend(self):
        return FeatureFrontend(spec=self.frame_spec(), n_fft=self.getint("frontend", "n_fft"),
                               n_mels=self.getint("frontend", "n_mels"),
                               sample_rate=self.getint("frontend", "sample_rate"),
                               log_floor=self.getfloat("frontend", "log_floor"))

    def architecture(self):
        return Architecture(**{key: self.getint("detector", key) for key in Architecture.__dataclass_fields__})

    def train_config(self):
        return TrainConfig(learning_rate=self.getfloat("train", "learning_rate"),
                           epochs=self.getint("train", "epochs"),
                           batch_size=self.getint("train", "batch_size"),
                           seed=self.getint("train", "seed"),
                           optimizer=self.get("train", "optimizer"),
                           patience=self.getint("train", "patience"))

    def decision(self, tau=None):
        spec = self.frame_spec()
        return DecisionParams(tau=self.getfloat("decision", "tau") if tau is None else tau,
                              smoothing=self.getint("decision", "smoothing"),
                              refractory=self.getint("decision", "refractory"),
                              tolerance_ms=self.getfloat("decision", "tolerance_ms"),
                              hop_ms=1000.0 * spec.hop / self.getint("frontend", "sample_rate"))

    def attack_config(self):
        s = "attack"
        return AttackConfig(alpha=self.getfloat(s, "alpha"), steps=self.getint(s, "steps"),
                            freq_step=self.getfloat(s, "freq_step"), vol_step=self.getfloat(s, "vol_step"),
                            rooms=self.getint(s, "rooms"), batch_size=self.getint(s, "batch_size"),
                            seed=self.getint(s, "seed"), use_rir=self.getbool(s, "use_rir"),
                            use_masking=self.getbool(s, "use_masking"), split_path=self.getbool(s, "split_path"),
                            resample_rooms=self.getbool(s, "resample_rooms"),
                            resample_excitation=self.getbool(s, "resample_excitation"),
                            n_notes=self.getint(s, "n_notes"), bpm=self.getfloat(s, "bpm"),
                            beats=self.getfloat(s, "beats"), initial_vol=self.getfloat(s, "initial_vol"),
                            masking_spec=FrameSpec(window_size=self.getint(s, "masking_window"),
                                                   hop=self.getint(s, "masking_hop")))

    def synth_defaults(self):
        """Keyword arguments for SynthParams shared by the adversary and the KS baselines."""
        return dict(beta=self.getfloat("attack", "beta"), loop_gain=self.getfloat("attack", "loop_gain"),
                    volume_mode=self.get("attack", "volume_mode"))

    def room_distribution(self, heldout=False):
        s = "rooms"
        pairs = {key: self.getfloats(s, key) for key in ("lx", "ly", "lz", "rt60", "absorption")}
        for key, value in pairs.items():
            if value is not None and len(value) != 2:
                raise ConfigError(f"[{s}] {key} must be a (min, max) pair, got {value}")
        positions = {key: _pairs(self.getfloats(s, key)) for key in ("source", "mic")}
        for key, value in positions.items():
            if value is not None and len(value) != 3:
                raise ConfigError(f"[{s}] {key} must give ranges for x, y and z, got {value}")
        return RoomDistribution(lx=pairs["lx"], ly=pairs["ly"], lz=pairs["lz"], margin=self.getfloat(s, "margin"),
                                source=positions["source"], mic=positions["mic"],
                                rt60=pairs["rt60"], absorption=pairs["absorption"],
                                max_order=self.getint(s, "max_order"),
                                count=self.getint(s, "heldout_count" if heldout else "count"),
                                seed=self.getint(s, "heldout_seed" if heldout else "seed"),
                                fs=self.getint("frontend", "sample_rate"))

    def augmentation_spec(self):
        spec = AugmentationSpec(speeds=self.getfloats("augmentation", "speeds"),
                                tempos=self.getfloats("augmentation", "tempos"),
                                gains_db=self.getfloats("augmentation", "gains_db"),
                                min_length=self.getint("frontend", "window_size"))
        if spec.multiplicity < AUGMENTATION_MULTIPLICITY:
            warn(f"Augmentation grid yields {spec.multiplicity} variants per recording, "
                 f"fewer than {AUGMENTATION_MULTIPLICITY}", RuntimeWarning)
        return spec

    def corpus_config(self):
        s = "corpus"
        gain_db = self.getfloats(s, "gain_db")
        if len(gain_db) != 2:
            raise ConfigError(f"[{s}] gain_db must be a (min, max) pair, got {gain_db}")
        return CorpusConfig(clips=self.getint(s, "clips"), ratio=self.getfloat(s, "ratio"),
                            clip_seconds=self.getfloat(s, "clip_seconds"), density=self.getint(s, "density"),
                            negative_density=self.getint(s, "negative_density"), gain_db=gain_db,
                            seed=self.getint(s, "seed"), sample_rate=self.getint("frontend", "sample_rate"),
                            frames=self.frame_spec())

    def report_dir(self):
        return self.getpath("paths", "report_dir")

    def summary(self):
        """Effective configuration as text, one block per section."""
        blocks = [f"# read from: {', '.join(str(f) for f in self.files)}"]
        for section in self.config.sections():
            s = f"[{section}]"
            for key in self.config[section]:
                s += f"\n    {key}: {self.get(section, key)}"
            blocks.append(s)
        return "\n\n".join(blocks)
